"""Dataset file formats: CIFAR-style binary batches, class folders, manifest archives.

Storage is 8 bits per channel in every format; loading scales pixels to
[0, 1]. Writers quantize with round-to-nearest, so datasets already on the
8-bit grid round-trip exactly.
"""

from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path

import numpy as np
from PIL import Image

from .datasets import SPLITS, LabeledImageDataset
from .errors import SchemaError

FORMATS = ("cifar", "folders", "manifest")

_CIFAR_SIDE = 32
_CIFAR_RECORD = 1 + 3 * _CIFAR_SIDE * _CIFAR_SIDE


def load_dataset(path, format: str, split: str = "train") -> LabeledImageDataset:
    """Load one split of a dataset in the given format, pixels scaled to [0, 1]."""
    path = Path(path)
    if format not in FORMATS:
        raise ValueError(f"format must be one of {FORMATS}, got {format!r}")
    if split not in SPLITS:
        raise ValueError(f"split must be one of {SPLITS}, got {split!r}")
    if not path.exists():
        raise FileNotFoundError(f"dataset path does not exist: {path}")
    if format == "cifar":
        return _load_cifar(path, split)
    if format == "folders":
        return _load_folders(path, split)
    return _load_manifest(path, split)


def save_dataset(ds: LabeledImageDataset, path, format: str = "manifest") -> None:
    path = Path(path)
    if format == "manifest":
        _save_manifest(ds, path)
    elif format == "folders":
        _save_folders(ds, path)
    elif format == "cifar":
        _save_cifar(ds, path)
    else:
        raise ValueError(f"format must be one of {FORMATS}, got {format!r}")


def _to_uint8(images: np.ndarray) -> np.ndarray:
    return np.round(np.asarray(images, dtype=np.float64) * 255.0).astype(np.uint8)


# --- CIFAR-style binary batches -------------------------------------------

def _load_cifar(path: Path, split: str) -> LabeledImageDataset:
    if split == "probe":
        raise SchemaError("CIFAR-style batches carry train and test splits only")
    meta = path / "batches.meta.txt"
    if not meta.exists():
        raise SchemaError(f"missing class-name file {meta}")
    class_names = tuple(line.strip() for line in meta.read_text().splitlines() if line.strip())
    if not class_names:
        raise SchemaError(f"{meta} names no classes")
    if split == "train":
        files = sorted(path.glob("data_batch_*.bin"))
        if not files:
            raise SchemaError(f"no data_batch_*.bin files under {path}")
    else:
        files = [path / "test_batch.bin"]
        if not files[0].exists():
            raise SchemaError(f"missing {files[0]}")
    images, labels = [], []
    for f in files:
        raw = f.read_bytes()
        if len(raw) % _CIFAR_RECORD != 0:
            raise SchemaError(
                f"{f.name} has {len(raw)} bytes, not a multiple of the "
                f"{_CIFAR_RECORD}-byte record"
            )
        rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, _CIFAR_RECORD)
        batch_labels = rec[:, 0].astype(np.int64)
        bad = np.flatnonzero(batch_labels >= len(class_names))
        if bad.size:
            raise SchemaError(
                f"label {int(batch_labels[bad[0]])} at record {int(bad[0])} of {f.name} "
                f"outside [0, {len(class_names)})"
            )
        images.append(rec[:, 1:].reshape(-1, 3, _CIFAR_SIDE, _CIFAR_SIDE))
        labels.append(batch_labels)
    return LabeledImageDataset(
        images=np.concatenate(images).astype(np.float32) / np.float32(255.0),
        labels=np.concatenate(labels),
        class_names=class_names,
        split=split,
        dataset_id=path.name,
    )


def _save_cifar(ds: LabeledImageDataset, path: Path) -> None:
    if ds.image_shape != (3, _CIFAR_SIDE, _CIFAR_SIDE):
        raise ValueError(f"CIFAR format requires 3x32x32 images, got {ds.image_shape}")
    if ds.class_count > 256:
        raise ValueError("CIFAR format stores labels in one byte")
    path.mkdir(parents=True, exist_ok=True)
    rec = np.empty((len(ds), _CIFAR_RECORD), dtype=np.uint8)
    rec[:, 0] = ds.labels.astype(np.uint8)
    rec[:, 1:] = _to_uint8(ds.images).reshape(len(ds), -1)
    name = "test_batch.bin" if ds.split == "test" else "data_batch_1.bin"
    (path / name).write_bytes(rec.tobytes())
    (path / "batches.meta.txt").write_text("\n".join(ds.class_names) + "\n")


# --- directory of class folders -------------------------------------------

def _load_folders(path: Path, split: str) -> LabeledImageDataset:
    class_dirs = sorted(p for p in path.iterdir() if p.is_dir())
    if not class_dirs:
        raise SchemaError(f"no class folders under {path}")
    class_names = tuple(p.name for p in class_dirs)
    images, labels = [], []
    shape = None
    for cls, cdir in enumerate(class_dirs):
        for f in sorted(cdir.iterdir()):
            if f.suffix.lower() not in (".png", ".jpg", ".jpeg", ".bmp"):
                continue
            try:
                arr = np.asarray(Image.open(f).convert("RGB"), dtype=np.uint8)
            except Exception as exc:
                raise SchemaError(f"unreadable image {f}: {exc}") from exc
            arr = arr.transpose(2, 0, 1)
            if shape is None:
                shape = arr.shape
            elif arr.shape != shape:
                raise SchemaError(f"image {f} has shape {arr.shape}, expected {shape}")
            images.append(arr)
            labels.append(cls)
    if not images:
        raise SchemaError(f"no images under {path}")
    return LabeledImageDataset(
        images=np.stack(images).astype(np.float32) / np.float32(255.0),
        labels=np.asarray(labels, dtype=np.int64),
        class_names=class_names,
        split=split,
        dataset_id=path.name,
    )


def _save_folders(ds: LabeledImageDataset, path: Path) -> None:
    path.mkdir(parents=True, exist_ok=True)
    u8 = _to_uint8(ds.images)
    for i, (img, label) in enumerate(zip(u8, ds.labels)):
        cdir = path / ds.class_names[label]
        cdir.mkdir(exist_ok=True)
        Image.fromarray(img.transpose(1, 2, 0)).save(cdir / f"{i:06d}.png")


# --- single archive with an index manifest --------------------------------

def _load_manifest(path: Path, split: str) -> LabeledImageDataset:
    with zipfile.ZipFile(path) as zf:
        try:
            index = json.loads(zf.read("index.json").decode())
        except KeyError:
            raise SchemaError(f"{path} has no index.json") from None
        for key in ("dataset_id", "class_names", "records"):
            if key not in index:
                raise SchemaError(f"index.json is missing {key!r}")
        class_names = tuple(index["class_names"])
        records = [r for r in index["records"] if r.get("split") == split]
        images, labels = [], []
        shape = None
        for r in records:
            label = int(r["label"])
            if not (0 <= label < len(class_names)):
                raise SchemaError(
                    f"label {label} for file {r['file']!r} outside "
                    f"[0, {len(class_names)})"
                )
            try:
                raw = zf.read(r["file"])
            except KeyError:
                raise SchemaError(f"archive member {r['file']!r} missing") from None
            arr = np.asarray(Image.open(io.BytesIO(raw)).convert("RGB"), dtype=np.uint8)
            arr = arr.transpose(2, 0, 1)
            if shape is None:
                shape = arr.shape
            elif arr.shape != shape:
                raise SchemaError(
                    f"image {r['file']!r} has shape {arr.shape}, expected {shape}"
                )
            images.append(arr)
            labels.append(label)
    if not images:
        raise SchemaError(f"{path} holds no records for split {split!r}")
    return LabeledImageDataset(
        images=np.stack(images).astype(np.float32) / np.float32(255.0),
        labels=np.asarray(labels, dtype=np.int64),
        class_names=class_names,
        split=split,
        dataset_id=str(index["dataset_id"]),
    )


def _save_manifest(ds: LabeledImageDataset, path: Path) -> None:
    u8 = _to_uint8(ds.images)
    records = []
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        for i, (img, label) in enumerate(zip(u8, ds.labels)):
            name = f"images/{i:06d}.png"
            buf = io.BytesIO()
            Image.fromarray(img.transpose(1, 2, 0)).save(buf, format="PNG")
            zf.writestr(name, buf.getvalue())
            records.append({"file": name, "label": int(label), "split": ds.split})
        index = {
            "dataset_id": ds.dataset_id,
            "class_names": list(ds.class_names),
            "records": records,
        }
        zf.writestr("index.json", json.dumps(index, indent=1))


def write_marking_sidecar(
    dataset_path, *, embed_params: dict, wm_ratio: float, selection_seed: int,
    secret_path: str, marker_model_digest: str,
) -> Path:
    """Record marking provenance next to a marked dataset (never carrier values)."""
    sidecar = Path(str(dataset_path) + ".mark.json")
    sidecar.write_text(
        json.dumps(
            {
                "embed_params": embed_params,
                "wm_ratio": wm_ratio,
                "selection_seed": selection_seed,
                "secret_path": str(secret_path),
                "marker_model_digest": marker_model_digest,
            },
            indent=1,
            sort_keys=True,
        )
    )
    return sidecar
