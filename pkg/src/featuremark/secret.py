"""The dataset owner's watermark secret and its on-disk container.

Everything needed to re-run verification lives here: per-class carriers,
which samples were replaced, their clean originals, the embedding
hyperparameters, and the marker-model digest. The file layout is a little
endian binary container: header {magic "RMRK", schema_version u32} followed
by length-prefixed sections (carriers, selection, embed params as JSON,
original images at 8 bits per channel, marker digest hex).
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datasets import MarkingSelection
from .errors import CorruptArtifactError, UnsupportedSchemaError
from .stats import CarrierSet

MAGIC = b"RMRK"
SCHEMA_VERSION = 1


@dataclass(frozen=True)
class EmbedParams:
    """Hyperparameters of the embedding optimizer.

    Defaults bound distortion near 8-bit storage reality; every field is
    configurable per run and is recorded in the secret.
    """

    lambda_pixel: float = 0.05
    lambda_feature: float = 0.05
    steps: int = 200
    step_size: float = 2.0 / 255.0
    linf_budget: float | None = None
    quantize_8bit: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.lambda_pixel < 0 or self.lambda_feature < 0:
            raise ValueError("penalty weights must be >= 0")
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")
        if self.step_size <= 0:
            raise ValueError(f"step_size must be > 0, got {self.step_size}")
        if self.linf_budget is not None and not (0.0 < self.linf_budget <= 1.0):
            raise ValueError(f"linf_budget must lie in (0, 1], got {self.linf_budget}")

    def to_dict(self) -> dict:
        return {
            "lambda_pixel": self.lambda_pixel,
            "lambda_feature": self.lambda_feature,
            "steps": self.steps,
            "step_size": self.step_size,
            "linf_budget": self.linf_budget,
            "quantize_8bit": self.quantize_8bit,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EmbedParams":
        return cls(**d)


@dataclass(frozen=True, eq=False)
class WatermarkSecret:
    """Everything only the dataset owner knows."""

    carriers: CarrierSet
    selection: MarkingSelection
    clean_originals: dict[tuple[int, int], np.ndarray]  # (class, index) -> (C,H,W)
    embed_params: EmbedParams
    marker_model_digest: str = ""
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        expected = {
            (cls, idx)
            for cls, indices in self.selection.per_class_indices.items()
            for idx in indices
        }
        if set(self.clean_originals.keys()) != expected:
            raise ValueError("clean_originals keys must exactly match the marking selection")
        for cls in self.selection.per_class_indices:
            if not (0 <= cls < self.carriers.class_count):
                raise ValueError(
                    f"selection class {cls} outside carrier range "
                    f"[0, {self.carriers.class_count})"
                )

    def pairs(self) -> list[tuple[int, int]]:
        return self.selection.pairs()

    def labels_for_pairs(self) -> np.ndarray:
        return np.array([cls for cls, _ in self.pairs()], dtype=np.int64)

    def originals_for_pairs(self) -> np.ndarray:
        return np.stack([self.clean_originals[p] for p in self.pairs()])

    def equals(self, other: "WatermarkSecret") -> bool:
        if self.schema_version != other.schema_version:
            return False
        if self.marker_model_digest != other.marker_model_digest:
            return False
        if self.embed_params != other.embed_params:
            return False
        if self.carriers.seed != other.carriers.seed:
            return False
        if not np.array_equal(self.carriers.vectors, other.carriers.vectors):
            return False
        if self.selection != other.selection:
            return False
        if set(self.clean_originals) != set(other.clean_originals):
            return False
        return all(
            np.array_equal(self.clean_originals[k], other.clean_originals[k])
            for k in self.clean_originals
        )


def _write_section(out: io.BytesIO, payload: bytes) -> None:
    out.write(struct.pack("<Q", len(payload)))
    out.write(payload)


class _Reader:
    def __init__(self, data: bytes):
        self._data = data
        self._pos = 0

    def take(self, n: int) -> bytes:
        if self._pos + n > len(self._data):
            raise CorruptArtifactError("secret file truncated")
        chunk = self._data[self._pos : self._pos + n]
        self._pos += n
        return chunk

    def section(self) -> bytes:
        (length,) = struct.unpack("<Q", self.take(8))
        return self.take(length)


def _carriers_payload(carriers: CarrierSet) -> bytes:
    out = io.BytesIO()
    out.write(struct.pack("<IIq", carriers.class_count, carriers.feature_dim, carriers.seed))
    out.write(carriers.vectors.astype("<f4").tobytes(order="C"))
    return out.getvalue()


def _parse_carriers(payload: bytes) -> CarrierSet:
    r = _Reader(payload)
    m, d, seed = struct.unpack("<IIq", r.take(16))
    vecs = np.frombuffer(r.take(4 * m * d), dtype="<f4").reshape(m, d).astype(np.float32)
    return CarrierSet(vectors=vecs, seed=seed)


def _selection_payload(selection: MarkingSelection) -> bytes:
    out = io.BytesIO()
    out.write(struct.pack("<dqI", selection.wm_ratio, selection.seed,
                          len(selection.per_class_indices)))
    for cls in sorted(selection.per_class_indices):
        idx = selection.per_class_indices[cls]
        out.write(struct.pack("<II", cls, len(idx)))
        out.write(np.asarray(idx, dtype="<u4").tobytes())
    return out.getvalue()


def _parse_selection(payload: bytes) -> MarkingSelection:
    r = _Reader(payload)
    wm_ratio, seed, n_classes = struct.unpack("<dqI", r.take(20))
    per_class = {}
    for _ in range(n_classes):
        cls, count = struct.unpack("<II", r.take(8))
        idx = np.frombuffer(r.take(4 * count), dtype="<u4")
        per_class[int(cls)] = tuple(int(i) for i in idx)
    return MarkingSelection(wm_ratio=wm_ratio, per_class_indices=per_class, seed=seed)


def _originals_payload(secret: WatermarkSecret) -> bytes:
    out = io.BytesIO()
    pairs = secret.pairs()
    if pairs:
        shape = secret.clean_originals[pairs[0]].shape
    else:
        shape = (0, 0, 0)
    out.write(struct.pack("<IIII", len(pairs), *shape))
    for cls, idx in pairs:
        img = np.asarray(secret.clean_originals[(cls, idx)], dtype=np.float32)
        if img.shape != shape:
            raise ValueError(f"original ({cls}, {idx}) has shape {img.shape}, expected {shape}")
        scaled = img * 255.0
        u8 = np.round(scaled)
        if not np.array_equal(u8, scaled):
            raise ValueError(
                f"original ({cls}, {idx}) is not on the 8-bit grid; the container "
                "stores 8 bits per channel, so quantize before saving"
            )
        out.write(struct.pack("<II", cls, idx))
        out.write(u8.astype(np.uint8).tobytes(order="C"))
    return out.getvalue()


def _parse_originals(payload: bytes) -> dict[tuple[int, int], np.ndarray]:
    r = _Reader(payload)
    count, c, h, w = struct.unpack("<IIII", r.take(16))
    originals = {}
    for _ in range(count):
        cls, idx = struct.unpack("<II", r.take(8))
        raw = np.frombuffer(r.take(c * h * w), dtype=np.uint8)
        originals[(int(cls), int(idx))] = (
            raw.reshape(c, h, w).astype(np.float32) / np.float32(255.0)
        )
    return originals


def serialize_secret(secret: WatermarkSecret) -> bytes:
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<I", secret.schema_version))
    _write_section(out, _carriers_payload(secret.carriers))
    _write_section(out, _selection_payload(secret.selection))
    _write_section(out, json.dumps(secret.embed_params.to_dict(), sort_keys=True).encode())
    _write_section(out, _originals_payload(secret))
    _write_section(out, secret.marker_model_digest.encode("ascii"))
    return out.getvalue()


def deserialize_secret(data: bytes) -> WatermarkSecret:
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise CorruptArtifactError("not a watermark-secret file (bad magic)")
    (version,) = struct.unpack("<I", r.take(4))
    if version != SCHEMA_VERSION:
        raise UnsupportedSchemaError(
            f"secret schema version {version} not supported (expected {SCHEMA_VERSION})"
        )
    carriers = _parse_carriers(r.section())
    selection = _parse_selection(r.section())
    embed_params = EmbedParams.from_dict(json.loads(r.section().decode()))
    originals = _parse_originals(r.section())
    digest = r.section().decode("ascii")
    return WatermarkSecret(
        carriers=carriers,
        selection=selection,
        clean_originals=originals,
        embed_params=embed_params,
        marker_model_digest=digest,
        schema_version=version,
    )


def save_secret(secret: WatermarkSecret, path) -> None:
    Path(path).write_bytes(serialize_secret(secret))


def load_secret(path) -> WatermarkSecret:
    return deserialize_secret(Path(path).read_bytes())


def secret_digest(secret: WatermarkSecret) -> str:
    """SHA-256 of the canonical serialization."""
    return hashlib.sha256(serialize_secret(secret)).hexdigest()
