"""Classifier training and the feature-extractor / linear-head decomposition.

Every supported architecture exposes the same split: a backbone mapping
normalized images to penultimate features and a single linear head, so
logits == features @ W.T + b exactly. Normalization statistics live inside
the model record; callers never apply preprocessing themselves.

Architecture tags:
    desk_cnn     3 conv blocks + global average pool, d=128; the desk-scale default
    legacy_cnn   shallow two-conv / two-fc net, d=192; a second desk-scale option
    resnet18     torchvision ResNet-18 with a 3x3 stem for 32x32 inputs, d=512
    densenet121  torchvision DenseNet-121, d=1024
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .datasets import LabeledImageDataset
from .determinism import get_profile, seed_torch
from .errors import CorruptArtifactError, TrainingDivergedError, UnsupportedSchemaError

MODEL_MAGIC = b"RMDL"
MODEL_SCHEMA_VERSION = 1

_EVAL_BATCH = 512


@dataclass(frozen=True)
class TrainingConfig:
    epochs: int = 30
    batch_size: int = 128
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_decay_epochs: tuple[int, ...] = ()
    lr_decay_factor: float = 0.1
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "lr": self.lr,
            "momentum": self.momentum,
            "weight_decay": self.weight_decay,
            "lr_decay_epochs": list(self.lr_decay_epochs),
            "lr_decay_factor": self.lr_decay_factor,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingConfig":
        d = dict(d)
        d["lr_decay_epochs"] = tuple(d.get("lr_decay_epochs", ()))
        return cls(**d)


@dataclass(frozen=True)
class LinearClassifierWeights:
    weight_matrix: np.ndarray  # (class_count, feature_dim)
    bias: np.ndarray  # (class_count,)

    def __post_init__(self):
        w = np.asarray(self.weight_matrix, dtype=np.float32)
        b = np.asarray(self.bias, dtype=np.float32)
        if w.ndim != 2 or b.shape != (w.shape[0],):
            raise ValueError(f"inconsistent classifier shapes {w.shape} / {b.shape}")
        object.__setattr__(self, "weight_matrix", w)
        object.__setattr__(self, "bias", b)


class ClassifierNet(nn.Module):
    """Backbone + linear head with normalization folded into the forward pass."""

    def __init__(self, backbone: nn.Module, feature_dim: int, class_count: int,
                 channels: int):
        super().__init__()
        self.backbone = backbone
        self.head = nn.Linear(feature_dim, class_count)
        self.register_buffer("norm_mean", torch.zeros(channels, 1, 1))
        self.register_buffer("norm_std", torch.ones(channels, 1, 1))

    def set_normalization(self, mean: np.ndarray, std: np.ndarray) -> None:
        c = self.norm_mean.shape[0]
        self.norm_mean.copy_(torch.as_tensor(mean, dtype=torch.float32).reshape(c, 1, 1))
        self.norm_std.copy_(torch.as_tensor(std, dtype=torch.float32).reshape(c, 1, 1))

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.backbone((x - self.norm_mean) / self.norm_std)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x))


def _desk_backbone(channels: int) -> tuple[nn.Module, int]:
    return (
        nn.Sequential(
            nn.Conv2d(channels, 32, 3, padding=1), nn.BatchNorm2d(32), nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(32, 64, 3, padding=1), nn.BatchNorm2d(64), nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(64, 128, 3, padding=1), nn.BatchNorm2d(128), nn.ReLU(),
            nn.AdaptiveAvgPool2d(1), nn.Flatten(),
        ),
        128,
    )


def _legacy_backbone(channels: int, height: int, width: int) -> tuple[nn.Module, int]:
    flat = 96 * (height // 4) * (width // 4)
    return (
        nn.Sequential(
            nn.Conv2d(channels, 48, 5, padding=2), nn.ReLU(), nn.MaxPool2d(2),
            nn.Conv2d(48, 96, 5, padding=2), nn.ReLU(), nn.MaxPool2d(2),
            nn.Flatten(),
            nn.Linear(flat, 256), nn.ReLU(),
            nn.Linear(256, 192), nn.ReLU(),
        ),
        192,
    )


def _resnet18_backbone(channels: int) -> tuple[nn.Module, int]:
    from torchvision.models import resnet18

    net = resnet18(weights=None)
    net.conv1 = nn.Conv2d(channels, 64, 3, stride=1, padding=1, bias=False)
    net.maxpool = nn.Identity()
    net.fc = nn.Identity()
    return net, 512


def _densenet121_backbone(channels: int) -> tuple[nn.Module, int]:
    from torchvision.models import densenet121

    net = densenet121(weights=None)

    class _Features(nn.Module):
        def __init__(self, dense):
            super().__init__()
            self.dense = dense

        def forward(self, x):
            out = F.relu(self.dense.features(x), inplace=True)
            out = F.adaptive_avg_pool2d(out, 1)
            return torch.flatten(out, 1)

    if channels != 3:
        net.features.conv0 = nn.Conv2d(channels, 64, 7, stride=2, padding=3, bias=False)
    return _Features(net), 1024


ARCHITECTURES = ("desk_cnn", "legacy_cnn", "resnet18", "densenet121")


def build_architecture(architecture: str, class_count: int,
                       image_shape: tuple[int, int, int]) -> ClassifierNet:
    channels, height, width = image_shape
    if architecture == "desk_cnn":
        backbone, dim = _desk_backbone(channels)
    elif architecture == "legacy_cnn":
        backbone, dim = _legacy_backbone(channels, height, width)
    elif architecture == "resnet18":
        backbone, dim = _resnet18_backbone(channels)
    elif architecture == "densenet121":
        backbone, dim = _densenet121_backbone(channels)
    else:
        raise ValueError(f"unknown architecture {architecture!r}; supported: {ARCHITECTURES}")
    return ClassifierNet(backbone, dim, class_count, channels)


@dataclass
class TrainedModel:
    architecture: str
    net: ClassifierNet
    class_count: int
    feature_dim: int
    image_shape: tuple[int, int, int]
    training_manifest: dict
    weights_digest: str = ""

    def __post_init__(self):
        if not self.weights_digest:
            self.weights_digest = state_digest(self.net)


def state_digest(net: nn.Module) -> str:
    """SHA-256 over the state dict (names, dtypes, shapes, little-endian bytes)."""
    h = hashlib.sha256()
    state = net.state_dict()
    for name in sorted(state):
        t = state[name].detach().cpu().contiguous()
        arr = t.numpy()
        h.update(name.encode())
        h.update(str(arr.dtype).encode())
        h.update(str(arr.shape).encode())
        h.update(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
    return h.hexdigest()


def normalization_stats(images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = images.mean(axis=(0, 2, 3), dtype=np.float64)
    std = np.maximum(images.std(axis=(0, 2, 3), dtype=np.float64), 1e-5)
    return mean.astype(np.float32), std.astype(np.float32)


def sgd_fit(
    net: ClassifierNet,
    images: np.ndarray,
    targets: np.ndarray,
    loss_fn,
    config: TrainingConfig,
    manifest: dict,
) -> None:
    """Shuffled mini-batch SGD; raises TrainingDivergedError on non-finite loss."""
    rng = np.random.default_rng(config.seed)
    x_all = torch.from_numpy(np.ascontiguousarray(images, dtype=np.float32))
    t_all = torch.from_numpy(np.ascontiguousarray(targets))
    opt = torch.optim.SGD(
        net.parameters(), lr=config.lr, momentum=config.momentum,
        weight_decay=config.weight_decay,
    )
    net.train()
    lr = config.lr
    for epoch in range(config.epochs):
        if epoch in config.lr_decay_epochs:
            lr *= config.lr_decay_factor
            for group in opt.param_groups:
                group["lr"] = lr
        perm = rng.permutation(len(x_all))
        for start in range(0, len(perm), config.batch_size):
            idx = perm[start : start + config.batch_size]
            opt.zero_grad()
            loss = loss_fn(net(x_all[idx]), t_all[idx])
            if not torch.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}", manifest=manifest
                )
            loss.backward()
            opt.step()
    net.eval()


def train_classifier(
    ds: LabeledImageDataset, architecture: str, config: TrainingConfig | None = None
) -> TrainedModel:
    """Train a classifier on the train split; the manifest records everything."""
    if config is None:
        config = TrainingConfig()
    if len(ds) == 0:
        raise ValueError("training dataset is empty")
    if ds.split != "train":
        raise ValueError(f"training expects the train split, got {ds.split!r}")
    seed_torch(config.seed)
    net = build_architecture(architecture, ds.class_count, ds.image_shape)
    mean, std = normalization_stats(ds.images)
    net.set_normalization(mean, std)
    manifest = {
        "architecture": architecture,
        "dataset_id": ds.dataset_id,
        "class_count": ds.class_count,
        "n_train": len(ds),
        "image_shape": list(ds.image_shape),
        "objective": "cross_entropy",
        "config": config.to_dict(),
        "profile": get_profile(),
        "torch_version": torch.__version__,
    }
    sgd_fit(net, ds.images, ds.labels, F.cross_entropy, config, manifest)
    model = TrainedModel(
        architecture=architecture,
        net=net,
        class_count=ds.class_count,
        feature_dim=net.head.in_features,
        image_shape=ds.image_shape,
        training_manifest=manifest,
    )
    acc = evaluate_accuracy(model, ds)
    manifest["final_train_accuracy"] = acc
    manifest["train_accuracy_margin_over_chance"] = acc - 1.0 / ds.class_count
    return model


def _batched(net_fn, batch: np.ndarray) -> np.ndarray:
    x = torch.from_numpy(np.ascontiguousarray(batch, dtype=np.float32))
    outs = []
    with torch.no_grad():
        for start in range(0, len(x), _EVAL_BATCH):
            outs.append(net_fn(x[start : start + _EVAL_BATCH]))
    return torch.cat(outs).numpy()


def features(model: TrainedModel, batch) -> np.ndarray:
    """Penultimate-layer features in inference mode, (len, feature_dim)."""
    batch = np.asarray(batch, dtype=np.float32)
    if batch.shape[1:] != model.image_shape:
        raise ValueError(f"batch shape {batch.shape[1:]} != model input {model.image_shape}")
    model.net.eval()
    return _batched(model.net.features, batch)


def predict_logits(model: TrainedModel, batch) -> np.ndarray:
    batch = np.asarray(batch, dtype=np.float32)
    if batch.shape[1:] != model.image_shape:
        raise ValueError(f"batch shape {batch.shape[1:]} != model input {model.image_shape}")
    model.net.eval()
    return _batched(model.net, batch)


def predict_probabilities(model: TrainedModel, batch) -> np.ndarray:
    """Softmax rows over classes; each row sums to 1 within 1e-6."""
    logits = torch.from_numpy(predict_logits(model, batch))
    return torch.softmax(logits.double(), dim=1).float().numpy()


def classifier_weights(model: TrainedModel) -> LinearClassifierWeights:
    head = model.net.head
    return LinearClassifierWeights(
        weight_matrix=head.weight.detach().numpy().copy(),
        bias=head.bias.detach().numpy().copy(),
    )


def evaluate_accuracy(model: TrainedModel, ds: LabeledImageDataset) -> float:
    if len(ds) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    logits = predict_logits(model, ds.images)
    return float(np.mean(np.argmax(logits, axis=1) == ds.labels))


def torch_feature_fn(model: TrainedModel):
    """Differentiable torch-batch -> torch-features callable (eval mode)."""
    model.net.eval()
    return model.net.features


def numpy_feature_fn(model: TrainedModel):
    """Numpy-batch -> numpy-features callable for verification."""
    return lambda batch: features(model, batch)


# --- model checkpoint container --------------------------------------------

_DTYPE_CODES = {np.dtype("float32"): 0, np.dtype("int64"): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<i8")}


def save_model(model: TrainedModel, path) -> None:
    out = io.BytesIO()
    out.write(MODEL_MAGIC)
    out.write(struct.pack("<I", MODEL_SCHEMA_VERSION))
    meta = {
        "architecture": model.architecture,
        "class_count": model.class_count,
        "feature_dim": model.feature_dim,
        "image_shape": list(model.image_shape),
        "training_manifest": model.training_manifest,
        "weights_digest": model.weights_digest,
    }
    payload = json.dumps(meta, sort_keys=True).encode()
    out.write(struct.pack("<Q", len(payload)))
    out.write(payload)
    state = model.net.state_dict()
    out.write(struct.pack("<I", len(state)))
    for name in sorted(state):
        arr = state[name].detach().cpu().contiguous().numpy()
        code = _DTYPE_CODES.get(arr.dtype)
        if code is None:
            raise ValueError(f"unsupported tensor dtype {arr.dtype} for {name}")
        encoded = name.encode()
        out.write(struct.pack("<H", len(encoded)))
        out.write(encoded)
        out.write(struct.pack("<BB", code, arr.ndim))
        out.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
    Path(path).write_bytes(out.getvalue())


def load_model(path) -> TrainedModel:
    data = Path(path).read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise CorruptArtifactError("model container truncated")
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    if take(4) != MODEL_MAGIC:
        raise CorruptArtifactError("not a model container (bad magic)")
    (version,) = struct.unpack("<I", take(4))
    if version != MODEL_SCHEMA_VERSION:
        raise UnsupportedSchemaError(
            f"model schema version {version} not supported (expected {MODEL_SCHEMA_VERSION})"
        )
    (meta_len,) = struct.unpack("<Q", take(8))
    meta = json.loads(take(meta_len).decode())
    net = build_architecture(
        meta["architecture"], meta["class_count"], tuple(meta["image_shape"])
    )
    (n_entries,) = struct.unpack("<I", take(4))
    state = {}
    for _ in range(n_entries):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode()
        code, ndim = struct.unpack("<BB", take(2))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        dtype = _CODE_DTYPES[code]
        count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        arr = np.frombuffer(take(count * dtype.itemsize), dtype=dtype).reshape(shape)
        state[name] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="), copy=True))
    net.load_state_dict(state)
    net.eval()
    model = TrainedModel(
        architecture=meta["architecture"],
        net=net,
        class_count=meta["class_count"],
        feature_dim=meta["feature_dim"],
        image_shape=tuple(meta["image_shape"]),
        training_manifest=meta["training_manifest"],
    )
    if model.weights_digest != meta["weights_digest"]:
        raise CorruptArtifactError(
            "model weights digest mismatch: container is damaged or was edited"
        )
    return model
