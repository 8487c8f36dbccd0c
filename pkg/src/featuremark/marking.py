"""Watermark embedding: push image features along secret class carriers.

Each selected image is optimized by plain gradient descent on

    L(xt) = -(phi(xt) - phi(x))^T u_c
            + lambda_pixel * ||xt - x||_2
            + lambda_feature * ||phi(xt) - phi(x)||_2

starting from xt = x, clipping to [0, 1] (and an optional L-inf ball around
x) after every step, with an optional final snap to the 8-bit grid. The
feature function must be a differentiable torch callable in inference mode.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .datasets import LabeledImageDataset, MarkingSelection
from .errors import EmbeddingError
from .secret import EmbedParams, WatermarkSecret
from .stats import CarrierSet

_EMBED_BATCH = 64
_NORM_EPS = 1e-24


@dataclass(frozen=True)
class StealthReport:
    """Distortion metrics between clean and marked samples (peak value 1.0).

    Aggregates: psnr_db is the mean of the finite per-sample PSNRs (+inf only
    when every sample is unchanged), l2_pixel the mean L2, linf_pixel the max
    L-inf, so a configured budget can be checked against the worst sample.
    """

    psnr_db: float
    l2_pixel: float
    linf_pixel: float
    per_sample: tuple[tuple[float, float, float], ...]


def _safe_l2(v: torch.Tensor, dims) -> torch.Tensor:
    return torch.sqrt(torch.sum(v * v, dim=dims) + _NORM_EPS)


def embedding_objective(
    xt: torch.Tensor,
    x0: torch.Tensor,
    f0: torch.Tensor,
    u: torch.Tensor,
    feature_fn,
    params: EmbedParams,
    augment=None,
) -> torch.Tensor:
    """Per-sample embedding loss for a batch; differentiable in xt."""
    view = augment(xt) if augment is not None else xt
    f = feature_fn(view)
    if f.shape[1] != u.shape[1]:
        raise EmbeddingError(
            f"feature function returned dim {f.shape[1]}, carriers have {u.shape[1]}"
        )
    delta_f = f - f0
    carrier_term = -torch.sum(delta_f * u, dim=1)
    pixel_term = _safe_l2(xt - x0, dims=(1, 2, 3))
    feature_term = _safe_l2(delta_f, dims=(1,))
    return carrier_term + params.lambda_pixel * pixel_term + params.lambda_feature * feature_term


def embed_batch(
    images: np.ndarray,
    class_ids: np.ndarray,
    carriers: CarrierSet,
    marker_features,
    params: EmbedParams,
    augment=None,
) -> np.ndarray:
    """Embed a batch of images (independent per-sample objectives)."""
    images = np.asarray(images)
    if images.min() < 0.0 or images.max() > 1.0:
        raise ValueError("images must lie in [0, 1]")
    class_ids = np.asarray(class_ids, dtype=np.int64)
    if np.any(class_ids < 0) or np.any(class_ids >= carriers.class_count):
        raise ValueError("class id outside carrier range")
    x0 = torch.as_tensor(images)
    u = torch.as_tensor(carriers.vectors[class_ids]).to(x0.dtype)
    with torch.no_grad():
        f0 = marker_features(x0)
    if f0.shape[1] != carriers.feature_dim:
        raise EmbeddingError(
            f"feature function returned dim {f0.shape[1]}, carriers have "
            f"{carriers.feature_dim}"
        )
    f0 = f0.detach()
    xt = x0.clone()
    for step in range(params.steps):
        xt = xt.detach().requires_grad_(True)
        loss = embedding_objective(xt, x0, f0, u, marker_features, params, augment).sum()
        (grad,) = torch.autograd.grad(loss, xt)
        if not torch.isfinite(grad).all():
            raise EmbeddingError(
                f"non-finite gradient at step {step} "
                f"(loss={float(loss.detach()):.6g}); aborting embedding"
            )
        with torch.no_grad():
            xt = xt - params.step_size * grad
            if params.linf_budget is not None:
                xt = x0 + torch.clamp(xt - x0, -params.linf_budget, params.linf_budget)
            xt = torch.clamp(xt, 0.0, 1.0)
    out = xt.detach()
    if params.quantize_8bit:
        out = torch.round(out * 255.0) / 255.0
    return out.numpy().astype(images.dtype, copy=False)


def embed_mark(
    x: np.ndarray,
    class_id: int,
    carriers: CarrierSet,
    marker_features,
    params: EmbedParams,
    augment=None,
) -> np.ndarray:
    """Embed one image; see embed_batch."""
    marked = embed_batch(
        np.asarray(x)[None], np.array([class_id]), carriers, marker_features, params,
        augment=augment,
    )
    return marked[0]


def mark_dataset(
    ds: LabeledImageDataset,
    selection: MarkingSelection,
    carriers: CarrierSet,
    marker_features,
    params: EmbedParams,
    marker_digest: str = "",
    augment=None,
) -> tuple[LabeledImageDataset, WatermarkSecret]:
    """Replace the selected samples with marked versions; labels stay true.

    Returns the marked dataset and the owner's secret holding the clean
    originals of exactly the replaced samples. Any embedding failure
    propagates before outputs are constructed.
    """
    pairs = selection.pairs()
    for cls, idx in pairs:
        if not (0 <= idx < len(ds)):
            raise ValueError(f"selection index {idx} outside dataset of {len(ds)} samples")
        if int(ds.labels[idx]) != cls:
            raise ValueError(
                f"selection maps index {idx} to class {cls} but the dataset "
                f"labels it {int(ds.labels[idx])}"
            )
    marked_images = ds.images.copy()
    originals: dict[tuple[int, int], np.ndarray] = {}
    for start in range(0, len(pairs), _EMBED_BATCH):
        chunk = pairs[start : start + _EMBED_BATCH]
        idx = np.array([i for _, i in chunk])
        cls = np.array([c for c, _ in chunk])
        marked_images[idx] = embed_batch(
            ds.images[idx], cls, carriers, marker_features, params, augment=augment
        )
        for (c, i) in chunk:
            originals[(c, i)] = ds.images[i].copy()
    marked_ds = LabeledImageDataset(
        images=marked_images,
        labels=ds.labels.copy(),
        class_names=ds.class_names,
        split=ds.split,
        dataset_id=ds.dataset_id,
    )
    secret = WatermarkSecret(
        carriers=carriers,
        selection=selection,
        clean_originals=originals,
        embed_params=params,
        marker_model_digest=marker_digest,
    )
    return marked_ds, secret


def stealth_metrics(clean, marked) -> StealthReport:
    """Per-sample and aggregate PSNR / L2 / L-inf between image sequences."""
    clean = np.asarray(clean, dtype=np.float64)
    marked = np.asarray(marked, dtype=np.float64)
    if clean.shape != marked.shape:
        raise ValueError(f"shape mismatch: clean {clean.shape} vs marked {marked.shape}")
    per_sample = []
    for c, m in zip(clean, marked):
        diff = m - c
        mse = float(np.mean(diff * diff))
        psnr = math.inf if mse == 0.0 else 10.0 * math.log10(1.0 / mse)
        per_sample.append((psnr, float(np.linalg.norm(diff)), float(np.abs(diff).max())))
    finite = [p for p, _, _ in per_sample if math.isfinite(p)]
    return StealthReport(
        psnr_db=float(np.mean(finite)) if finite else math.inf,
        l2_pixel=float(np.mean([l2 for _, l2, _ in per_sample])) if per_sample else 0.0,
        linf_pixel=float(np.max([li for _, _, li in per_sample])) if per_sample else 0.0,
        per_sample=tuple(per_sample),
    )
