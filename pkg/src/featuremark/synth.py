"""Procedural desk-scale image tasks and transfer pools.

The toy classification task renders oriented sinusoidal gratings: class c
gets orientation pi*c/m, with per-sample jitter in orientation, frequency,
phase, per-channel gain, and pixel noise. The orientation jitter makes
neighboring classes overlap slightly, so the task keeps an irreducible
error of a few percent instead of saturating at zero loss.
"""

from __future__ import annotations

import numpy as np

from .datasets import LabeledImageDataset


def _grating(
    rng: np.random.Generator, theta: float, size: int, freq_lo: float, freq_hi: float
) -> np.ndarray:
    freq = rng.uniform(freq_lo, freq_hi)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    amp = rng.uniform(0.15, 0.35)
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    k = 2.0 * np.pi * freq / size
    wave = np.sin(k * (np.cos(theta) * xx + np.sin(theta) * yy) + phase)
    gains = rng.uniform(0.4, 1.0, size=3)
    img = 0.5 + amp * gains[:, None, None] * wave[None, :, :]
    img += rng.normal(0.0, 0.18, size=img.shape)
    return img


def _quantize(img: np.ndarray) -> np.ndarray:
    return (np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0).astype(np.float32)


def make_toy_dataset(
    class_count: int = 8,
    per_class: int = 400,
    image_size: int = 32,
    seed: int = 0,
    split: str = "train",
    dataset_id: str | None = None,
) -> LabeledImageDataset:
    """Oriented-grating classification task, quantized to the 8-bit grid."""
    rng = np.random.default_rng([seed, {"train": 0, "test": 1, "probe": 2}[split]])
    images = np.empty((class_count * per_class, 3, image_size, image_size), dtype=np.float32)
    labels = np.empty(class_count * per_class, dtype=np.int64)
    jitter_sd = 0.28 * np.pi / class_count
    i = 0
    for cls in range(class_count):
        theta = np.pi * cls / class_count
        for _ in range(per_class):
            jittered = theta + rng.normal(0.0, jitter_sd)
            images[i] = _quantize(_grating(rng, jittered, image_size, 2.5, 4.5))
            labels[i] = cls
            i += 1
    if dataset_id is None:
        dataset_id = f"toy{class_count}x{per_class}s{seed}"
    return LabeledImageDataset(
        images=images,
        labels=labels,
        class_names=tuple(f"grating_{cls}" for cls in range(class_count)),
        split=split,
        dataset_id=dataset_id,
    )


def make_transfer_pool(size: int, image_size: int = 32, seed: int = 0) -> np.ndarray:
    """Task-unrelated query pool: 1/f noise images plus off-task gratings.

    Off-task gratings sit between the toy classes' orientations and in a
    higher frequency band, mimicking natural samples near the decision
    boundaries without reusing task data.
    """
    rng = np.random.default_rng([seed, 3])
    pool = np.empty((size, 3, image_size, image_size), dtype=np.float32)
    fy = np.fft.fftfreq(image_size)[:, None]
    fx = np.fft.fftfreq(image_size)[None, :]
    radial = np.sqrt(fy * fy + fx * fx)
    radial[0, 0] = 1.0
    for i in range(size):
        if i % 2 == 0:
            spec = (rng.normal(size=(3, image_size, image_size))
                    + 1j * rng.normal(size=(3, image_size, image_size)))
            img = np.real(np.fft.ifft2(spec / radial[None, :, :]))
            lo, hi = img.min(), img.max()
            img = 0.15 + 0.7 * (img - lo) / max(hi - lo, 1e-9)
        else:
            theta = np.pi * (rng.integers(0, 8) + 0.5) / 8.0
            img = _grating(rng, theta, image_size, 5.0, 7.0)
        pool[i] = _quantize(img)
    return pool
