"""Compute-profile selection and deterministic seeding helpers.

Two profiles exist. ``deterministic`` (the default) pins every random
source and asks torch for deterministic kernels, so retraining from a
manifest reproduces weight digests bit for bit. ``fast`` skips the
deterministic-kernel request for full-scale runs.

Environment:
    FEATUREMARK_PROFILE  "deterministic" (default) or "fast"
    FEATUREMARK_CACHE    directory for checkpoints/artifacts (default ~/.cache/featuremark)
"""

from __future__ import annotations

import os
from pathlib import Path

import torch

PROFILE_ENV = "FEATUREMARK_PROFILE"
CACHE_ENV = "FEATUREMARK_CACHE"

_VALID_PROFILES = ("deterministic", "fast")


def get_profile() -> str:
    profile = os.environ.get(PROFILE_ENV, "deterministic").strip().lower()
    if profile not in _VALID_PROFILES:
        raise ValueError(
            f"{PROFILE_ENV} must be one of {_VALID_PROFILES}, got {profile!r}"
        )
    return profile


def cache_dir() -> Path:
    root = os.environ.get(CACHE_ENV)
    if root:
        return Path(root)
    return Path.home() / ".cache" / "featuremark"


def seed_torch(seed: int) -> None:
    """Seed torch and select deterministic kernels under the default profile."""
    torch.manual_seed(seed)
    if get_profile() == "deterministic":
        torch.use_deterministic_algorithms(True)
    else:
        torch.use_deterministic_algorithms(False)
