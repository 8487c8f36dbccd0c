"""Ownership verification of suspect models.

White-box: align marker and suspect feature spaces with least squares over
a probe set, map each class carrier through the alignment, and test the
cosine against the suspect's classifier row under the sphere-cosine null.
The probe can be held-out test data or the marked samples themselves; the
marked probe is the recommended default because it concentrates the
alignment on the watermarked region and lowers the p-value.

Black-box: query the suspect on clean/marked pairs and compare cross-entropy
losses; a positive mean difference means the model fits the marked versions
better, i.e. it was trained on them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .datasets import LabeledImageDataset
from .errors import AlignmentSingularError, QueryError
from .models import LinearClassifierWeights, TrainedModel, classifier_weights, numpy_feature_fn
from .secret import WatermarkSecret, secret_digest
from .stats import HypothesisTestResult, combine_log10_pvalues, log10_cosine_pvalue

PROBE_SOURCES = ("test_set", "marked_set")

_PROB_FLOOR = 1e-12
_ROW_SUM_TOL = 1e-4


@dataclass
class WhiteBoxSuspect:
    """Full access to a suspect: feature extractor plus linear classifier."""

    feature_fn: object  # numpy batch (N,C,H,W) -> (N, feature_dim)
    classifier: LinearClassifierWeights
    feature_dim: int
    digest: str = ""

    def __post_init__(self):
        if self.classifier.weight_matrix.shape[1] != self.feature_dim:
            raise ValueError(
                f"classifier expects dim {self.classifier.weight_matrix.shape[1]}, "
                f"suspect claims {self.feature_dim}"
            )

    @property
    def class_count(self) -> int:
        return self.classifier.weight_matrix.shape[0]

    @classmethod
    def from_model(cls, model: TrainedModel) -> "WhiteBoxSuspect":
        return cls(
            feature_fn=numpy_feature_fn(model),
            classifier=classifier_weights(model),
            feature_dim=model.feature_dim,
            digest=model.weights_digest,
        )


@dataclass
class BlackBoxSuspect:
    """Prediction-interface access only: batches in, probability rows out."""

    query: object  # numpy batch (N,C,H,W) -> (N, class_count) rows summing to 1
    class_count: int
    digest: str = ""

    @classmethod
    def from_model(cls, model: TrainedModel) -> "BlackBoxSuspect":
        from .models import predict_probabilities

        return cls(
            query=lambda batch: predict_probabilities(model, batch),
            class_count=model.class_count,
            digest=model.weights_digest,
        )


@dataclass(frozen=True)
class AlignmentMap:
    """Least-squares map from marker feature space into suspect feature space."""

    matrix: np.ndarray  # (d_suspect, d_marker)
    residual_rms: float
    probe_count: int
    ridge: float | None = None  # epsilon actually applied, None for plain OLS

    def __post_init__(self):
        if self.ridge is None and self.probe_count < self.matrix.shape[1]:
            raise ValueError(
                "full-rank alignment requires probe_count >= marker feature dim"
            )


@dataclass(frozen=True)
class VerificationVerdict:
    method: str  # whitebox_test_probe | whitebox_marked_probe | blackbox
    statistic: float  # log10 p for white-box, mean loss difference for black-box
    threshold: float
    decision: bool
    detail: object
    samples_used: int
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        expected = (
            self.statistic > self.threshold
            if self.method == "blackbox"
            else self.statistic <= self.threshold
        )
        if self.decision != expected:
            raise ValueError("decision is inconsistent with statistic and threshold")

    def to_json_dict(self) -> dict:
        detail = self.detail
        if isinstance(detail, HypothesisTestResult):
            detail = {
                "per_class_cosines": list(detail.per_class_cosines),
                "per_class_log10p": list(detail.per_class_log10p),
                "combined_log10p": detail.combined_log10p,
                "effective_dim": detail.effective_dim,
            }
        return {
            "method": self.method,
            "statistic": self.statistic,
            "threshold": self.threshold,
            "decision": self.decision,
            "samples_used": self.samples_used,
            "detail": detail,
            "metadata": self.metadata,
        }


def decide(method: str, statistic: float, threshold: float) -> bool:
    """Decision layer: reject-H0 for white-box, positive-gap for black-box."""
    if method == "blackbox":
        return statistic > threshold
    if method in ("whitebox_test_probe", "whitebox_marked_probe"):
        return statistic <= threshold
    raise ValueError(f"unknown method {method!r}")


def align_features(
    suspect_fn, marker_fn, probe: np.ndarray, ridge: float | None = 1e-6
) -> AlignmentMap:
    """Fit M minimizing sum ||phi_s(x) - M phi_m(x)||^2 over the probe.

    Plain least squares when the marker feature matrix has full column rank;
    otherwise a ridge of `ridge` is applied, or AlignmentSingularError is
    raised when ridge is None.
    """
    probe = np.asarray(probe)
    if len(probe) == 0:
        raise ValueError("probe must contain at least one image")
    a = np.asarray(marker_fn(probe), dtype=np.float64)
    b = np.asarray(suspect_fn(probe), dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or len(a) != len(b):
        raise ValueError("feature functions must return one row per probe image")
    d_m = a.shape[1]
    mt, _, rank, _ = np.linalg.lstsq(a, b, rcond=None)
    ridge_used = None
    if rank < d_m:
        if ridge is None:
            raise AlignmentSingularError(
                f"marker features are rank {rank} < {d_m} on a {len(a)}-image probe "
                "and ridge fallback is disabled"
            )
        gram = a.T @ a + ridge * np.eye(d_m)
        mt = np.linalg.solve(gram, a.T @ b)
        ridge_used = ridge
    residual = a @ mt - b
    rms = float(np.sqrt(np.mean(residual**2)))
    return AlignmentMap(
        matrix=np.ascontiguousarray(mt.T), residual_rms=rms, probe_count=len(a),
        ridge=ridge_used,
    )


def marked_images_for_secret(
    marked_ds: LabeledImageDataset, secret: WatermarkSecret
) -> np.ndarray:
    """Gather the marked versions of the secret's pairs from the marked dataset."""
    pairs = secret.pairs()
    for cls, idx in pairs:
        if not (0 <= idx < len(marked_ds)):
            raise ValueError(f"secret pair index {idx} outside dataset")
        if int(marked_ds.labels[idx]) != cls:
            raise ValueError(
                f"dataset labels index {idx} as {int(marked_ds.labels[idx])}, "
                f"secret says {cls}"
            )
    return marked_ds.images[np.array([i for _, i in pairs])]


def whitebox_verify(
    suspect: WhiteBoxSuspect,
    secret: WatermarkSecret,
    marker_fn,
    probe_source: str,
    probe_data: np.ndarray,
    alpha: float = 0.05,
    *,
    ridge: float | None = 1e-6,
    effective_dim: int | None = None,
    center_weights: bool = False,
) -> VerificationVerdict:
    """Hypothesis test on carrier/classifier-row cosines after alignment.

    Rejecting the null (classifier trained on clean data) at level alpha
    means deciding the suspect was trained on the watermarked dataset.
    """
    if probe_source not in PROBE_SOURCES:
        raise ValueError(f"probe_source must be one of {PROBE_SOURCES}")
    if not (0.0 < alpha < 1.0):
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    if suspect.class_count != secret.carriers.class_count:
        raise ValueError(
            f"suspect has {suspect.class_count} classes, secret carriers have "
            f"{secret.carriers.class_count}"
        )
    alignment = align_features(suspect.feature_fn, marker_fn, probe_data, ridge=ridge)
    mapped = secret.carriers.vectors.astype(np.float64) @ alignment.matrix.T
    weights = suspect.classifier.weight_matrix.astype(np.float64)
    if center_weights:
        weights = weights - weights.mean(axis=0, keepdims=True)
    dim = suspect.feature_dim if effective_dim is None else effective_dim
    norms = np.linalg.norm(mapped, axis=1) * np.linalg.norm(weights, axis=1)
    cosines = np.clip((mapped * weights).sum(axis=1) / norms, -1.0, 1.0)
    per_class_log10p = tuple(log10_cosine_pvalue(float(c), dim) for c in cosines)
    combined = combine_log10_pvalues(per_class_log10p)
    detail = HypothesisTestResult(
        per_class_cosines=tuple(float(c) for c in cosines),
        per_class_log10p=per_class_log10p,
        combined_log10p=combined,
        effective_dim=dim,
    )
    method = "whitebox_marked_probe" if probe_source == "marked_set" else "whitebox_test_probe"
    threshold = math.log10(alpha)
    return VerificationVerdict(
        method=method,
        statistic=combined,
        threshold=threshold,
        decision=decide(method, combined, threshold),
        detail=detail,
        samples_used=alignment.probe_count,
        metadata={
            "alpha": alpha,
            "probe_source": probe_source,
            "alignment_residual_rms": alignment.residual_rms,
            "alignment_ridge": alignment.ridge,
            "effective_dim": dim,
            "center_weights": center_weights,
            "suspect_digest": suspect.digest,
            "secret_digest": secret_digest(secret),
        },
    )


def _query_losses(
    suspect: BlackBoxSuspect, images: np.ndarray, labels: np.ndarray
) -> np.ndarray:
    try:
        rows = np.asarray(suspect.query(images), dtype=np.float64)
    except QueryError:
        raise
    except Exception as exc:
        raise QueryError(f"suspect query failed: {exc}") from exc
    if rows.shape != (len(images), suspect.class_count):
        raise QueryError(
            f"suspect returned shape {rows.shape}, expected "
            f"({len(images)}, {suspect.class_count})"
        )
    sums = rows.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > _ROW_SUM_TOL):
        bad = int(np.argmax(np.abs(sums - 1.0)))
        raise QueryError(
            f"probability row {bad} sums to {sums[bad]:.6f}, violating the "
            "sum-to-1 invariant"
        )
    picked = np.clip(rows[np.arange(len(labels)), labels], _PROB_FLOOR, None)
    return -np.log(picked)


def _pair_order(n_pairs: int, order_seed: int) -> np.ndarray:
    return np.random.default_rng(order_seed).permutation(n_pairs)


def blackbox_verify(
    suspect: BlackBoxSuspect,
    secret: WatermarkSecret,
    marked_images: np.ndarray,
    sample_budget: int | None = None,
    order_seed: int = 0,
) -> VerificationVerdict:
    """Mean cross-entropy gap between clean and marked queries (Eq-style test).

    `marked_images` are the distributed marked versions of the secret's
    pairs, aligned with secret.pairs(); the clean versions and true labels
    come from the secret itself. Only the first `sample_budget` pairs (in a
    deterministic shuffled order under order_seed) are ever queried. Ties at
    exactly zero decide False, never accusing on no evidence.
    """
    pairs = secret.pairs()
    if not pairs:
        raise ValueError("secret contains no marked/clean pairs")
    marked_images = np.asarray(marked_images)
    if len(marked_images) != len(pairs):
        raise ValueError(
            f"need one marked image per secret pair: got {len(marked_images)}, "
            f"expected {len(pairs)}"
        )
    if suspect.class_count != secret.carriers.class_count:
        raise ValueError(
            f"suspect has {suspect.class_count} classes, secret carriers have "
            f"{secret.carriers.class_count}"
        )
    budget = len(pairs) if sample_budget is None else int(sample_budget)
    if not (1 <= budget <= len(pairs)):
        raise ValueError(f"sample_budget must lie in [1, {len(pairs)}], got {budget}")
    order = _pair_order(len(pairs), order_seed)[:budget]
    clean = secret.originals_for_pairs()[order]
    marked = marked_images[order]
    labels = secret.labels_for_pairs()[order]
    loss_clean = _query_losses(suspect, clean, labels)
    loss_marked = _query_losses(suspect, marked, labels)
    diffs = loss_clean - loss_marked
    statistic = float(np.sum(diffs) / budget)
    used_pairs = [pairs[i] for i in order]
    detail = {
        "pairs": [[int(c), int(i)] for c, i in used_pairs],
        "loss_clean": [float(v) for v in loss_clean],
        "loss_marked": [float(v) for v in loss_marked],
    }
    return VerificationVerdict(
        method="blackbox",
        statistic=statistic,
        threshold=0.0,
        decision=decide("blackbox", statistic, 0.0),
        detail=detail,
        samples_used=budget,
        metadata={
            "order_seed": order_seed,
            "suspect_digest": suspect.digest,
            "secret_digest": secret_digest(secret),
        },
    )


def blackbox_sample_sweep(
    suspect: BlackBoxSuspect,
    secret: WatermarkSecret,
    marked_images: np.ndarray,
    budgets,
    order_seed: int = 0,
) -> list[tuple[int, float, bool]]:
    """One blackbox_verify per budget over the same fixed pair ordering."""
    budgets = [int(b) for b in budgets]
    if budgets != sorted(budgets):
        raise ValueError("budgets must be sorted ascending")
    n_pairs = secret.selection.total_marked
    if budgets and budgets[-1] > n_pairs:
        raise ValueError(f"largest budget {budgets[-1]} exceeds pair count {n_pairs}")
    out = []
    for budget in budgets:
        verdict = blackbox_verify(
            suspect, secret, marked_images, sample_budget=budget, order_seed=order_seed
        )
        out.append((budget, verdict.statistic, verdict.decision))
    return out


def smallest_sufficient_budget(sweep: list[tuple[int, float, bool]]) -> int | None:
    """Smallest budget in a sweep whose decision is True, if any."""
    for budget, _, dec in sweep:
        if dec:
            return budget
    return None
