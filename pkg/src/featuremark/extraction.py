"""Knockoff-style model extraction against a watermarked victim.

The attacker queries the victim's prediction interface with task-unrelated
images, then distills a surrogate by minimizing the KL divergence from the
victim's probability rows (or cross-entropy on top-1 pseudo-labels). The
survival report runs both ownership tests on victim and surrogate side by
side, with the accuracy gap the paper's failure regime keys on.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch.nn import functional as F

from .datasets import LabeledImageDataset
from .determinism import get_profile, seed_torch
from .errors import QueryError
from .models import (
    TrainedModel,
    TrainingConfig,
    build_architecture,
    evaluate_accuracy,
    normalization_stats,
    numpy_feature_fn,
    predict_logits,
    sgd_fit,
)
from .secret import WatermarkSecret
from .verify import (
    BlackBoxSuspect,
    VerificationVerdict,
    WhiteBoxSuspect,
    blackbox_verify,
    whitebox_verify,
)

_QUERY_BATCH = 256
_ROW_SUM_TOL = 1e-4

SURROGATE_DEFAULTS = TrainingConfig(
    epochs=100, lr=0.01, lr_decay_epochs=(60,), lr_decay_factor=0.1
)


@dataclass(frozen=True)
class TransferSet:
    """Queries plus the victim's verbatim responses; immutable once built."""

    queries: np.ndarray  # (N, C, H, W)
    responses: np.ndarray  # (N, class_count) probability rows
    victim_digest: str = ""

    def __post_init__(self):
        q = np.asarray(self.queries, dtype=np.float32)
        r = np.asarray(self.responses, dtype=np.float32)
        if len(q) != len(r):
            raise ValueError(f"{len(q)} queries but {len(r)} responses")
        if r.ndim != 2:
            raise ValueError("responses must be (N, class_count)")
        sums = r.sum(axis=1)
        if len(r) and np.any(np.abs(sums - 1.0) > _ROW_SUM_TOL):
            bad = int(np.argmax(np.abs(sums - 1.0)))
            raise ValueError(f"response row {bad} sums to {sums[bad]:.6f}")
        q.setflags(write=False)
        r.setflags(write=False)
        object.__setattr__(self, "queries", q)
        object.__setattr__(self, "responses", r)

    def __len__(self) -> int:
        return len(self.queries)


def build_transfer_set(
    victim: BlackBoxSuspect,
    pool: np.ndarray,
    budget: int,
    seed: int,
    checkpoint_path=None,
) -> TransferSet:
    """Query the victim once per sampled pool image; responses stored verbatim.

    A query failure aborts with the completed portion attached to the error
    (and written to checkpoint_path when given).
    """
    pool = np.asarray(pool, dtype=np.float32)
    if not (1 <= budget <= len(pool)):
        raise ValueError(f"budget must lie in [1, {len(pool)}], got {budget}")
    chosen = np.random.default_rng(seed).permutation(len(pool))[:budget]
    queries = pool[chosen]
    responses = []
    for start in range(0, budget, _QUERY_BATCH):
        batch = queries[start : start + _QUERY_BATCH]
        try:
            rows = np.asarray(victim.query(batch), dtype=np.float32)
            if rows.shape != (len(batch), victim.class_count):
                raise ValueError(f"victim returned shape {rows.shape}")
        except Exception as exc:
            partial = TransferSet(
                queries=queries[:start],
                responses=np.concatenate(responses) if responses else
                np.zeros((0, victim.class_count), dtype=np.float32),
                victim_digest=victim.digest,
            )
            if checkpoint_path is not None:
                save_transfer_set(partial, checkpoint_path)
            raise QueryError(
                f"victim query failed after {start} of {budget} queries: {exc}",
                partial=partial,
            ) from exc
        responses.append(rows)
    return TransferSet(
        queries=queries, responses=np.concatenate(responses), victim_digest=victim.digest
    )


def save_transfer_set(transfer: TransferSet, path) -> None:
    np.savez_compressed(
        path,
        queries=transfer.queries,
        responses=transfer.responses,
        victim_digest=np.array(transfer.victim_digest),
    )


def load_transfer_set(path) -> TransferSet:
    data = np.load(path, allow_pickle=False)
    return TransferSet(
        queries=data["queries"],
        responses=data["responses"],
        victim_digest=str(data["victim_digest"]),
    )


def train_surrogate(
    transfer: TransferSet,
    architecture: str,
    config: TrainingConfig | None = None,
    loss_mode: str = "kl",
) -> TrainedModel:
    """Distill a surrogate from the transfer set; never re-queries the victim.

    loss_mode "kl" matches full probability rows; "top1" trains on the most
    confident label only.
    """
    if len(transfer) == 0:
        raise ValueError("transfer set is empty")
    if loss_mode not in ("kl", "top1"):
        raise ValueError(f"loss_mode must be 'kl' or 'top1', got {loss_mode!r}")
    if config is None:
        config = SURROGATE_DEFAULTS
    class_count = transfer.responses.shape[1]
    image_shape = tuple(transfer.queries.shape[1:])
    seed_torch(config.seed)
    net = build_architecture(architecture, class_count, image_shape)
    mean, std = normalization_stats(transfer.queries)
    net.set_normalization(mean, std)
    manifest = {
        "architecture": architecture,
        "objective": f"distillation_{loss_mode}",
        "victim_digest": transfer.victim_digest,
        "n_transfer": len(transfer),
        "class_count": class_count,
        "image_shape": list(image_shape),
        "config": config.to_dict(),
        "profile": get_profile(),
        "torch_version": torch.__version__,
    }
    if loss_mode == "kl":
        targets = transfer.responses.astype(np.float32)

        def loss_fn(logits, rows):
            return F.kl_div(F.log_softmax(logits, dim=1), rows, reduction="batchmean")

    else:
        targets = transfer.responses.argmax(axis=1).astype(np.int64)
        loss_fn = F.cross_entropy
    sgd_fit(net, transfer.queries, targets, loss_fn, config, manifest)
    return TrainedModel(
        architecture=architecture,
        net=net,
        class_count=class_count,
        feature_dim=net.head.in_features,
        image_shape=image_shape,
        training_manifest=manifest,
    )


def mean_kl_to_victim(
    surrogate: TrainedModel, victim: BlackBoxSuspect, queries: np.ndarray
) -> float:
    """Mean KL(victim rows || surrogate rows) on held-out queries."""
    v = np.clip(np.asarray(victim.query(queries), dtype=np.float64), 1e-12, None)
    logits = torch.from_numpy(predict_logits(surrogate, queries)).double()
    log_s = F.log_softmax(logits, dim=1).numpy()
    return float(np.mean(np.sum(v * (np.log(v) - log_s), axis=1)))


def top1_agreement(
    surrogate: TrainedModel, victim: BlackBoxSuspect, queries: np.ndarray
) -> float:
    """Fraction of held-out queries where surrogate and victim agree on top-1."""
    v = np.argmax(np.asarray(victim.query(queries)), axis=1)
    s = np.argmax(predict_logits(surrogate, queries), axis=1)
    return float(np.mean(v == s))


@dataclass(frozen=True)
class ExtractionReport:
    victim_verdicts: dict[str, VerificationVerdict]
    surrogate_verdicts: dict[str, VerificationVerdict]
    victim_accuracy: float
    surrogate_accuracy: float
    accuracy_gap_pp: float
    agreement: float | None = None
    failure_regime: bool = False  # low-agreement surrogate, gap is the suspect cause

    def to_json_dict(self) -> dict:
        return {
            "victim_verdicts": {k: v.to_json_dict() for k, v in self.victim_verdicts.items()},
            "surrogate_verdicts": {
                k: v.to_json_dict() for k, v in self.surrogate_verdicts.items()
            },
            "victim_accuracy": self.victim_accuracy,
            "surrogate_accuracy": self.surrogate_accuracy,
            "accuracy_gap_pp": self.accuracy_gap_pp,
            "agreement": self.agreement,
            "failure_regime": self.failure_regime,
        }


AGREEMENT_FLOOR = 0.7


def extraction_survival_report(
    victim: TrainedModel,
    secret: WatermarkSecret,
    surrogate: TrainedModel,
    *,
    marker_fn,
    marked_images: np.ndarray,
    test_ds: LabeledImageDataset,
    alpha: float = 0.05,
    agreement_queries: np.ndarray | None = None,
) -> ExtractionReport:
    """Both ownership tests on victim and surrogate, plus the accuracy gap."""
    if victim.class_count != surrogate.class_count:
        raise ValueError("victim and surrogate class counts differ")
    if victim.class_count != secret.carriers.class_count:
        raise ValueError("secret carriers do not match the models' class count")

    def both(model: TrainedModel) -> dict[str, VerificationVerdict]:
        return {
            "whitebox_marked_probe": whitebox_verify(
                WhiteBoxSuspect.from_model(model), secret, marker_fn,
                "marked_set", marked_images, alpha=alpha,
            ),
            "blackbox": blackbox_verify(
                BlackBoxSuspect.from_model(model), secret, marked_images
            ),
        }

    acc_victim = evaluate_accuracy(victim, test_ds)
    acc_surrogate = evaluate_accuracy(surrogate, test_ds)
    agreement = None
    if agreement_queries is not None:
        agreement = top1_agreement(
            surrogate, BlackBoxSuspect.from_model(victim), agreement_queries
        )
    return ExtractionReport(
        victim_verdicts=both(victim),
        surrogate_verdicts=both(surrogate),
        victim_accuracy=acc_victim,
        surrogate_accuracy=acc_surrogate,
        accuracy_gap_pp=(acc_victim - acc_surrogate) * 100.0,
        agreement=agreement,
        failure_regime=(agreement is not None and agreement < AGREEMENT_FLOOR),
    )
