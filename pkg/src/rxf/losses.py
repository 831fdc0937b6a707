"""Contrastive training objectives over a batch similarity matrix.

The default objective scores three pair populations differently: matched
pairs are pulled toward similarity 1, pairs affirmed by the labeler are only
required to clear a margin alpha, and everything else is pushed down to 0.
The InfoNCE objective and the ablation variants share the same BatchPairing
input so they can be swapped freely in training runs.

Loss arithmetic runs in float64 regardless of the similarity dtype; each
term is also reported as a plain float for logging.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .autograd import Tensor

VARIANTS = ("reco_relaxed_negatives", "unlabeled_as_positive", "soft_alpha")
LOSS_KINDS = ("drc", "infonce") + VARIANTS

SOFT_ALPHA = 0.999999  # margin for the soft_alpha ablation: relaxation in form only


@dataclass(frozen=True)
class DrcConfig:
    alpha: float = 0.7  # relaxed-positive margin
    gamma: float = 1.0  # weight of the relaxed-positive term
    lam: float = 1.0  # weight of the negative term

    def __post_init__(self):
        if not (0.0 < self.alpha <= 1.0):
            raise ValueError(f"alpha must be in (0, 1], got {self.alpha}")
        if self.gamma < 0.0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if self.lam < 0.0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")


@dataclass
class BatchPairing:
    """Square similarity matrix sim[i][j] = sim(text_i, image_of_j) plus the
    within-batch mask of labeler-affirmed (unlabeled-positive) pairs."""

    sim: Tensor
    s_mask: np.ndarray

    def __post_init__(self):
        if self.sim.ndim != 2 or self.sim.shape[0] != self.sim.shape[1]:
            raise ValueError(f"similarity matrix must be square, got shape {self.sim.shape}")
        if self.s_mask.shape != self.sim.shape or self.s_mask.dtype != np.bool_:
            raise ValueError(
                f"s_mask must be bool with shape {self.sim.shape}, got {self.s_mask.dtype} {self.s_mask.shape}"
            )
        if np.any(np.diag(self.s_mask)):
            raise ValueError("s_mask diagonal must be false: matched pairs are not unlabeled positives")
        lo, hi = float(self.sim.data.min()), float(self.sim.data.max())
        if lo < -1.0 or hi > 1.0:
            raise ValueError(f"similarities must lie in [-1, 1], got range [{lo}, {hi}]")

    @property
    def n(self) -> int:
        return self.sim.shape[0]


@dataclass
class LossValue:
    total: Tensor  # scalar, differentiable
    parts: Mapping[str, float] = field(default_factory=dict)


def _masks(batch: BatchPairing) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    eye = np.eye(batch.n, dtype=np.float64)
    s = batch.s_mask.astype(np.float64)
    neg = (~batch.s_mask).astype(np.float64) - eye
    return eye, s, neg


def drc_loss(batch: BatchPairing, config: DrcConfig = DrcConfig()) -> LossValue:
    """Pull matched pairs to 1, require affirmed pairs to clear the alpha
    margin, push the remaining off-diagonal pairs down to 0."""
    eye, s_m, neg_m = _masks(batch)
    s = batch.sim.astype(np.float64)
    pull = (((1.0 - s) ** 2) * Tensor(eye)).sum()
    relax = (((config.alpha - s).relu() ** 2) * Tensor(s_m)).sum()
    push = ((s.relu() ** 2) * Tensor(neg_m)).sum()
    total = pull + config.gamma * relax + config.lam * push
    return LossValue(
        total=total,
        parts={
            "positive": pull.item(),
            "unlabeled": relax.item(),
            "negative": push.item(),
            "total": total.item(),
        },
    )


def infonce_loss(batch: BatchPairing, temperature: float = 0.1) -> LossValue:
    """Per-row cross entropy against the matched image; ignores the affirmed-pair mask."""
    if temperature <= 0.0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    z = batch.sim.astype(np.float64) * (1.0 / temperature)
    lse = z.logsumexp(axis=1)
    diag = (z * Tensor(np.eye(batch.n, dtype=np.float64))).sum(axis=1)
    total = (lse - diag).sum()
    return LossValue(total=total, parts={"total": total.item()})


def variant_loss(batch: BatchPairing, variant: str, config: DrcConfig = DrcConfig()) -> LossValue:
    """Ablation objectives.

    reco_relaxed_negatives: affirmed pairs are simply removed, negatives
    keep their push term, no margin pull on affirmed pairs.
    unlabeled_as_positive: affirmed pairs are scored like matched ones.
    soft_alpha: the margin is raised to nearly 1, so affirmed pairs are
    pulled almost as hard as matched ones.
    """
    if variant == "reco_relaxed_negatives":
        return drc_loss(batch, DrcConfig(alpha=config.alpha, gamma=0.0, lam=config.lam))
    if variant == "unlabeled_as_positive":
        eye, s_m, neg_m = _masks(batch)
        s = batch.sim.astype(np.float64)
        pull = (((1.0 - s) ** 2) * Tensor(eye)).sum()
        relax = (((1.0 - s) ** 2) * Tensor(s_m)).sum()
        push = ((s.relu() ** 2) * Tensor(neg_m)).sum()
        total = pull + config.gamma * relax + config.lam * push
        return LossValue(
            total=total,
            parts={
                "positive": pull.item(),
                "unlabeled": relax.item(),
                "negative": push.item(),
                "total": total.item(),
            },
        )
    if variant == "soft_alpha":
        return drc_loss(batch, DrcConfig(alpha=SOFT_ALPHA, gamma=config.gamma, lam=config.lam))
    raise ValueError(f"unknown loss variant '{variant}'; expected one of {VARIANTS}")


def compute_loss(
    batch: BatchPairing,
    kind: str,
    config: DrcConfig = DrcConfig(),
    temperature: float = 0.1,
) -> LossValue:
    """Dispatch by loss kind; the single entry point used by training runs."""
    if kind == "drc":
        return drc_loss(batch, config)
    if kind == "infonce":
        return infonce_loss(batch, temperature)
    if kind in VARIANTS:
        return variant_loss(batch, kind, config)
    raise ValueError(f"unknown loss kind '{kind}'; expected one of {LOSS_KINDS}")
