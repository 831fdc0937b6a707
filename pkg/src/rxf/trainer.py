"""Training loop: shuffled query batches, contrastive loss, AdamW, and
model selection by validation recall.

Each batch pairs every query with its ground-truth image; the batch
similarity matrix crosses all text embeddings with all image embeddings, and
the within-batch mask of labeler-affirmed pairs is rebuilt per batch from
the unlabeled-positive set. The checkpoint kept as "best" maximizes
validation recall@K (K = select_k), with the earliest epoch winning ties.
"""

from __future__ import annotations

import copy
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from ._version import __version__
from .autograd import Tensor
from .checkpoint import save_checkpoint
from .datastore import Dataset, Query, UnlabeledPositiveSet
from .encoders import ImageEncoderConfig, TextEncoderConfig, encode_image_batch, encode_text_batch, init_params
from .layers import cosine_matrix
from .losses import LOSS_KINDS, BatchPairing, DrcConfig, compute_loss
from .optim import ParamSet, adamw_step, clip_grads, collect_grads
from .retrieval import evaluate

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    weight_decay: float = 0.0
    batch_size: int = 128
    epochs: int = 20
    loss: str = "drc"
    drc: DrcConfig = field(default_factory=DrcConfig)
    temperature: float = 0.1  # infonce only
    grad_clip: float | None = None
    seed: int = 0
    select_k: int = 10  # validation recall@K used to pick the best epoch
    save_every_epoch: bool = True

    def __post_init__(self):
        if self.lr < 0.0:
            raise ValueError(f"lr must be >= 0, got {self.lr}")
        if self.batch_size < 2:
            raise ValueError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.loss not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind '{self.loss}'; expected one of {LOSS_KINDS}")
        if self.temperature <= 0.0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if self.grad_clip is not None and self.grad_clip <= 0.0:
            raise ValueError(f"grad_clip must be positive, got {self.grad_clip}")
        if self.select_k < 1:
            raise ValueError(f"select_k must be >= 1, got {self.select_k}")


@dataclass
class Batch:
    indices: np.ndarray  # positions into the query list
    s_mask: np.ndarray  # bool [n, n], affirmed (query_i, gt_image_of_j) pairs


@dataclass
class RunRecord:
    """Everything needed to audit a training run, written next to the checkpoints."""

    config: dict
    epochs: list[dict]
    best_epoch: int
    best_val_recall: float
    wall_clock_s: float
    engine_version: str = __version__

    def to_json(self) -> str:
        return json.dumps(
            {
                "config": self.config,
                "epochs": self.epochs,
                "best_epoch": self.best_epoch,
                "best_val_recall": self.best_val_recall,
                "wall_clock_s": self.wall_clock_s,
                "engine_version": self.engine_version,
            },
            indent=2,
            sort_keys=True,
        )


def config_to_dict(config: TrainConfig) -> dict:
    d = asdict(config)
    d["drc"] = {"alpha": config.drc.alpha, "gamma": config.drc.gamma, "lambda": config.drc.lam}
    return d


def make_batches(
    queries: Sequence[Query],
    uset: UnlabeledPositiveSet,
    batch_size: int,
    seed: int,
    epoch: int,
) -> list[Batch]:
    """Shuffle queries for one epoch and build each batch's affirmed-pair mask.

    mask[i][j] is true when the labeler affirmed (query_i, gt image of
    query_j); the diagonal is forced false regardless of the set contents.
    """
    if batch_size < 2:
        raise ValueError(f"batch_size must be >= 2, got {batch_size}")
    rng = np.random.default_rng([seed, epoch])
    perm = rng.permutation(len(queries))
    batches = []
    for start in range(0, len(perm), batch_size):
        idx = perm[start : start + batch_size]
        n = len(idx)
        mask = np.zeros((n, n), dtype=bool)
        for a in range(n):
            qa = queries[idx[a]]
            for b in range(n):
                if a == b:
                    continue
                qb = queries[idx[b]]
                mask[a, b] = (qa.query_id, qb.gt_image_id) in uset.pairs
        batches.append(Batch(indices=idx, s_mask=mask))
    return batches


def _snapshot(pset: ParamSet) -> ParamSet:
    return ParamSet(
        params={n: Tensor(p.data.copy(), requires_grad=True) for n, p in pset.params.items()},
        m={n: a.copy() for n, a in pset.m.items()},
        v={n: a.copy() for n, a in pset.v.items()},
        step=pset.step,
        meta=copy.deepcopy(pset.meta),
    )


def train(
    train_ds: Dataset,
    val_ds: Dataset,
    uset: UnlabeledPositiveSet,
    image_config: ImageEncoderConfig,
    text_config: TextEncoderConfig,
    config: TrainConfig,
    out_dir: str | Path | None = None,
) -> tuple[ParamSet, RunRecord]:
    """Train from scratch and return (best checkpoint, run record).

    Identical datasets, unlabeled set, and config (seed included) give
    bitwise-identical parameters; wall clock is the one run-record field
    that varies between runs.
    """
    t0 = time.monotonic()
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    queries = list(train_ds.manifest.queries)
    if not queries:
        raise ValueError("training split has no queries")
    pset = init_params(image_config, text_config, dict(train_ds.manifest.stream_schema), seed=config.seed)
    text_records = [train_ds.query_record(q.query_id) for q in queries]
    image_records = [train_ds.image_record(q.gt_image_id) for q in queries]
    modes = [q.mode for q in queries]

    best: ParamSet | None = None
    best_epoch = -1
    best_recall = -1.0
    epoch_rows: list[dict] = []
    for epoch in range(1, config.epochs + 1):
        sums: dict[str, float] = {}
        n_steps = 0
        for step, batch in enumerate(make_batches(queries, uset, config.batch_size, config.seed, epoch)):
            idx = batch.indices
            try:
                h_txt = encode_text_batch(pset, [text_records[i] for i in idx], [modes[i] for i in idx])
                h_img = encode_image_batch(pset, [image_records[i] for i in idx])
                pairing = BatchPairing(sim=cosine_matrix(h_txt, h_img), s_mask=batch.s_mask)
                loss = compute_loss(pairing, config.loss, config.drc, config.temperature)
                pset.zero_grad()
                grads = collect_grads(loss.total, pset)
                if config.grad_clip is not None:
                    grads = clip_grads(grads, config.grad_clip)
                adamw_step(
                    pset,
                    grads,
                    lr=config.lr,
                    beta1=config.beta1,
                    beta2=config.beta2,
                    eps=config.eps,
                    weight_decay=config.weight_decay,
                )
            except FloatingPointError as err:
                raise FloatingPointError(f"epoch {epoch} step {step}: {err}") from err
            for name, value in loss.parts.items():
                sums[name] = sums.get(name, 0.0) + value
            n_steps += 1
            log.debug("epoch %d step %d loss %s", epoch, step, loss.parts)
        report = evaluate(pset, val_ds, (config.select_k,))
        recall = report.mean[config.select_k]
        row = {"epoch": epoch, "val_recall": recall}
        row.update({f"loss_{k}": s / n_steps for k, s in sorted(sums.items())})
        epoch_rows.append(row)
        log.info("epoch %d: val recall@%d %.4f", epoch, config.select_k, recall)
        if out_dir is not None and config.save_every_epoch:
            save_checkpoint(pset, out_dir / f"epoch_{epoch:03d}.ckpt")
        if recall > best_recall:
            best_recall = recall
            best_epoch = epoch
            best = _snapshot(pset)

    assert best is not None
    record = RunRecord(
        config={
            "train": config_to_dict(config),
            "image_encoder": asdict(image_config),
            "text_encoder": asdict(text_config),
            "train_dataset": train_ds.manifest.dataset_id,
            "val_dataset": val_ds.manifest.dataset_id,
            "unlabeled_pairs": len(uset.pairs),
            "unlabeled_provenance": uset.provenance,
        },
        epochs=epoch_rows,
        best_epoch=best_epoch,
        best_val_recall=best_recall,
        wall_clock_s=time.monotonic() - t0,
    )
    if out_dir is not None:
        save_checkpoint(best, out_dir / "best.ckpt")
        (out_dir / "run_record.json").write_text(record.to_json() + "\n")
    return best, record
