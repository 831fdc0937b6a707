"""Ranking and recall@K evaluation, computed per environment.

A query is only ever ranked against the images of its own environment.
The evaluation unit is one (query, mode) pair; recalls are averaged within
each environment first and the report's headline numbers are the unweighted
mean of those per-environment recalls, so small environments count as much
as large ones. Ties in similarity are broken by ascending image id.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .autograd import Tensor, no_grad
from .datastore import MODES, Dataset, Query
from .encoders import encode_image_batch, encode_text
from .layers import cosine_matrix
from .optim import ParamSet


@dataclass
class RankedList:
    query_id: str
    mode: str
    image_ids: list[str]
    scores: list[float]

    def __post_init__(self):
        if len(self.image_ids) != len(self.scores):
            raise ValueError(
                f"ranked list for '{self.query_id}' has {len(self.image_ids)} ids but {len(self.scores)} scores"
            )
        if len(set(self.image_ids)) != len(self.image_ids):
            raise ValueError(f"ranked list for '{self.query_id}' repeats an image id")
        if any(b > a for a, b in zip(self.scores, self.scores[1:])):
            raise ValueError(f"ranked list for '{self.query_id}' has increasing scores")


@dataclass
class MetricsReport:
    dataset_id: str
    split: str
    k_values: tuple[int, ...]
    mean: dict[int, float]  # unweighted mean of per-environment recalls
    per_env: dict[str, dict[int, float]]
    per_mode: dict[str, dict[int, float]]
    n_queries: int
    n_environments: int

    def to_dict(self) -> dict:
        return {
            "dataset_id": self.dataset_id,
            "split": self.split,
            "k_values": list(self.k_values),
            "mean_recall": {str(k): v for k, v in self.mean.items()},
            "per_environment": {e: {str(k): v for k, v in r.items()} for e, r in self.per_env.items()},
            "per_mode": {m: {str(k): v for k, v in r.items()} for m, r in self.per_mode.items()},
            "n_queries": self.n_queries,
            "n_environments": self.n_environments,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def recall_at_k(ranking: Sequence[str], gt_image_id: str, k: int) -> float:
    """1.0 if the ground truth appears in the first k entries, else 0.0."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if gt_image_id not in ranking:
        raise ValueError(f"ground truth '{gt_image_id}' missing from ranking")
    return 1.0 if gt_image_id in list(ranking)[:k] else 0.0


def _env_image_embeddings(pset: ParamSet, ds: Dataset, env_id: str) -> tuple[list[str], Tensor]:
    env = ds.envs_by_id[env_id]
    ids = list(env.image_ids)
    records = [ds.image_record(iid) for iid in ids]
    return ids, encode_image_batch(pset, records)


def _rank_one(pset: ParamSet, ds: Dataset, query: Query, img_ids: list[str], img_emb: Tensor) -> RankedList:
    record = ds.query_record(query.query_id)
    h_txt = encode_text(pset, record, query.mode)
    sims = cosine_matrix(h_txt.reshape(1, -1), img_emb).data[0]
    order = sorted(zip(img_ids, sims.tolist()), key=lambda t: (-t[1], t[0]))
    return RankedList(
        query_id=query.query_id,
        mode=query.mode,
        image_ids=[iid for iid, _ in order],
        scores=[s for _, s in order],
    )


def rank_images(pset: ParamSet, ds: Dataset, query_id: str) -> RankedList:
    """Rank every image of the query's environment by cosine similarity."""
    query = ds.queries_by_id.get(query_id)
    if query is None:
        raise KeyError(f"unknown query '{query_id}'")
    with no_grad():
        img_ids, img_emb = _env_image_embeddings(pset, ds, query.env_id)
        return _rank_one(pset, ds, query, img_ids, img_emb)


def aggregate_recall(
    rows: Iterable[tuple[str, str, Sequence[str], str]],
    k_values: Sequence[int],
) -> tuple[dict[int, float], dict[str, dict[int, float]], dict[str, dict[int, float]]]:
    """Fold per-query rankings into (mean, per-environment, per-mode) recalls.

    rows are (env_id, mode, ranking, gt_image_id) tuples. Per-mode recalls
    follow the same environment-first averaging as the headline mean.
    """
    ks = list(k_values)
    if not ks or any(k < 1 for k in ks) or sorted(set(ks)) != sorted(ks):
        raise ValueError(f"k values must be unique positive ints, got {k_values}")
    hits: dict[str, dict[int, list[float]]] = {}
    hits_mode: dict[str, dict[str, dict[int, list[float]]]] = {}
    for env_id, mode, ranking, gt in rows:
        env_hits = hits.setdefault(env_id, {k: [] for k in ks})
        mode_hits = hits_mode.setdefault(mode, {}).setdefault(env_id, {k: [] for k in ks})
        for k in ks:
            r = recall_at_k(ranking, gt, k)
            env_hits[k].append(r)
            mode_hits[k].append(r)
    if not hits:
        raise ValueError("no query rankings to aggregate")
    per_env = {e: {k: sum(v[k]) / len(v[k]) for k in ks} for e, v in hits.items()}
    mean = {k: sum(per_env[e][k] for e in per_env) / len(per_env) for k in ks}
    per_mode = {}
    for mode, envs in hits_mode.items():
        env_means = {e: {k: sum(v[k]) / len(v[k]) for k in ks} for e, v in envs.items()}
        per_mode[mode] = {k: sum(env_means[e][k] for e in env_means) / len(env_means) for k in ks}
    return mean, per_env, per_mode


def evaluate(
    pset: ParamSet,
    ds: Dataset,
    k_values: Sequence[int] = (5, 10, 20),
    ranked_out: list[RankedList] | None = None,
) -> MetricsReport:
    """Rank every query of the split and aggregate recall@K.

    Image embeddings are computed once per environment; every query of that
    environment is ranked against them. Pass a list as ranked_out to also
    collect the full per-query rankings.
    """
    if not ds.manifest.environments:
        raise ValueError(f"split '{ds.manifest.split}' has no environments")
    rows = []
    with no_grad():
        for env in ds.manifest.environments:
            queries = ds.env_queries(env.env_id)
            if not queries:
                raise ValueError(f"environment '{env.env_id}' has no queries to evaluate")
            img_ids, img_emb = _env_image_embeddings(pset, ds, env.env_id)
            for q in queries:
                ranked = _rank_one(pset, ds, q, img_ids, img_emb)
                rows.append((env.env_id, q.mode, ranked.image_ids, q.gt_image_id))
                if ranked_out is not None:
                    ranked_out.append(ranked)
    mean, per_env, per_mode = aggregate_recall(rows, k_values)
    return MetricsReport(
        dataset_id=ds.manifest.dataset_id,
        split=ds.manifest.split,
        k_values=tuple(k_values),
        mean=mean,
        per_env=per_env,
        per_mode=per_mode,
        n_queries=len(rows),
        n_environments=len(ds.manifest.environments),
    )


def save_ranked_lists(lists: Sequence[RankedList], path: str | Path) -> None:
    path = Path(path)
    lines = []
    for rl in lists:
        lines.append(
            json.dumps(
                {"query_id": rl.query_id, "mode": rl.mode, "image_ids": rl.image_ids, "scores": rl.scores}
            )
        )
    path.write_text("\n".join(lines) + "\n")
