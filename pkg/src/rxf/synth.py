"""Synthetic retrieval worlds with planted unlabeled positives.

Each environment gets a handful of cluster directions on the unit sphere;
an image is a noisy linear image of its cluster direction, one matrix per
feature stream, so images of one cluster are near-duplicates of each other.
An instruction picks a (target, receptacle) cluster pair: its two queries
point at one ground-truth image each, while the remaining images of that
cluster are exactly the pairs a labeler should affirm. The planted truth is
written next to the dataset so an oracle judge can answer from it.

The instruction streams are built with the same linear map as the mid-level
image stream, so a frozen cosine scorer over raw streams produces a
meaningful shortlist, the way a shared-space extractor would.

run_benchmark() trains the same data under several loss kinds with identical
seeds and reports per-seed test recalls; its JSON output contains no
timestamps, so reruns are byte-identical.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .datastore import (
    Dataset,
    DatasetManifest,
    EnvironmentEntry,
    Query,
    load_dataset,
    phrase_row_id,
    save_dataset,
)
from .encoders import IMAGE_STREAMS, PHRASE_STREAM, TEXT_STREAMS, ImageEncoderConfig, TextEncoderConfig
from .labeler import TRUTH_FORMAT, FrozenStreamScorer, label_dataset, oracle_judge_from_file
from .retrieval import evaluate
from .trainer import TrainConfig, train

log = logging.getLogger(__name__)

SPLIT_LAYOUT = ("train", "val", "test")


@dataclass(frozen=True)
class SynthConfig:
    n_train_envs: int = 8
    n_val_envs: int = 3
    n_test_envs: int = 4
    images_per_env: int = 24
    clusters_per_env: int = 4
    instructions_per_env: int = 10  # two queries each, one per mode
    stream_dim: int = 32
    noise_sigma: float = 0.15
    clustered_fraction: float = 1.0  # remaining images are off-cluster background
    phrases_min: int = 1
    phrases_max: int = 3
    global_seed: int = 0
    map_seed: int = 7  # the stream maps play the role of frozen extractors
    dataset_id: str = "synth"

    def __post_init__(self):
        if min(self.n_train_envs, self.n_val_envs, self.n_test_envs) < 1:
            raise ValueError("every split needs at least one environment")
        if self.clusters_per_env < 2:
            raise ValueError("need at least two clusters per environment to pair target and receptacle")
        if self.instructions_per_env < 1:
            raise ValueError("need at least one instruction per environment")
        if self.stream_dim < 2:
            raise ValueError(f"stream_dim must be >= 2, got {self.stream_dim}")
        if not (0.0 < self.clustered_fraction <= 1.0):
            raise ValueError(f"clustered_fraction must be in (0, 1], got {self.clustered_fraction}")
        if self.noise_sigma < 0.0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if not (0 <= self.phrases_min <= self.phrases_max):
            raise ValueError(f"invalid phrase count range [{self.phrases_min}, {self.phrases_max}]")
        n_clustered = round(self.images_per_env * self.clustered_fraction)
        if n_clustered < self.clusters_per_env:
            raise ValueError(
                f"{n_clustered} clustered images cannot cover {self.clusters_per_env} clusters"
            )
        if 2 * self.instructions_per_env > n_clustered:
            raise ValueError(
                f"{self.instructions_per_env} instructions need {2 * self.instructions_per_env} distinct "
                f"ground-truth images but only {n_clustered} are clustered"
            )


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def _stream_maps(cfg: SynthConfig) -> dict[str, np.ndarray]:
    """One square map per stream; t_orig shares the v_M map (shared space)."""
    rng = np.random.default_rng([cfg.map_seed])
    d = cfg.stream_dim
    maps: dict[str, np.ndarray] = {}
    for name in IMAGE_STREAMS + ("t_std", PHRASE_STREAM):
        maps[name] = rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, d))
    maps["t_orig"] = maps["v_M"]
    return maps


def _assign_ground_truths(
    cfg: SynthConfig,
    env_id: str,
    by_cluster: dict[int, list[str]],
    rng: np.random.Generator,
) -> list[tuple[int, int, str, str]]:
    """Pick (target cluster, receptacle cluster, gt image each) per instruction.

    Ground truths are drawn without replacement so no image answers two
    queries; an unlucky random pairing that strands the last instructions on
    a single cluster is redrawn.
    """
    for _ in range(100):
        available = {c: list(by_cluster.get(c, [])) for c in range(cfg.clusters_per_env)}
        out: list[tuple[int, int, str, str]] = []
        for _k in range(cfg.instructions_per_env):
            open_clusters = [c for c, imgs in available.items() if imgs]
            if len(open_clusters) < 2:
                break
            c_t = open_clusters[rng.integers(len(open_clusters))]
            rest = [c for c in open_clusters if c != c_t]
            c_r = rest[rng.integers(len(rest))]
            gt_t = available[c_t].pop(rng.integers(len(available[c_t])))
            gt_r = available[c_r].pop(rng.integers(len(available[c_r])))
            out.append((c_t, c_r, gt_t, gt_r))
        if len(out) == cfg.instructions_per_env:
            return out
    raise ValueError(f"environment '{env_id}' cannot place unique ground truths for every instruction")


def _gen_environment(
    cfg: SynthConfig,
    maps: dict[str, np.ndarray],
    env_id: str,
    rng: np.random.Generator,
) -> dict:
    """All arrays and bookkeeping for one environment."""
    d = cfg.stream_dim
    centers = np.stack([_unit(rng.normal(size=d)) for _ in range(cfg.clusters_per_env)])

    n_clustered = round(cfg.images_per_env * cfg.clustered_fraction)
    base, extra = divmod(n_clustered, cfg.clusters_per_env)
    cluster_sizes = [base + (1 if c < extra else 0) for c in range(cfg.clusters_per_env)]
    directions: list[np.ndarray] = []
    cluster_of: list[int] = []
    for c, size in enumerate(cluster_sizes):
        for _ in range(size):
            directions.append(centers[c])
            cluster_of.append(c)
    for _ in range(cfg.images_per_env - n_clustered):
        directions.append(_unit(rng.normal(size=d)))  # background, no cluster
        cluster_of.append(-1)

    image_ids = [f"{env_id}_img{i:03d}" for i in range(cfg.images_per_env)]
    image_streams = {
        s: np.stack([maps[s] @ directions[i] + cfg.noise_sigma * rng.normal(size=d) for i in range(len(image_ids))])
        for s in IMAGE_STREAMS
    }
    by_cluster: dict[int, list[str]] = {}
    for iid, c in zip(image_ids, cluster_of):
        by_cluster.setdefault(c, []).append(iid)

    assignment = _assign_ground_truths(cfg, env_id, by_cluster, rng)

    queries: list[Query] = []
    t_orig_rows: dict[str, np.ndarray] = {}
    t_std_rows: dict[str, np.ndarray] = {}
    phrase_rows: dict[str, np.ndarray] = {}
    planted: list[tuple[str, str]] = []
    for k, (c_t, c_r, gt_t, gt_r) in enumerate(assignment):
        mix = _unit(centers[c_t] + centers[c_r])
        t_orig = maps["t_orig"] @ mix + cfg.noise_sigma * rng.normal(size=d)
        t_std = maps["t_std"] @ mix + cfg.noise_sigma * rng.normal(size=d)
        for mode, cluster, gt in (("target", c_t, gt_t), ("receptacle", c_r, gt_r)):
            qid = f"{env_id}_q{k:02d}{mode[0]}"
            n_phrases = int(rng.integers(cfg.phrases_min, cfg.phrases_max + 1))
            for j in range(n_phrases):
                phrase_rows[phrase_row_id(qid, j)] = (
                    maps[PHRASE_STREAM] @ centers[cluster] + cfg.noise_sigma * rng.normal(size=d)
                )
            queries.append(Query(query_id=qid, env_id=env_id, mode=mode, gt_image_id=gt, n_phrases=n_phrases))
            t_orig_rows[qid] = t_orig
            t_std_rows[qid] = t_std
            for iid in by_cluster.get(cluster, []):
                if iid != gt:
                    planted.append((qid, iid))
    return {
        "entry": EnvironmentEntry(
            env_id=env_id,
            image_ids=tuple(image_ids),
            query_ids=tuple(q.query_id for q in queries),
        ),
        "image_streams": image_streams,
        "image_ids": image_ids,
        "queries": queries,
        "t_orig": t_orig_rows,
        "t_std": t_std_rows,
        "phrases": phrase_rows,
        "planted": planted,
    }


def _assemble_split(cfg: SynthConfig, split: str, envs: list[dict]) -> Dataset:
    d = cfg.stream_dim
    schema = {s: d for s in IMAGE_STREAMS + TEXT_STREAMS + (PHRASE_STREAM,)}
    kinds = {s: "image" for s in IMAGE_STREAMS}
    kinds.update({s: "query" for s in TEXT_STREAMS})
    kinds[PHRASE_STREAM] = "phrase"
    manifest = DatasetManifest(
        dataset_id=f"{cfg.dataset_id}-seed{cfg.global_seed}",
        split=split,
        stream_schema=schema,
        stream_kinds=kinds,
        environments=tuple(e["entry"] for e in envs),
        queries=tuple(q for e in envs for q in e["queries"]),
    )
    matrices: dict[str, np.ndarray] = {}
    row_ids: dict[str, list[str]] = {}
    for s in IMAGE_STREAMS:
        matrices[s] = np.concatenate([e["image_streams"][s] for e in envs]).astype(np.float32)
        row_ids[s] = [iid for e in envs for iid in e["image_ids"]]
    for s, key in (("t_orig", "t_orig"), ("t_std", "t_std")):
        rows, ids = [], []
        for e in envs:
            for q in e["queries"]:
                rows.append(e[key][q.query_id])
                ids.append(q.query_id)
        matrices[s] = np.stack(rows).astype(np.float32)
        row_ids[s] = ids
    ids, rows = [], []
    for e in envs:
        for q in e["queries"]:
            for j in range(q.n_phrases):
                rid = phrase_row_id(q.query_id, j)
                ids.append(rid)
                rows.append(e["phrases"][rid])
    matrices[PHRASE_STREAM] = (
        np.stack(rows).astype(np.float32) if rows else np.zeros((0, d), dtype=np.float32)
    )
    row_ids[PHRASE_STREAM] = ids
    return Dataset(manifest, matrices, row_ids)


def generate(cfg: SynthConfig, out_dir: str | Path) -> dict[str, Path]:
    """Write train/val/test dataset directories plus the planted-truth file.

    Returns the manifest paths keyed by split, plus the truth path under
    "truth". The same config (seeds included) writes identical bytes.
    """
    out_dir = Path(out_dir)
    maps = _stream_maps(cfg)
    counts = {"train": cfg.n_train_envs, "val": cfg.n_val_envs, "test": cfg.n_test_envs}
    paths: dict[str, Path] = {}
    planted: list[tuple[str, str]] = []
    for split_idx, split in enumerate(SPLIT_LAYOUT):
        envs = []
        for env_idx in range(counts[split]):
            rng = np.random.default_rng([cfg.global_seed, split_idx, env_idx])
            envs.append(_gen_environment(cfg, maps, f"{split}{env_idx:02d}", rng))
        ds = _assemble_split(cfg, split, envs)
        paths[split] = save_dataset(ds, out_dir / split)
        planted.extend(p for e in envs for p in e["planted"])
    truth_path = out_dir / "planted_truth.json"
    truth_path.write_text(
        json.dumps({"format": TRUTH_FORMAT, "pairs": sorted(planted)}, indent=2) + "\n"
    )
    paths["truth"] = truth_path
    return paths


# -- benchmark ------------------------------------------------------------------


def _default_bench_train() -> TrainConfig:
    # desk-scale schedule; the paper-scale defaults of TrainConfig assume a
    # far larger corpus than these synthetic worlds
    return TrainConfig(lr=1e-3, weight_decay=0.01, batch_size=32, epochs=60, save_every_epoch=False)


def _default_bench_image_encoder() -> ImageEncoderConfig:
    # sized to the synthetic corpus; full-width encoders overfit it in a few epochs
    return ImageEncoderConfig(d_model=64, d_emb=128, d_sgm=64, d_sog=64, d_h=64)


def _default_bench_text_encoder() -> TextEncoderConfig:
    return TextEncoderConfig(d_model=64, d_emb=128, d_mode=16)


@dataclass(frozen=True)
class BenchConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    image_encoder: ImageEncoderConfig = field(default_factory=_default_bench_image_encoder)
    text_encoder: TextEncoderConfig = field(default_factory=_default_bench_text_encoder)
    train: TrainConfig = field(default_factory=_default_bench_train)
    loss_kinds: tuple[str, ...] = ("drc", "infonce")
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    n_cand: int = 20
    k_values: tuple[int, ...] = (5, 10, 20)

    def __post_init__(self):
        if not self.loss_kinds:
            raise ValueError("no loss kinds to benchmark")
        if not self.seeds:
            raise ValueError("no seeds to benchmark")


def run_benchmark(config: BenchConfig, workdir: str | Path) -> dict:
    """Generate, label, and train each loss kind per seed; returns the results doc.

    Every loss kind sees the identical datasets, unlabeled-positive set, and
    training seed, so the only difference between arms is the objective.
    """
    workdir = Path(workdir)
    per_seed: dict[str, dict[str, dict[str, float]]] = {kind: {} for kind in config.loss_kinds}
    for seed in config.seeds:
        seed_dir = workdir / f"seed{seed:02d}"
        synth_cfg = replace(config.synth, global_seed=seed)
        paths = generate(synth_cfg, seed_dir / "data")
        ds_train = load_dataset(paths["train"])
        ds_val = load_dataset(paths["val"])
        ds_test = load_dataset(paths["test"])
        judge = oracle_judge_from_file(paths["truth"], ds_train)
        uset = label_dataset(ds_train, FrozenStreamScorer(), judge, n_cand=config.n_cand)
        log.info("seed %d: labeled %d unlabeled-positive pairs", seed, len(uset.pairs))
        for kind in config.loss_kinds:
            train_cfg = replace(config.train, loss=kind)
            pset, record = train(
                ds_train,
                ds_val,
                uset,
                config.image_encoder,
                config.text_encoder,
                train_cfg,
                out_dir=seed_dir / f"run_{kind}",
            )
            report = evaluate(pset, ds_test, config.k_values)
            per_seed[kind][str(seed)] = {str(k): report.mean[k] for k in config.k_values}
            log.info(
                "seed %d %s: best epoch %d, test recall %s",
                seed,
                kind,
                record.best_epoch,
                per_seed[kind][str(seed)],
            )
    summary: dict[str, dict[str, dict[str, float]]] = {}
    for kind in config.loss_kinds:
        summary[kind] = {}
        for k in config.k_values:
            vals = np.array([per_seed[kind][str(s)][str(k)] for s in config.seeds])
            sd = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
            summary[kind][str(k)] = {"mean": float(vals.mean()), "sd": sd}
    return {
        "loss_kinds": list(config.loss_kinds),
        "seeds": list(config.seeds),
        "k_values": list(config.k_values),
        "config": {
            "synth": asdict(config.synth),
            "train": {**asdict(config.train), "drc": {"alpha": config.train.drc.alpha,
                                                      "gamma": config.train.drc.gamma,
                                                      "lambda": config.train.drc.lam}},
            "image_encoder": asdict(config.image_encoder),
            "text_encoder": asdict(config.text_encoder),
            "n_cand": config.n_cand,
        },
        "per_seed": per_seed,
        "summary": summary,
    }


def render_table(results: dict) -> str:
    """Plain-text summary table of the benchmark results."""
    ks = results["k_values"]
    header = "loss".ljust(26) + "".join(f"R@{k}".ljust(18) for k in ks)
    lines = [header, "-" * len(header)]
    for kind in results["loss_kinds"]:
        cells = []
        for k in ks:
            cell = results["summary"][kind][str(k)]
            cells.append(f"{cell['mean']:.4f} ± {cell['sd']:.4f}".ljust(18))
        lines.append(kind.ljust(26) + "".join(cells))
    return "\n".join(lines)
