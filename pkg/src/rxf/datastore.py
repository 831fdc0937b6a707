"""Dataset manifests, feature-stream matrices, and unlabeled-positive sets.

A dataset on disk is a directory holding ``manifest.json`` plus one binary
matrix per feature stream (see matrixio) with an ``<stream>.rxf1.ids.json``
sidecar listing the row ids in order. Queries never store raw text or
pixels; every stream is a precomputed float32 vector. Loading is eager and
validating: anything structurally wrong (dangling ids, dimension mismatch,
non-finite values) raises before a handle is returned.

Unlabeled-positive sets are JSON lines: a metadata line followed by one
``{"query_id", "image_id"}`` pair per line.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .matrixio import read_matrix, write_matrix

MODES = ("target", "receptacle")
SPLITS = ("train", "val", "test")
STREAM_KINDS = ("image", "query", "phrase")
MANIFEST_FORMAT = "rxf-dataset/1"
UNLABELED_FORMAT = "rxf-unlabeled-set/1"
PROVENANCES = ("oracle", "file", "mllm")


@dataclass(frozen=True)
class EnvironmentEntry:
    env_id: str
    image_ids: tuple[str, ...]
    query_ids: tuple[str, ...]


@dataclass(frozen=True)
class Query:
    query_id: str
    env_id: str
    mode: str
    gt_image_id: str
    n_phrases: int


@dataclass(frozen=True)
class DatasetManifest:
    dataset_id: str
    split: str
    stream_schema: dict[str, int]  # stream name -> vector dimension
    stream_kinds: dict[str, str]  # stream name -> image | query | phrase
    environments: tuple[EnvironmentEntry, ...]
    queries: tuple[Query, ...]


@dataclass
class FeatureRecord:
    """Per-record feature vectors, keyed by stream name; phrases ride along for queries."""

    streams: dict[str, np.ndarray]
    phrases: tuple[np.ndarray, ...] = ()


@dataclass
class UnlabeledPositiveSet:
    pairs: frozenset  # of (query_id, image_id)
    provenance: str
    created_at: str


def phrase_row_id(query_id: str, k: int) -> str:
    return f"{query_id}#{k}"


class Dataset:
    """A validated manifest together with its loaded feature matrices."""

    def __init__(self, manifest: DatasetManifest, matrices: dict[str, np.ndarray], row_ids: dict[str, list[str]]):
        self.manifest = manifest
        self.matrices = matrices
        self.row_ids = row_ids
        self.row_index = {s: {rid: i for i, rid in enumerate(ids)} for s, ids in row_ids.items()}
        self.queries_by_id = {q.query_id: q for q in manifest.queries}
        self.envs_by_id = {e.env_id: e for e in manifest.environments}
        _validate(self)

    @property
    def image_streams(self) -> list[str]:
        return [s for s, k in self.manifest.stream_kinds.items() if k == "image"]

    @property
    def query_streams(self) -> list[str]:
        return [s for s, k in self.manifest.stream_kinds.items() if k == "query"]

    @property
    def phrase_stream(self) -> str | None:
        names = [s for s, k in self.manifest.stream_kinds.items() if k == "phrase"]
        return names[0] if names else None

    def feature_matrix(self, stream: str, ids: list[str]) -> np.ndarray:
        """Rows of one stream in the order of `ids`."""
        if stream not in self.matrices:
            raise KeyError(f"unknown stream '{stream}'")
        index = self.row_index[stream]
        rows = []
        for rid in ids:
            if rid not in index:
                raise KeyError(f"id '{rid}' has no row in stream '{stream}'")
            rows.append(index[rid])
        return np.asarray(self.matrices[stream])[np.asarray(rows, dtype=np.int64)]

    def image_record(self, image_id: str) -> FeatureRecord:
        return FeatureRecord(streams={s: self.feature_matrix(s, [image_id])[0] for s in self.image_streams})

    def query_record(self, query_id: str) -> FeatureRecord:
        q = self.queries_by_id.get(query_id)
        if q is None:
            raise KeyError(f"unknown query '{query_id}'")
        streams = {s: self.feature_matrix(s, [query_id])[0] for s in self.query_streams}
        phrases: tuple[np.ndarray, ...] = ()
        ps = self.phrase_stream
        if ps is not None and q.n_phrases > 0:
            ids = [phrase_row_id(query_id, k) for k in range(q.n_phrases)]
            mat = self.feature_matrix(ps, ids)
            phrases = tuple(mat[k] for k in range(q.n_phrases))
        return FeatureRecord(streams=streams, phrases=phrases)

    def env_queries(self, env_id: str) -> list[Query]:
        env = self.envs_by_id.get(env_id)
        if env is None:
            raise KeyError(f"unknown environment '{env_id}'")
        return [self.queries_by_id[qid] for qid in env.query_ids]


def _validate(ds: Dataset) -> None:
    man = ds.manifest
    if man.split not in SPLITS:
        raise ValueError(f"unknown split '{man.split}'; expected one of {SPLITS}")
    if not man.stream_schema:
        raise ValueError("manifest declares no streams")
    for stream, dim in man.stream_schema.items():
        if not isinstance(dim, int) or dim <= 0:
            raise ValueError(f"stream '{stream}' has invalid dimension {dim!r}")
        kind = man.stream_kinds.get(stream)
        if kind not in STREAM_KINDS:
            raise ValueError(f"stream '{stream}' has invalid kind {kind!r}")
        if stream not in ds.matrices:
            raise ValueError(f"stream '{stream}' has no matrix")
    phrase_streams = [s for s, k in man.stream_kinds.items() if k == "phrase"]
    if len(phrase_streams) > 1:
        raise ValueError(f"at most one phrase stream is supported, got {phrase_streams}")

    env_ids = [e.env_id for e in man.environments]
    if len(set(env_ids)) != len(env_ids):
        raise ValueError("duplicate environment ids in manifest")
    all_images: set[str] = set()
    for env in man.environments:
        if len(set(env.image_ids)) != len(env.image_ids):
            raise ValueError(f"duplicate image ids in environment '{env.env_id}'")
        overlap = all_images.intersection(env.image_ids)
        if overlap:
            raise ValueError(f"image id '{sorted(overlap)[0]}' appears in more than one environment")
        all_images.update(env.image_ids)
        if env.query_ids and not env.image_ids:
            raise ValueError(f"environment '{env.env_id}' has queries but no images")

    qids = [q.query_id for q in man.queries]
    if len(set(qids)) != len(qids):
        raise ValueError("duplicate query ids in manifest")
    by_env: dict[str, set[str]] = {e.env_id: set(e.query_ids) for e in man.environments}
    for q in man.queries:
        if q.env_id not in ds.envs_by_id:
            raise ValueError(f"query '{q.query_id}' references unknown environment '{q.env_id}'")
        if q.mode not in MODES:
            raise ValueError(f"query '{q.query_id}' has invalid mode '{q.mode}'")
        if q.gt_image_id not in ds.envs_by_id[q.env_id].image_ids:
            raise ValueError(
                f"query '{q.query_id}' ground truth '{q.gt_image_id}' is not an image of environment '{q.env_id}'"
            )
        if q.n_phrases < 0:
            raise ValueError(f"query '{q.query_id}' has negative phrase count")
        if q.query_id not in by_env[q.env_id]:
            raise ValueError(f"query '{q.query_id}' missing from environment '{q.env_id}' query list")
    listed = {qid for e in man.environments for qid in e.query_ids}
    dangling = listed.difference(qids)
    if dangling:
        raise ValueError(f"environment lists unknown query '{sorted(dangling)[0]}'")

    # expected row-id sets per stream kind
    expected_by_kind = {
        "image": [iid for e in man.environments for iid in e.image_ids],
        "query": qids,
        "phrase": [phrase_row_id(q.query_id, k) for q in man.queries for k in range(q.n_phrases)],
    }
    for stream, dim in man.stream_schema.items():
        mat = ds.matrices[stream]
        ids = ds.row_ids[stream]
        if mat.ndim != 2 or mat.shape[1] != dim:
            raise ValueError(f"stream '{stream}' matrix has shape {mat.shape}; declared dimension {dim}")
        if mat.shape[0] != len(ids):
            raise ValueError(f"stream '{stream}' has {mat.shape[0]} rows but {len(ids)} row ids")
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate row ids in stream '{stream}'")
        expected = expected_by_kind[man.stream_kinds[stream]]
        missing = set(expected).difference(ids)
        if missing:
            raise ValueError(f"stream '{stream}' is missing a row for id '{sorted(missing)[0]}'")
        extra = set(ids).difference(expected)
        if extra:
            raise ValueError(f"stream '{stream}' has a row for dangling id '{sorted(extra)[0]}'")
        if not np.all(np.isfinite(mat)):
            rows = np.unique(np.nonzero(~np.isfinite(mat))[0])
            raise ValueError(f"non-finite values in stream '{stream}' at id '{ids[int(rows[0])]}'")


def load_dataset(manifest_path: str | Path, mmap: bool = False) -> Dataset:
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise FileNotFoundError(f"manifest not found: {manifest_path}")
    raw = json.loads(manifest_path.read_text())
    if raw.get("format") != MANIFEST_FORMAT:
        raise ValueError(f"unsupported manifest format {raw.get('format')!r}")
    root = manifest_path.parent
    streams = raw["streams"]
    manifest = DatasetManifest(
        dataset_id=raw["dataset_id"],
        split=raw["split"],
        stream_schema={s: spec["dim"] for s, spec in streams.items()},
        stream_kinds={s: spec["kind"] for s, spec in streams.items()},
        environments=tuple(
            EnvironmentEntry(env_id=e["env_id"], image_ids=tuple(e["image_ids"]), query_ids=tuple(e["query_ids"]))
            for e in raw["environments"]
        ),
        queries=tuple(
            Query(
                query_id=q["query_id"],
                env_id=q["env_id"],
                mode=q["mode"],
                gt_image_id=q["gt_image_id"],
                n_phrases=q["n_phrases"],
            )
            for q in raw["queries"]
        ),
    )
    matrices: dict[str, np.ndarray] = {}
    row_ids: dict[str, list[str]] = {}
    for stream, spec in streams.items():
        mat_path = root / spec["file"]
        matrices[stream] = read_matrix(mat_path, mmap=mmap)
        ids_path = Path(str(mat_path) + ".ids.json")
        if not ids_path.is_file():
            raise FileNotFoundError(f"row-id sidecar not found: {ids_path}")
        row_ids[stream] = json.loads(ids_path.read_text())
    return Dataset(manifest, matrices, row_ids)


def save_dataset(ds: Dataset, out_dir: str | Path) -> Path:
    """Write a dataset directory; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    man = ds.manifest
    streams_json = {}
    for stream in man.stream_schema:
        fname = f"{stream}.rxf1"
        arr = np.ascontiguousarray(np.asarray(ds.matrices[stream], dtype=np.float32))
        write_matrix(out_dir / fname, arr)
        (out_dir / f"{fname}.ids.json").write_text(json.dumps(ds.row_ids[stream]))
        streams_json[stream] = {
            "kind": man.stream_kinds[stream],
            "dim": man.stream_schema[stream],
            "file": fname,
        }
    doc = {
        "format": MANIFEST_FORMAT,
        "dataset_id": man.dataset_id,
        "split": man.split,
        "streams": streams_json,
        "environments": [
            {"env_id": e.env_id, "image_ids": list(e.image_ids), "query_ids": list(e.query_ids)}
            for e in man.environments
        ],
        "queries": [
            {
                "query_id": q.query_id,
                "env_id": q.env_id,
                "mode": q.mode,
                "gt_image_id": q.gt_image_id,
                "n_phrases": q.n_phrases,
            }
            for q in man.queries
        ],
    }
    manifest_path = out_dir / "manifest.json"
    manifest_path.write_text(json.dumps(doc, indent=2) + "\n")
    return manifest_path


def validate_unlabeled_set(uset: UnlabeledPositiveSet, ds: Dataset) -> None:
    if uset.provenance not in PROVENANCES:
        raise ValueError(f"unknown provenance '{uset.provenance}'")
    all_images = {iid for e in ds.manifest.environments for iid in e.image_ids}
    for query_id, image_id in uset.pairs:
        q = ds.queries_by_id.get(query_id)
        if q is None:
            raise ValueError(f"unlabeled pair references unknown query '{query_id}'")
        if image_id not in all_images:
            raise ValueError(f"unlabeled pair references unknown image '{image_id}'")
        if image_id == q.gt_image_id:
            raise ValueError(f"unlabeled pair ({query_id}, {image_id}) duplicates the ground truth")


def save_unlabeled_set(uset: UnlabeledPositiveSet, path: str | Path) -> None:
    path = Path(path)
    lines = [json.dumps({"format": UNLABELED_FORMAT, "provenance": uset.provenance, "created_at": uset.created_at})]
    for query_id, image_id in sorted(uset.pairs):
        lines.append(json.dumps({"query_id": query_id, "image_id": image_id}))
    path.write_text("\n".join(lines) + "\n")


def load_unlabeled_set(path: str | Path) -> UnlabeledPositiveSet:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"unlabeled set not found: {path}")
    lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
    if not lines:
        raise ValueError(f"empty unlabeled-set file: {path}")
    head = json.loads(lines[0])
    if head.get("format") != UNLABELED_FORMAT:
        raise ValueError(f"unsupported unlabeled-set format {head.get('format')!r}")
    pairs = set()
    for ln in lines[1:]:
        rec = json.loads(ln)
        pairs.add((rec["query_id"], rec["image_id"]))
    return UnlabeledPositiveSet(pairs=frozenset(pairs), provenance=head["provenance"], created_at=head["created_at"])
