"""Run extraction over a raw manifest and write an engine dataset directory.

The runner processes samples in parallel, caches finished samples under
their content hash so interrupted runs resume without repeating service
calls, and skips (never zero-fills) samples whose services fail. The
exporter assembles the surviving samples into the dataset layout documented
in docs/FORMAT.md, dropping queries whose ground-truth image did not make
it, and refuses to write anything structurally invalid.

This module writes the format itself; it does not import the engine.
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import IMAGE_STREAMS, PHRASE_STREAM, TEXT_STREAMS, ExtractorConfig
from .samples import RawManifest, RawSample, content_hash, load_image
from .services import ModelServices, ServiceError
from .streams import extract_image_streams, extract_text_streams

log = logging.getLogger(__name__)

MANIFEST_FORMAT = "rxf-dataset/1"
_RXF1_HEADER = struct.Struct("<4sBQQ")
_RXF1_MAGIC = b"RXF1"
_F32 = 1


@dataclass
class SampleFeatures:
    sample_id: str
    image: dict[str, np.ndarray]  # five image streams
    sentence: dict[str, np.ndarray]  # t_orig, t_std
    phrases: list[np.ndarray]  # for the sample's own mode


@dataclass
class ExtractionResult:
    samples: dict[str, SampleFeatures] = field(default_factory=dict)
    failures: list[tuple[str, str]] = field(default_factory=list)  # (sample_id, reason)
    cache_hits: int = 0


def _config_digest(config: ExtractorConfig) -> str:
    doc = {
        "dims": dict(sorted(config.dims.items())),
        "describe_prompt": config.describe_prompt,
        "caption_prompt": config.caption_prompt,
        "rewrite_prompt": config.rewrite_prompt,
        "phrases_prompt": config.phrases_prompt,
        "latent_layer": config.latent_layer,
        "latent_pool": config.latent_pool,
        "greedy": config.greedy,
    }
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


def _cache_load(path: Path, sample_id: str) -> SampleFeatures:
    with np.load(path) as doc:
        image = {s: doc[s] for s in IMAGE_STREAMS}
        sentence = {s: doc[s] for s in TEXT_STREAMS}
        phrases = [doc["phrases"][k] for k in range(doc["phrases"].shape[0])]
    return SampleFeatures(sample_id=sample_id, image=image, sentence=sentence, phrases=phrases)


def _cache_store(path: Path, feats: SampleFeatures, dim: int) -> None:
    phrases = (
        np.stack(feats.phrases).astype(np.float32)
        if feats.phrases
        else np.zeros((0, dim), dtype=np.float32)
    )
    tmp = path.with_suffix(".tmp.npz")
    np.savez(tmp, phrases=phrases, **feats.image, **feats.sentence)
    tmp.replace(path)


def _extract_one(
    sample: RawSample,
    services: ModelServices,
    config: ExtractorConfig,
    cache_dir: Path | None,
    digest: str,
) -> tuple[SampleFeatures | None, bool]:
    """Returns (features, from_cache); features is None on failure."""
    cache_path = None
    if cache_dir is not None:
        cache_path = cache_dir / f"{content_hash(sample, digest)}.npz"
        if cache_path.is_file():
            return _cache_load(cache_path, sample.sample_id), True
    image = load_image(sample.image_path)
    image_streams = extract_image_streams(image, services, config)
    sentence, by_mode = extract_text_streams(
        sample.instruction, services, config, modes=(sample.mode,)
    )
    feats = SampleFeatures(
        sample_id=sample.sample_id,
        image=image_streams,
        sentence=sentence,
        phrases=by_mode[sample.mode],
    )
    if cache_path is not None:
        _cache_store(cache_path, feats, config.dims[PHRASE_STREAM])
    return feats, False


def run_extraction(
    manifest: RawManifest,
    services: ModelServices,
    config: ExtractorConfig | None = None,
    cache_dir: str | Path | None = None,
    jobs: int = 1,
) -> ExtractionResult:
    """Extract every sample; failed samples are recorded, not exported."""
    config = config or ExtractorConfig()
    if jobs < 1:
        raise ValueError(f"jobs must be >= 1, got {jobs}")
    if cache_dir is not None:
        cache_dir = Path(cache_dir)
        cache_dir.mkdir(parents=True, exist_ok=True)
    digest = _config_digest(config)
    result = ExtractionResult()

    def work(sample: RawSample):
        try:
            return sample, _extract_one(sample, services, config, cache_dir, digest), None
        except (ServiceError, ValueError, OSError) as err:
            return sample, None, f"{type(err).__name__}: {err}"

    with ThreadPoolExecutor(max_workers=jobs) as pool:
        for sample, outcome, reason in pool.map(work, manifest.samples):
            if outcome is None:
                log.warning("skipping sample '%s': %s", sample.sample_id, reason)
                result.failures.append((sample.sample_id, reason))
                continue
            feats, from_cache = outcome
            result.samples[sample.sample_id] = feats
            result.cache_hits += from_cache
    log.info(
        "extracted %d/%d samples (%d from cache, %d failed)",
        len(result.samples),
        len(manifest.samples),
        result.cache_hits,
        len(result.failures),
    )
    return result


# -- dataset assembly ---------------------------------------------------------


def _write_matrix(path: Path, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_RXF1_HEADER.pack(_RXF1_MAGIC, _F32, arr.shape[0], arr.shape[1]))
        fh.write(arr.tobytes())


def export_dataset(
    result: ExtractionResult,
    manifest: RawManifest,
    config: ExtractorConfig | None = None,
    out_dir: str | Path = "dataset",
) -> Path:
    """Write the dataset directory; returns the manifest path.

    Queries whose ground-truth image failed extraction are dropped (their
    own images stay as candidates). An export with no usable query, or any
    internal inconsistency, raises instead of writing.
    """
    config = config or ExtractorConfig()
    out_dir = Path(out_dir)
    ok = result.samples

    # environments in raw-manifest order; a sample contributes its image
    # always, its query only if the ground truth survived
    env_order: list[str] = []
    env_images: dict[str, list[str]] = {}
    env_queries: dict[str, list[str]] = {}
    queries: list[dict] = []
    query_samples: list[RawSample] = []
    for sample in manifest.samples:
        if sample.sample_id not in ok:
            continue
        if sample.env_id not in env_images:
            env_order.append(sample.env_id)
            env_images[sample.env_id] = []
            env_queries[sample.env_id] = []
        env_images[sample.env_id].append(sample.sample_id)
        if sample.gt_image_id not in ok:
            log.warning(
                "dropping query '%s': ground truth image '%s' was not extracted",
                sample.query_id(),
                sample.gt_image_id,
            )
            continue
        env_queries[sample.env_id].append(sample.query_id())
        query_samples.append(sample)
        queries.append(
            {
                "query_id": sample.query_id(),
                "env_id": sample.env_id,
                "mode": sample.mode,
                "gt_image_id": sample.gt_image_id,
                "n_phrases": len(ok[sample.sample_id].phrases),
            }
        )
    if not queries:
        raise ValueError("nothing to export: no query survived extraction")

    image_ids = [iid for env in env_order for iid in env_images[env]]
    query_ids = [q["query_id"] for q in queries]
    matrices: dict[str, tuple[list[str], np.ndarray]] = {}
    for stream in IMAGE_STREAMS:
        rows = np.stack([ok[iid].image[stream] for iid in image_ids])
        matrices[stream] = (image_ids, rows)
    for stream in TEXT_STREAMS:
        rows = np.stack([ok[s.sample_id].sentence[stream] for s in query_samples])
        matrices[stream] = (query_ids, rows)
    phrase_ids, phrase_rows = [], []
    for sample in query_samples:
        for k, vec in enumerate(ok[sample.sample_id].phrases):
            phrase_ids.append(f"{sample.query_id()}#{k}")
            phrase_rows.append(vec)
    matrices[PHRASE_STREAM] = (
        phrase_ids,
        np.stack(phrase_rows)
        if phrase_rows
        else np.zeros((0, config.dims[PHRASE_STREAM]), dtype=np.float32),
    )

    _check_export(matrices, config)

    out_dir.mkdir(parents=True, exist_ok=True)
    kinds = {s: "image" for s in IMAGE_STREAMS}
    kinds.update({s: "query" for s in TEXT_STREAMS})
    kinds[PHRASE_STREAM] = "phrase"
    streams_json = {}
    for stream, (ids, rows) in matrices.items():
        fname = f"{stream}.rxf1"
        _write_matrix(out_dir / fname, rows)
        (out_dir / f"{fname}.ids.json").write_text(json.dumps(ids))
        streams_json[stream] = {"kind": kinds[stream], "dim": config.dims[stream], "file": fname}
    doc = {
        "format": MANIFEST_FORMAT,
        "dataset_id": manifest.dataset_id,
        "split": manifest.split,
        "streams": streams_json,
        "environments": [
            {"env_id": env, "image_ids": env_images[env], "query_ids": env_queries[env]}
            for env in env_order
        ],
        "queries": queries,
    }
    manifest_path = out_dir / "manifest.json"
    manifest_path.write_text(json.dumps(doc, indent=2) + "\n")
    return manifest_path


def _check_export(matrices: dict[str, tuple[list[str], np.ndarray]], config: ExtractorConfig) -> None:
    for stream, (ids, rows) in matrices.items():
        if rows.ndim != 2 or rows.shape != (len(ids), config.dims[stream]):
            raise ValueError(
                f"stream '{stream}': {len(ids)} ids but matrix shape {rows.shape} "
                f"(declared dim {config.dims[stream]})"
            )
        if len(set(ids)) != len(ids):
            raise ValueError(f"stream '{stream}': duplicate row ids")
        if not np.all(np.isfinite(rows)):
            raise ValueError(f"stream '{stream}': non-finite values")
