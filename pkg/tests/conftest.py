"""Shared fixtures: tiny encoder configs and an in-memory dataset builder."""

from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from rxf.datastore import Dataset, DatasetManifest, EnvironmentEntry, Query, phrase_row_id
from rxf.encoders import IMAGE_STREAMS, PHRASE_STREAM, TEXT_STREAMS, ImageEncoderConfig, TextEncoderConfig

TINY_DIMS = {s: 6 for s in IMAGE_STREAMS + TEXT_STREAMS + (PHRASE_STREAM,)}


@pytest.fixture
def tiny_configs():
    image = ImageEncoderConfig(d_model=8, n_heads=2, n_blocks=1, d_emb=8, d_sgm=8, d_sog=8, d_h=8)
    text = TextEncoderConfig(d_model=8, n_heads=2, n_blocks=1, d_emb=8, d_mode=4)
    return image, text


def random_image_record(rng, dims=TINY_DIMS):
    from rxf.datastore import FeatureRecord

    return FeatureRecord(streams={s: rng.normal(size=dims[s]).astype(np.float32) for s in IMAGE_STREAMS})


def random_text_record(rng, n_phrases, dims=TINY_DIMS):
    from rxf.datastore import FeatureRecord

    return FeatureRecord(
        streams={s: rng.normal(size=dims[s]).astype(np.float32) for s in TEXT_STREAMS},
        phrases=tuple(rng.normal(size=dims[PHRASE_STREAM]).astype(np.float32) for _ in range(n_phrases)),
    )


def build_dataset(
    env_images: dict[str, list[str]],
    queries: list[Query],
    dim: int = 6,
    seed: int = 0,
    split: str = "test",
    image_vectors: dict[str, np.ndarray] | None = None,
    dataset_id: str = "fixture",
) -> Dataset:
    """Construct a fully valid in-memory dataset with random feature rows.

    image_vectors optionally pins specific images to specific vectors (all
    streams share the vector), which makes deliberate score ties easy to set up.
    """
    rng = np.random.default_rng(seed)
    schema = {s: dim for s in IMAGE_STREAMS + TEXT_STREAMS + (PHRASE_STREAM,)}
    kinds = {s: "image" for s in IMAGE_STREAMS}
    kinds.update({s: "query" for s in TEXT_STREAMS})
    kinds[PHRASE_STREAM] = "phrase"
    by_env: dict[str, list[str]] = {e: list(qs) for e, qs in env_images.items()}
    manifest = DatasetManifest(
        dataset_id=dataset_id,
        split=split,
        stream_schema=schema,
        stream_kinds=kinds,
        environments=tuple(
            EnvironmentEntry(
                env_id=env,
                image_ids=tuple(images),
                query_ids=tuple(q.query_id for q in queries if q.env_id == env),
            )
            for env, images in by_env.items()
        ),
        queries=tuple(queries),
    )
    image_ids = [iid for images in by_env.values() for iid in images]
    matrices: dict[str, np.ndarray] = {}
    row_ids: dict[str, list[str]] = {}
    for s in IMAGE_STREAMS:
        rows = []
        for iid in image_ids:
            if image_vectors is not None and iid in image_vectors:
                rows.append(np.asarray(image_vectors[iid], dtype=np.float32))
            else:
                rows.append(rng.normal(size=dim).astype(np.float32))
        matrices[s] = np.stack(rows)
        row_ids[s] = list(image_ids)
    for s in TEXT_STREAMS:
        matrices[s] = rng.normal(size=(len(queries), dim)).astype(np.float32)
        row_ids[s] = [q.query_id for q in queries]
    ids, rows = [], []
    for q in queries:
        for k in range(q.n_phrases):
            ids.append(phrase_row_id(q.query_id, k))
            rows.append(rng.normal(size=dim).astype(np.float32))
    matrices[PHRASE_STREAM] = np.stack(rows) if rows else np.zeros((0, dim), dtype=np.float32)
    row_ids[PHRASE_STREAM] = ids
    return Dataset(manifest, matrices, row_ids)
