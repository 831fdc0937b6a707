#!/usr/bin/env python3
"""Measure single-query ranking latency across encoder widths.

The serving unit of work is: encode one instruction, score it against the
environment's cached image embeddings, sort. Image embeddings are computed
offline, so only the text tower and the similarity pass are on the clock.
"""

import argparse
import sys
import time

import numpy as np

from rxf.autograd import no_grad
from rxf.datastore import FeatureRecord
from rxf.encoders import (
    IMAGE_STREAMS,
    PHRASE_STREAM,
    TEXT_STREAMS,
    ImageEncoderConfig,
    TextEncoderConfig,
    encode_text,
    init_params,
)


def measure(d_model: int, d_emb: int, stream_dim: int, n_images: int, reps: int) -> dict:
    dims = {s: stream_dim for s in IMAGE_STREAMS + TEXT_STREAMS + (PHRASE_STREAM,)}
    image_cfg = ImageEncoderConfig(d_model=d_model, d_emb=d_emb, d_sgm=d_model, d_sog=d_model, d_h=d_model)
    text_cfg = TextEncoderConfig(d_model=d_model, d_emb=d_emb)
    pset = init_params(image_cfg, text_cfg, dims, seed=0)
    rng = np.random.default_rng(0)
    record = FeatureRecord(
        streams={s: rng.normal(size=stream_dim).astype(np.float32) for s in TEXT_STREAMS},
        phrases=tuple(rng.normal(size=stream_dim).astype(np.float32) for _ in range(3)),
    )
    cached = rng.normal(size=(n_images, d_emb)).astype(np.float32)
    cached /= np.linalg.norm(cached, axis=1, keepdims=True)

    def rank_once():
        with no_grad():
            h = encode_text(pset, record, "target").data
        return np.argsort(-(cached @ (h / np.linalg.norm(h))))

    rank_once()  # warm caches
    timings = []
    for _ in range(reps):
        t0 = time.perf_counter()
        rank_once()
        timings.append(time.perf_counter() - t0)
    timings.sort()
    return {
        "median_ms": 1e3 * timings[len(timings) // 2],
        "p90_ms": 1e3 * timings[int(len(timings) * 0.9)],
        "max_ms": 1e3 * timings[-1],
    }


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--widths", default="64,128,256,512", help="comma-separated d_model values")
    ap.add_argument("--stream-dim", type=int, default=512)
    ap.add_argument("--images", type=int, default=100)
    ap.add_argument("--reps", type=int, default=50)
    args = ap.parse_args()

    print(f"{'d_model':>8} {'d_emb':>6} {'median':>9} {'p90':>9} {'max':>9}")
    for d_model in (int(w) for w in args.widths.split(",")):
        d_emb = 2 * d_model
        r = measure(d_model, d_emb, args.stream_dim, args.images, args.reps)
        print(f"{d_model:>8} {d_emb:>6} {r['median_ms']:>7.2f}ms {r['p90_ms']:>7.2f}ms {r['max_ms']:>7.2f}ms")
    return 0


if __name__ == "__main__":
    sys.exit(main())
