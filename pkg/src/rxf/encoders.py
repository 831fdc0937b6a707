"""Fusion encoders mapping precomputed feature streams into a shared space.

Image side: the caption embedding is projected, fused with the overlay
feature stream, the latent stream is projected, and the four resulting
stream tokens run through a small transformer; the mean-pooled output goes
through a projection head. Text side: phrase vectors run through their own
transformer and are mean-pooled (zero vector when a query has no phrases),
then concatenated with the two instruction streams and a learned
mode embedding before the projection head.

Both sides are pure functions of (ParamSet, records); the ParamSet's meta
carries the configs so a checkpoint alone can rebuild the forward pass.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .autograd import Tensor, concat, stack
from .datastore import MODES, FeatureRecord
from .layers import layer_norm, linear, masked_mean, mlp2, transformer_block
from .optim import ParamSet

IMAGE_STREAMS = ("v_L", "v_M", "v_lat", "v_GS", "e_SGM")
TEXT_STREAMS = ("t_orig", "t_std")
PHRASE_STREAM = "phrase"

_BLOCK_KEYS = ("ln1_g", "ln1_b", "wq", "wk", "wv", "wo", "ln2_g", "ln2_b", "ffn_w1", "ffn_b1", "ffn_w2", "ffn_b2")


@dataclass(frozen=True)
class ImageEncoderConfig:
    d_model: int = 256
    n_heads: int = 4
    n_blocks: int = 1
    d_emb: int = 512
    d_sgm: int = 256  # projected caption-embedding width
    d_sog: int = 256  # fused overlay feature width
    d_h: int = 256  # projected latent-stream width

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not isinstance(value, int) or value <= 0:
                raise ValueError(f"image encoder config field {name} must be a positive int, got {value!r}")
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"head count {self.n_heads} does not divide model width {self.d_model}")


@dataclass(frozen=True)
class TextEncoderConfig:
    d_model: int = 256
    n_heads: int = 4
    n_blocks: int = 1
    d_emb: int = 512
    d_mode: int = 32  # learned mode-embedding width

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not isinstance(value, int) or value <= 0:
                raise ValueError(f"text encoder config field {name} must be a positive int, got {value!r}")
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"head count {self.n_heads} does not divide model width {self.d_model}")


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)


class _Builder:
    def __init__(self, seed: int, dtype):
        self.rng = np.random.default_rng(seed)
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Tensor] = {}

    def weight(self, name: str, fan_in: int, fan_out: int) -> None:
        self.params[name] = Tensor(_glorot(self.rng, fan_in, fan_out, self.dtype), requires_grad=True)

    def bias(self, name: str, width: int) -> None:
        self.params[name] = Tensor(np.zeros(width, dtype=self.dtype), requires_grad=True)

    def ones(self, name: str, width: int) -> None:
        self.params[name] = Tensor(np.ones(width, dtype=self.dtype), requires_grad=True)

    def normal(self, name: str, shape: tuple[int, ...], scale: float) -> None:
        self.params[name] = Tensor((self.rng.normal(0.0, scale, size=shape)).astype(self.dtype), requires_grad=True)

    def mlp(self, prefix: str, d_in: int, d_out: int) -> None:
        # two-layer GELU head, hidden width equal to output width
        self.weight(f"{prefix}.w1", d_in, d_out)
        self.bias(f"{prefix}.b1", d_out)
        self.weight(f"{prefix}.w2", d_out, d_out)
        self.bias(f"{prefix}.b2", d_out)

    def block(self, prefix: str, d_model: int) -> None:
        self.ones(f"{prefix}.ln1_g", d_model)
        self.bias(f"{prefix}.ln1_b", d_model)
        for w in ("wq", "wk", "wv", "wo"):
            self.weight(f"{prefix}.{w}", d_model, d_model)
        self.ones(f"{prefix}.ln2_g", d_model)
        self.bias(f"{prefix}.ln2_b", d_model)
        self.weight(f"{prefix}.ffn_w1", d_model, d_model)
        self.bias(f"{prefix}.ffn_b1", d_model)
        self.weight(f"{prefix}.ffn_w2", d_model, d_model)
        self.bias(f"{prefix}.ffn_b2", d_model)


def init_params(
    image_config: ImageEncoderConfig,
    text_config: TextEncoderConfig,
    stream_dims: dict[str, int],
    seed: int = 0,
    dtype=np.float32,
) -> ParamSet:
    """Create all trainable weights with a fixed creation order per seed."""
    if image_config.d_emb != text_config.d_emb:
        raise ValueError(
            f"embedding widths differ: image {image_config.d_emb} vs text {text_config.d_emb}"
        )
    needed = IMAGE_STREAMS + TEXT_STREAMS + (PHRASE_STREAM,)
    missing = [s for s in needed if s not in stream_dims]
    if missing:
        raise ValueError(f"stream dims missing for {missing}")
    ic, tc = image_config, text_config
    b = _Builder(seed, dtype)

    b.mlp("img.sgm", stream_dims["e_SGM"], ic.d_sgm)
    b.mlp("img.sog", stream_dims["v_GS"] + ic.d_sgm, ic.d_sog)
    b.mlp("img.lat", stream_dims["v_lat"], ic.d_h)
    b.weight("img.tok_L.w", stream_dims["v_L"], ic.d_model)
    b.bias("img.tok_L.b", ic.d_model)
    b.weight("img.tok_M.w", stream_dims["v_M"], ic.d_model)
    b.bias("img.tok_M.b", ic.d_model)
    b.weight("img.tok_H.w", ic.d_h, ic.d_model)
    b.bias("img.tok_H.b", ic.d_model)
    b.weight("img.tok_S.w", ic.d_sog, ic.d_model)
    b.bias("img.tok_S.b", ic.d_model)
    for i in range(ic.n_blocks):
        b.block(f"img.blk{i}", ic.d_model)
    b.ones("img.ln_f.g", ic.d_model)
    b.bias("img.ln_f.b", ic.d_model)
    b.mlp("img.out", ic.d_model, ic.d_emb)

    b.weight("txt.phr_in.w", stream_dims[PHRASE_STREAM], tc.d_model)
    b.bias("txt.phr_in.b", tc.d_model)
    for i in range(tc.n_blocks):
        b.block(f"txt.blk{i}", tc.d_model)
    b.ones("txt.ln_f.g", tc.d_model)
    b.bias("txt.ln_f.b", tc.d_model)
    b.normal("txt.mode_emb", (len(MODES), tc.d_mode), 0.02)
    d_concat = stream_dims["t_orig"] + stream_dims["t_std"] + tc.d_model + tc.d_mode
    b.mlp("txt.out", d_concat, tc.d_emb)

    meta = {
        "image_encoder": asdict(image_config),
        "text_encoder": asdict(text_config),
        "stream_dims": dict(stream_dims),
        "seed": seed,
        "dtype": np.dtype(dtype).name,
    }
    return ParamSet(params=b.params, meta=meta)


def _configs(pset: ParamSet) -> tuple[ImageEncoderConfig, TextEncoderConfig, dict[str, int], np.dtype]:
    meta = pset.meta
    return (
        ImageEncoderConfig(**meta["image_encoder"]),
        TextEncoderConfig(**meta["text_encoder"]),
        meta["stream_dims"],
        np.dtype(meta["dtype"]),
    )


def _block_params(pset: ParamSet, prefix: str) -> dict[str, Tensor]:
    return {k: pset.params[f"{prefix}.{k}"] for k in _BLOCK_KEYS}


def _stack_stream(records: Sequence[FeatureRecord], stream: str, dim: int, dtype) -> Tensor:
    rows = []
    for i, rec in enumerate(records):
        vec = rec.streams.get(stream)
        if vec is None:
            raise ValueError(f"record {i} is missing stream '{stream}'")
        if vec.shape != (dim,):
            raise ValueError(f"record {i} stream '{stream}' has shape {vec.shape}; expected ({dim},)")
        rows.append(np.asarray(vec, dtype=dtype))
    return Tensor(np.stack(rows))


def encode_image_batch(pset: ParamSet, records: Sequence[FeatureRecord]) -> Tensor:
    """Embed image records, returning [batch, d_emb]."""
    if not records:
        raise ValueError("empty image batch")
    ic, _, dims, dtype = _configs(pset)
    p = pset.params
    streams = {s: _stack_stream(records, s, dims[s], dtype) for s in IMAGE_STREAMS}

    v_sgm = mlp2(streams["e_SGM"], p["img.sgm.w1"], p["img.sgm.b1"], p["img.sgm.w2"], p["img.sgm.b2"])
    sog_in = concat([streams["v_GS"], v_sgm], axis=-1)
    h_sog = mlp2(sog_in, p["img.sog.w1"], p["img.sog.b1"], p["img.sog.w2"], p["img.sog.b2"])
    v_h = mlp2(streams["v_lat"], p["img.lat.w1"], p["img.lat.b1"], p["img.lat.w2"], p["img.lat.b2"])

    tokens = stack(
        [
            linear(streams["v_L"], p["img.tok_L.w"], p["img.tok_L.b"]),
            linear(streams["v_M"], p["img.tok_M.w"], p["img.tok_M.b"]),
            linear(v_h, p["img.tok_H.w"], p["img.tok_H.b"]),
            linear(h_sog, p["img.tok_S.w"], p["img.tok_S.b"]),
        ],
        axis=1,
    )
    x = tokens
    for i in range(ic.n_blocks):
        x = transformer_block(x, _block_params(pset, f"img.blk{i}"), ic.n_heads)
    x = layer_norm(x, p["img.ln_f.g"], p["img.ln_f.b"])
    pooled = x.mean(axis=1)
    return mlp2(pooled, p["img.out.w1"], p["img.out.b1"], p["img.out.w2"], p["img.out.b2"])


def encode_text_batch(pset: ParamSet, records: Sequence[FeatureRecord], modes: Sequence[str]) -> Tensor:
    """Embed query records under the given modes, returning [batch, d_emb]."""
    if not records:
        raise ValueError("empty text batch")
    if len(records) != len(modes):
        raise ValueError(f"{len(records)} records but {len(modes)} modes")
    _, tc, dims, dtype = _configs(pset)
    p = pset.params
    batch = len(records)

    mode_idx = []
    for i, mode in enumerate(modes):
        if mode not in MODES:
            raise ValueError(f"record {i} has invalid mode '{mode}'")
        mode_idx.append(MODES.index(mode))

    d_phrase = dims[PHRASE_STREAM]
    max_p = max(len(rec.phrases) for rec in records)
    if max_p > 0:
        padded = np.zeros((batch, max_p, d_phrase), dtype=dtype)
        mask = np.zeros((batch, max_p), dtype=bool)
        for i, rec in enumerate(records):
            for k, vec in enumerate(rec.phrases):
                if vec.shape != (d_phrase,):
                    raise ValueError(
                        f"record {i} phrase {k} has shape {vec.shape}; expected ({d_phrase},)"
                    )
                padded[i, k] = vec
                mask[i, k] = True
        x = linear(Tensor(padded), p["txt.phr_in.w"], p["txt.phr_in.b"])
        for i in range(tc.n_blocks):
            x = transformer_block(x, _block_params(pset, f"txt.blk{i}"), tc.n_heads, key_mask=mask)
        x = layer_norm(x, p["txt.ln_f.g"], p["txt.ln_f.b"])
        pooled = masked_mean(x, mask)
    else:
        pooled = Tensor(np.zeros((batch, tc.d_model), dtype=dtype))

    mode_vecs = p["txt.mode_emb"].take_rows(np.asarray(mode_idx, dtype=np.int64))
    z = concat(
        [
            _stack_stream(records, "t_orig", dims["t_orig"], dtype),
            _stack_stream(records, "t_std", dims["t_std"], dtype),
            pooled,
            mode_vecs,
        ],
        axis=-1,
    )
    return mlp2(z, p["txt.out.w1"], p["txt.out.b1"], p["txt.out.w2"], p["txt.out.b2"])


def encode_image(pset: ParamSet, record: FeatureRecord) -> Tensor:
    """Embed one image record, returning a d_emb vector."""
    out = encode_image_batch(pset, [record])
    return out.reshape(out.shape[1])


def encode_text(pset: ParamSet, record: FeatureRecord, mode: str) -> Tensor:
    """Embed one query record under a mode, returning a d_emb vector."""
    out = encode_text_batch(pset, [record], [mode])
    return out.reshape(out.shape[1])
