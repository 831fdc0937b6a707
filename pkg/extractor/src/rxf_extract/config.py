"""Extraction configuration: stream widths, prompt templates, decoding knobs."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path

IMAGE_STREAMS = ("v_L", "v_M", "v_lat", "v_GS", "e_SGM")
TEXT_STREAMS = ("t_orig", "t_std")
PHRASE_STREAM = "phrase"
ALL_STREAMS = IMAGE_STREAMS + TEXT_STREAMS + (PHRASE_STREAM,)
MODES = ("target", "receptacle")

# upstream model widths: vision transformer penultimate, multimodal joint
# space (shared by the text tower, so t_* and phrase match v_M), MLLM
# hidden state, and the embedding service
DEFAULT_DIMS = {
    "v_L": 1024,
    "v_M": 768,
    "v_lat": 4096,
    "v_GS": 768,
    "e_SGM": 3072,
    "t_orig": 768,
    "t_std": 768,
    "phrase": 768,
}

DESCRIBE_PROMPT = "Describe this indoor scene and the everyday objects visible in it."
CAPTION_PROMPT = (
    "The second image repeats the first with numeric marks placed on segmented "
    "regions. Write a dense caption naming what each marked region shows."
)
REWRITE_PROMPT = (
    'Rewrite the instruction in exactly the form "Carry A to B." where A names '
    "the object to fetch and B names the receptacle. Reply with the sentence only."
)
PHRASES_PROMPT = (
    "List the noun phrases of the instruction that name the {role}. "
    "Reply with a JSON array of strings and nothing else."
)


@dataclass(frozen=True)
class ExtractorConfig:
    """Everything a run needs besides service endpoints.

    The prompt texts are editable templates, not quotations of any upstream
    system. latent_layer/latent_pool pick which MLLM hidden state becomes
    v_lat (mean over response tokens of the final layer by default). greedy
    pins chat decoding to temperature 0 so repeated extraction of the same
    sample is reproducible.
    """

    dims: dict[str, int] = field(default_factory=lambda: dict(DEFAULT_DIMS))
    describe_prompt: str = DESCRIBE_PROMPT
    caption_prompt: str = CAPTION_PROMPT
    rewrite_prompt: str = REWRITE_PROMPT
    phrases_prompt: str = PHRASES_PROMPT
    latent_layer: str = "final"
    latent_pool: str = "mean"
    greedy: bool = True

    def __post_init__(self):
        missing = [s for s in ALL_STREAMS if s not in self.dims]
        if missing:
            raise ValueError(f"stream dims missing for {missing}")
        unknown = [s for s in self.dims if s not in ALL_STREAMS]
        if unknown:
            raise ValueError(f"unknown streams in dims: {unknown}")
        for name, dim in self.dims.items():
            if not isinstance(dim, int) or dim <= 0:
                raise ValueError(f"dim of stream {name} must be a positive int, got {dim!r}")
        if self.latent_pool not in ("mean", "last"):
            raise ValueError(f"latent_pool must be 'mean' or 'last', got {self.latent_pool!r}")


def load_config(path: str | Path) -> ExtractorConfig:
    """Read a config JSON; unknown keys fail loudly."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"extractor config not found: {path}")
    raw = json.loads(path.read_text())
    if not isinstance(raw, dict):
        raise ValueError(f"extractor config must be a JSON object, got {type(raw).__name__}")
    known = {f.name for f in fields(ExtractorConfig)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ValueError(f"unknown extractor config keys: {unknown}")
    if "dims" in raw:
        raw = {**raw, "dims": {**DEFAULT_DIMS, **raw["dims"]}}
    return ExtractorConfig(**raw)
