"""Per-sample feature extraction.

An image yields five streams: a pure-vision embedding (v_L), a multimodal
image embedding (v_M), the pooled MLLM latent under a describe prompt
(v_lat), the multimodal embedding of the image with segment marks drawn on
(v_GS), and a text embedding of a dense caption the MLLM writes from the
clean and marked views together (e_SGM).

An instruction yields two sentence streams (t_orig on the raw text, t_std on
a normalized rewrite) plus per-role phrase vectors naming the object to move
and where it goes.
"""

from __future__ import annotations

import logging

import numpy as np

from .config import MODES, ExtractorConfig
from .marks import mark_segments
from .services import ModelServices

log = logging.getLogger(__name__)


def _checked(vec: np.ndarray, dim: int, stream: str) -> np.ndarray:
    vec = np.asarray(vec, dtype=np.float32).reshape(-1)
    if vec.shape != (dim,):
        raise ValueError(f"{stream}: expected dim {dim}, got shape {vec.shape}")
    if not np.all(np.isfinite(vec)):
        raise ValueError(f"{stream}: non-finite values")
    return vec


def extract_image_streams(
    image: np.ndarray, services: ModelServices, config: ExtractorConfig
) -> dict[str, np.ndarray]:
    """All five image-side streams for one RGB image."""
    dims = config.dims
    streams = {
        "v_L": _checked(services.vision_embed(image), dims["v_L"], "v_L"),
        "v_M": _checked(services.multimodal_embed_image(image), dims["v_M"], "v_M"),
        "v_lat": _checked(
            services.mllm_latent(image, config.describe_prompt), dims["v_lat"], "v_lat"
        ),
    }

    masks = services.segment(image)
    marked = mark_segments(image, masks)
    streams["v_GS"] = _checked(
        services.multimodal_embed_image(marked.image), dims["v_GS"], "v_GS"
    )

    # dense caption reads both views: clean image first, marked second
    caption = services.mllm_caption([image, marked.image], config.caption_prompt)
    if not caption.strip():
        raise ValueError("e_SGM: empty caption")
    streams["e_SGM"] = _checked(services.text_embed(caption), dims["e_SGM"], "e_SGM")
    return streams


def extract_text_streams(
    instruction: str,
    services: ModelServices,
    config: ExtractorConfig,
    modes: tuple[str, ...] = MODES,
) -> tuple[dict[str, np.ndarray], dict[str, list[np.ndarray]]]:
    """Sentence streams plus per-mode phrase vectors for one instruction.

    Returns (sentence, phrases) where sentence maps t_orig/t_std to vectors
    and phrases maps each requested mode to phrase vectors in LLM order.
    """
    dims = config.dims
    sentence = {
        "t_orig": _checked(
            services.multimodal_embed_text(instruction), dims["t_orig"], "t_orig"
        )
    }

    rewrite = services.llm_rewrite(instruction)
    if not rewrite.strip():
        raise ValueError("t_std: empty rewrite")
    sentence["t_std"] = _checked(
        services.multimodal_embed_text(rewrite), dims["t_std"], "t_std"
    )

    phrases: dict[str, list[np.ndarray]] = {}
    for mode in modes:
        if mode not in MODES:
            raise ValueError(f"unknown mode '{mode}'")
        texts = services.llm_phrases(instruction, mode)
        if not texts:
            log.warning("no %s phrases for %r", mode, instruction)
        phrases[mode] = [
            _checked(services.multimodal_embed_text(p), dims["phrase"], f"phrase/{mode}")
            for p in texts
        ]
    return sentence, phrases
