"""Frozen model services: the protocol, an HTTP client, and an offline stub.

Every upstream model is reached through one of seven calls. The HTTP client
speaks to whatever serves the models (an OpenAI-compatible endpoint for chat
and text embeddings, plain JSON POST for the image-side services). The stub
derives every output deterministically from a content hash, so the whole
pipeline runs offline and byte-reproducibly in tests.

A failing service raises ServiceError; the extraction runner skips that
sample and logs it. Nothing is ever zero-filled.
"""

from __future__ import annotations

import base64
import hashlib
import io
import json
import logging
import re
import threading
import time
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np
import requests
from PIL import Image

from .config import ExtractorConfig

log = logging.getLogger(__name__)


class ServiceError(Exception):
    """A model service failed or answered nonsense."""


class ModelServices(Protocol):
    def vision_embed(self, image: np.ndarray) -> np.ndarray: ...  # v_L

    def multimodal_embed_image(self, image: np.ndarray) -> np.ndarray: ...  # v_M, v_GS

    def multimodal_embed_text(self, text: str) -> np.ndarray: ...  # t_orig, t_std, phrases

    def mllm_latent(self, image: np.ndarray, prompt: str) -> np.ndarray: ...  # v_lat

    def mllm_caption(self, images: list[np.ndarray], prompt: str) -> str: ...

    def text_embed(self, text: str) -> np.ndarray: ...  # e_SGM

    def segment(self, image: np.ndarray) -> list[np.ndarray]: ...

    def llm_rewrite(self, instruction: str) -> str: ...

    def llm_phrases(self, instruction: str, mode: str) -> list[str]: ...


# -- deterministic offline stub ---------------------------------------------


def _digest(*parts) -> bytes:
    h = hashlib.sha256()
    for part in parts:
        if isinstance(part, np.ndarray):
            h.update(str(part.shape).encode())
            h.update(np.ascontiguousarray(part).tobytes())
        else:
            h.update(str(part).encode("utf-8"))
        h.update(b"\x1f")
    return h.digest()


def _hash_vector(dim: int, *parts) -> np.ndarray:
    seed = np.frombuffer(_digest(*parts)[:16], dtype=np.uint64)
    return np.random.default_rng(seed).normal(size=dim).astype(np.float32)


_CARRY = re.compile(r"(?:carry|take|bring|move|put)\s+(.+?)\s+(?:to|onto|into|on)\s+(.+?)[.!]?$", re.IGNORECASE)


def _split_instruction(instruction: str) -> tuple[str, str]:
    m = _CARRY.search(instruction.strip())
    if m:
        return m.group(1).strip(), m.group(2).strip()
    return instruction.strip().rstrip(".!"), "the indicated place"


class StubServices:
    """Hash-seeded stand-ins for every frozen model.

    Identical inputs give identical outputs (the frozen-model determinism
    the pipeline relies on) and any change to the input changes them.
    """

    def __init__(self, config: ExtractorConfig, n_masks: int = 3):
        self.dims = dict(config.dims)
        self.n_masks = n_masks

    def vision_embed(self, image: np.ndarray) -> np.ndarray:
        return _hash_vector(self.dims["v_L"], "vit", image)

    def multimodal_embed_image(self, image: np.ndarray) -> np.ndarray:
        return _hash_vector(self.dims["v_M"], "mm-img", image)

    def multimodal_embed_text(self, text: str) -> np.ndarray:
        return _hash_vector(self.dims["t_orig"], "mm-txt", text)

    def mllm_latent(self, image: np.ndarray, prompt: str) -> np.ndarray:
        return _hash_vector(self.dims["v_lat"], "mllm-latent", image, prompt)

    def mllm_caption(self, images: list[np.ndarray], prompt: str) -> str:
        return f"a scene with details {_digest(prompt, *images).hex()[:12]}"

    def text_embed(self, text: str) -> np.ndarray:
        return _hash_vector(self.dims["e_SGM"], "embed", text)

    def segment(self, image: np.ndarray) -> list[np.ndarray]:
        h, w = image.shape[:2]
        bands = np.array_split(np.arange(w), self.n_masks)
        masks = []
        for cols in bands:
            mask = np.zeros((h, w), dtype=bool)
            mask[:, cols] = True
            masks.append(mask)
        return masks

    def llm_rewrite(self, instruction: str) -> str:
        target, receptacle = _split_instruction(instruction)
        return f"Carry {target} to {receptacle}."

    def llm_phrases(self, instruction: str, mode: str) -> list[str]:
        target, receptacle = _split_instruction(instruction)
        return [target] if mode == "target" else [receptacle]


# -- HTTP client --------------------------------------------------------------


@dataclass(frozen=True)
class HttpConfig:
    """Endpoints of the served models. chat_url and embed_url follow the
    OpenAI wire shapes; the image-side endpoints take {"image": <base64 png>,
    ...} and answer {"embedding"|"latent"|"masks": ...}."""

    chat_url: str
    embed_url: str
    vision_url: str
    multimodal_image_url: str
    multimodal_text_url: str
    latent_url: str
    segment_url: str
    mllm_model: str = "llava-v1.6-mistral-7b"
    llm_model: str = "gpt-4o"
    embed_model: str = "text-embedding-3-large"
    timeout_s: float = 60.0
    retries: int = 3
    headers: dict[str, str] = field(default_factory=dict)


def _png_b64(image: np.ndarray) -> str:
    buf = io.BytesIO()
    Image.fromarray(image).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


class HttpServices:
    def __init__(self, http: HttpConfig, config: ExtractorConfig):
        self.http = http
        self.config = config

    def _post(self, url: str, payload: dict) -> dict:
        last = None
        for attempt in range(self.http.retries):
            if attempt:
                time.sleep(2.0**attempt)
            try:
                resp = requests.post(url, json=payload, headers=self.http.headers, timeout=self.http.timeout_s)
            except requests.RequestException as err:
                last = str(err)
                continue
            if resp.status_code >= 500:
                last = f"HTTP {resp.status_code}"
                continue
            if resp.status_code != 200:
                raise ServiceError(f"{url} answered HTTP {resp.status_code}: {resp.text[:200]}")
            return resp.json()
        raise ServiceError(f"{url} failed after {self.http.retries} attempts: {last}")

    def _chat(self, model: str, content) -> str:
        payload = {
            "model": model,
            "messages": [{"role": "user", "content": content}],
            "temperature": 0.0 if self.config.greedy else 1.0,
        }
        doc = self._post(self.http.chat_url, payload)
        try:
            return doc["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError):
            raise ServiceError(f"malformed chat response: {json.dumps(doc)[:200]}") from None

    def _vector(self, url: str, payload: dict, key: str) -> np.ndarray:
        doc = self._post(url, payload)
        if key not in doc:
            raise ServiceError(f"{url} response lacks '{key}'")
        return np.asarray(doc[key], dtype=np.float32)

    def vision_embed(self, image: np.ndarray) -> np.ndarray:
        return self._vector(self.http.vision_url, {"image": _png_b64(image)}, "embedding")

    def multimodal_embed_image(self, image: np.ndarray) -> np.ndarray:
        return self._vector(self.http.multimodal_image_url, {"image": _png_b64(image)}, "embedding")

    def multimodal_embed_text(self, text: str) -> np.ndarray:
        return self._vector(self.http.multimodal_text_url, {"input": text}, "embedding")

    def mllm_latent(self, image: np.ndarray, prompt: str) -> np.ndarray:
        payload = {
            "model": self.http.mllm_model,
            "image": _png_b64(image),
            "prompt": prompt,
            "layer": self.config.latent_layer,
            "pool": self.config.latent_pool,
        }
        return self._vector(self.http.latent_url, payload, "latent")

    def mllm_caption(self, images: list[np.ndarray], prompt: str) -> str:
        content = [{"type": "text", "text": prompt}] + [
            {"type": "image_url", "image_url": {"url": f"data:image/png;base64,{_png_b64(img)}"}}
            for img in images
        ]
        return self._chat(self.http.mllm_model, content)

    def text_embed(self, text: str) -> np.ndarray:
        doc = self._post(self.http.embed_url, {"model": self.http.embed_model, "input": text})
        try:
            return np.asarray(doc["data"][0]["embedding"], dtype=np.float32)
        except (KeyError, IndexError, TypeError):
            raise ServiceError(f"malformed embedding response: {json.dumps(doc)[:200]}") from None

    def segment(self, image: np.ndarray) -> list[np.ndarray]:
        doc = self._post(self.http.segment_url, {"image": _png_b64(image)})
        if "masks" not in doc or not doc["masks"]:
            raise ServiceError("segmentation returned no masks")
        return [np.asarray(m, dtype=bool) for m in doc["masks"]]

    def llm_rewrite(self, instruction: str) -> str:
        prompt = f"{self.config.rewrite_prompt}\n\nInstruction: {instruction}"
        return self._chat(self.http.llm_model, prompt).strip()

    def llm_phrases(self, instruction: str, mode: str) -> list[str]:
        prompt = f"{self.config.phrases_prompt.format(role=mode)}\n\nInstruction: {instruction}"
        text = self._chat(self.http.llm_model, prompt)
        try:
            phrases = json.loads(text)
        except json.JSONDecodeError:
            raise ServiceError(f"phrase list is not JSON: {text[:200]}") from None
        if not isinstance(phrases, list) or not all(isinstance(p, str) for p in phrases):
            raise ServiceError(f"phrase list has the wrong shape: {text[:200]}")
        return phrases


# -- rate limiting -------------------------------------------------------------

# which protocol method talks to which external service
_SERVICE_OF = {
    "vision_embed": "vision",
    "multimodal_embed_image": "multimodal",
    "multimodal_embed_text": "multimodal",
    "mllm_latent": "mllm",
    "mllm_caption": "mllm",
    "text_embed": "embedding",
    "segment": "segmentation",
    "llm_rewrite": "llm",
    "llm_phrases": "llm",
}


class ThrottledServices:
    """Caps in-flight calls per external service while samples run in
    parallel; the budget is per service, not per method."""

    def __init__(self, inner, budget: int = 4, budgets: dict[str, int] | None = None):
        if budget < 1:
            raise ValueError(f"budget must be >= 1, got {budget}")
        self._inner = inner
        limits = {name: budget for name in set(_SERVICE_OF.values())}
        limits.update(budgets or {})
        self._gates = {name: threading.BoundedSemaphore(limit) for name, limit in limits.items()}

    def __getattr__(self, name: str):
        service = _SERVICE_OF.get(name)
        if service is None:
            return getattr(self._inner, name)
        method = getattr(self._inner, name)
        gate = self._gates[service]

        def call(*args, **kwargs):
            with gate:
                return method(*args, **kwargs)

        return call
