"""Offline feature extraction for the cross-modal retrieval engine.

The engine trains on precomputed feature streams; this package produces
them. It reads a manifest of raw samples (image + instruction + mode +
environment + ground-truth pairing), runs each through frozen pretrained
models (vision transformer, multimodal encoder, segmentation, MLLM, text
embedding, LLM), and writes a dataset directory in the engine's format.
No model is trained or fine-tuned here, and nothing imports the engine:
the only contract between the two packages is the documented file format.
"""

from ._version import __version__
from .config import ExtractorConfig, load_config
from .export import export_dataset, run_extraction
from .marks import mark_segments
from .samples import load_raw_manifest
from .services import HttpConfig, HttpServices, ServiceError, StubServices, ThrottledServices
from .streams import extract_image_streams, extract_text_streams

__all__ = [
    "__version__",
    "ExtractorConfig",
    "load_config",
    "load_raw_manifest",
    "mark_segments",
    "extract_image_streams",
    "extract_text_streams",
    "run_extraction",
    "export_dataset",
    "ServiceError",
    "StubServices",
    "HttpServices",
    "HttpConfig",
    "ThrottledServices",
]
