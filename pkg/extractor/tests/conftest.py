import pytest

from extract_helpers import TINY_DIMS
from rxf_extract.config import ExtractorConfig
from rxf_extract.services import StubServices


@pytest.fixture
def tiny_config():
    return ExtractorConfig(dims=dict(TINY_DIMS))


@pytest.fixture
def stub(tiny_config):
    return StubServices(tiny_config)
