import pytest

from incrtts.domain import PipelineConfig
from incrtts.frontend import default_lexicon
from incrtts.harness import default_texts


@pytest.fixture(scope="session")
def cfg():
    return PipelineConfig()


@pytest.fixture(scope="session")
def lexicon():
    return default_lexicon()


@pytest.fixture(scope="session")
def texts():
    return default_texts()
