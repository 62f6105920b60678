import logging

import pytest

from src.config import get_settings
from src.models.spec import GeneratorSpec, load_model

from helpers import model_path


@pytest.fixture(autouse=True)
def _default_settings(monkeypatch):
    monkeypatch.delenv("MEANFIELD_SETTINGS", raising=False)
    get_settings.cache_clear()
    yield
    get_settings.cache_clear()


@pytest.fixture(autouse=True)
def _quiet_pandera():
    logging.getLogger("pandera").setLevel(logging.WARNING)


@pytest.fixture
def model():
    """Load a bundled model by name, e.g. model("mm1")."""

    def _load(name: str) -> GeneratorSpec:
        return load_model(model_path(name))

    return _load
