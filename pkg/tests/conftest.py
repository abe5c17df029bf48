import pytest

from maskood.toydata import toy_imageset


@pytest.fixture(scope="session")
def tiny_set():
    """48 toy images, 2 classes."""
    return toy_imageset(2, 48, 0)
