import pytest

SEED = 42


@pytest.fixture
def seed():
    return SEED
