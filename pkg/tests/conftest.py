import pytest

from fsra import autodiff as ad


@pytest.fixture(autouse=True)
def fresh_tape():
    # forward-only tests leave nodes behind; keep tests independent
    ad.reset_tape()
    yield
    ad.reset_tape()
