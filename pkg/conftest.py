"""
Root pytest configuration: doctests in src/halomd were written against the
NumPy 1.x scalar repr; run them under NumPy's legacy print mode on NumPy 2.
"""

import numpy as np
import pytest


@pytest.fixture(autouse=True)
def _numpy_legacy_repr(request):
    if not isinstance(request.node, pytest.DoctestItem) or int(np.__version__.split(".")[0]) < 2:
        yield
        return
    saved = np.get_printoptions()
    np.set_printoptions(legacy="1.25")
    try:
        yield
    finally:
        np.set_printoptions(**saved)
