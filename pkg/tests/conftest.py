import numpy as np
import pytest

from demcorrect import Grid

NODATA = -9999.0


def make_grid(values, cellsize=1.0, xll=0.0, yll=0.0, nodata=NODATA) -> Grid:
    arr = np.asarray(values, dtype=np.float64)
    return Grid(arr.shape[1], arr.shape[0], xll, yll, cellsize, nodata, arr)


def plane_grid(n, fx=0.0, fy=0.0, base=0.0, cellsize=1.0) -> Grid:
    """z = base + fx*col + fy*row with row 0 northernmost."""
    cols = np.arange(n, dtype=np.float64)
    rows = np.arange(n, dtype=np.float64)
    z = base + fx * cols[None, :] + fy * rows[:, None]
    return make_grid(z, cellsize=cellsize)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
