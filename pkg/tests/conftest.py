import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from adagran.sparse_tensor import CooTensor, SliceMatrix  # noqa: E402


def from_dense_slices(slices):
    """Tensor whose k-th frontal slice is ``slices[k]``."""
    return CooTensor.from_dense(np.stack(slices, axis=2))


def slice_from_dense(M, source_range=(0, 0)):
    M = np.asarray(M, dtype=float)
    r, c = np.nonzero(M)
    return SliceMatrix.from_triplets(M.shape, r, c, M[r, c], source_range)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
