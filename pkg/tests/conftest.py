import numpy as np
import pytest

from sparseconv.core import SparseTensor


def random_coords(rng, boundary, occupancy, batch_size=1):
    """Unique coordinate rows covering roughly `occupancy` of the box."""
    cells = batch_size * int(np.prod(boundary))
    n = max(1, int(cells * occupancy))
    keys = rng.choice(cells, size=n, replace=False)
    coords = np.empty((n, 1 + len(boundary)), dtype=np.int64)
    rem = np.sort(keys)
    for d in range(len(boundary) - 1, -1, -1):
        coords[:, d + 1] = rem % boundary[d]
        rem = rem // boundary[d]
    coords[:, 0] = rem
    return coords


def random_tensor(rng, boundary, occupancy, channels, batch_size=1):
    coords = random_coords(rng, boundary, occupancy, batch_size)
    features = rng.standard_normal((coords.shape[0], channels)).astype(np.float32)
    return SparseTensor(coords, features, stride=1, boundary=boundary,
                        batch_size=batch_size)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
