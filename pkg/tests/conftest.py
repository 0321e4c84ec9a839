import numpy as np
import pytest

from covpipe.phantoms import Ellipsoid, PhantomSpec, generate_phantom
from covpipe.volume_io import COVID, NON_COVID, Volume


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_volume(shape_zyx, seed=0, scan_id="v"):
    r = np.random.default_rng(seed)
    return Volume(scan_id, r.random(shape_zyx, dtype=np.float32))


def symmetric_spec(noise=0.0, lesions=0, dims=(96, 96, 64)):
    nx, ny, nz = dims
    left = Ellipsoid((nx * 0.3 - 0.5, ny / 2, nz / 2), (nx * 0.17, ny * 0.3, nz * 0.3))
    right = Ellipsoid((nx - 1 - (nx * 0.3 - 0.5), ny / 2, nz / 2), (nx * 0.17, ny * 0.3, nz * 0.3))
    return PhantomSpec(
        seed=5, nx=nx, ny=ny, nz=nz, left_ellipsoid=left, right_ellipsoid=right,
        lesion_count=lesions, label=COVID if lesions else NON_COVID, noise_sigma=noise,
    )


@pytest.fixture
def small_phantom():
    return generate_phantom(symmetric_spec(), "small")
