import numpy as np
import pytest

from gainscout.grid import GridSpec, UrbanWorld


def make_open_world(n=6, spacing=10.0, altitude=10.0):
    """A flat world with no buildings, n x n cells."""
    spec = GridSpec(
        length_m=n * spacing,
        width_m=n * spacing,
        height_m=60.0 if 60.0 % spacing == 0 else spacing * 6,
        spacing_m=spacing,
        pred_altitude_m=altitude,
        uav_altitude_m=altitude,
    )
    return UrbanWorld(spec=spec, heights=np.zeros((n, n)))


def make_random_world(rng, n=6, spacing=10.0, block_prob=0.2, altitude=10.0):
    """Random obstacle world; guaranteed to keep at least one flyable cell."""
    heights = np.where(rng.random((n, n)) < block_prob, 30.0, 0.0)
    heights[0, 0] = 0.0
    spec = GridSpec(
        length_m=n * spacing,
        width_m=n * spacing,
        height_m=spacing * max(6, int(np.ceil(30.0 / spacing))),
        spacing_m=spacing,
        pred_altitude_m=altitude,
        uav_altitude_m=altitude,
    )
    return UrbanWorld(spec=spec, heights=heights)


@pytest.fixture
def open_world():
    return make_open_world()
