import numpy as np
import pytest

from motfield import geometry as geo
from motfield import scenegen as sg


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def small_K():
    return geo.Intrinsics(fx=40.0, fy=40.0, cx=31.5, cy=23.5)


def tiny_scene(seed=1, ego=None, objects=None, width=64, height=48):
    """Small wide-FOV scene used across warp/optimize tests."""
    K = geo.Intrinsics(fx=40.0, fy=40.0, cx=(width - 1) / 2, cy=(height - 1) / 2)
    if ego is None:
        ego = geo.RigidMotion(np.array([0.004, -0.008, 0.002]),
                              np.array([0.12, -0.05, 0.25]))
    bg = sg.Background(point=(0.0, 0.0, 11.0), normal=(0.12, -0.08, -1.0),
                       texture=sg.Texture(base=(0.5, 0.5, 0.55), contrast=0.7,
                                          scale=0.35, seed=seed * 10 + 1))
    if objects is None:
        objects = (
            sg.SceneObject(center=(-1.6, 0.9, 6.0), size=(1.8, 1.6, 1.0),
                           height_m=1.6,
                           texture=sg.Texture(base=(0.7, 0.45, 0.3),
                                              contrast=0.7, scale=0.6,
                                              seed=seed * 10 + 2)),
            sg.SceneObject(center=(2.2, -0.7, 8.0), size=(2.2, 2.0, 1.2),
                           height_m=2.0,
                           texture=sg.Texture(base=(0.35, 0.55, 0.7),
                                              contrast=0.7, scale=0.5,
                                              seed=seed * 10 + 3)),
        )
    return sg.Scene(width=width, height=height, K=K, ego=ego,
                    background=bg, objects=tuple(objects), seed=seed)


@pytest.fixture(scope="session")
def rendered_scene():
    return sg.render(tiny_scene())
