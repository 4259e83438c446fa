import numpy as np
import pytest

from shadowsdf import fields as F
from shadowsdf import scenes as S


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def sphere_plane():
    """Analytic sphere-on-plane scene, its 64x64 camera and the composed field."""
    scene = S.builtin_scene("sphere-plane")
    camera = S._camera_for(64, 64)
    field = F.SceneField(S.scene_objects(scene), S.scene_ground_plane(scene))
    return scene, camera, field


@pytest.fixture(scope="session")
def silhouette_truth(sphere_plane):
    """Object coverage of every pixel from 16x16 sub-rays and the silhouette mask."""
    scene, camera, _ = sphere_plane
    uv = camera.pixel_centers()
    k = 16
    sub = (np.arange(k) + 0.5) / k - 0.5
    su, sv = np.meshgrid(sub, sub)
    offs = np.stack([su.ravel(), sv.ravel()], axis=-1)
    t, _, _, on_ground = S.oracle_hits(scene, camera, (uv[:, None] + offs[None]).reshape(-1, 2))
    cov = ((~on_ground) & np.isfinite(t)).reshape(len(uv), -1).mean(axis=1)
    return cov, (cov > 0) & (cov < 1)
