import numpy as np
import pytest

from shadowsdf import diffengine as ad
from shadowsdf import fields as F
from shadowsdf import scenes as S
from shadowsdf.shadowrender import (LightBatch, LightSource, aggregate_boundary, alpha_from_sdf,
                                    incoming_radiance, light_at, sample_positions, shadow_loss)


def _ground_grid(scene, k=64, half=0.6):
    g = np.linspace(-half, half, k)
    X, Y = np.meshgrid(g, g)
    z = float(scene["ground"]["offset"])
    return np.stack([X.ravel(), Y.ravel(), np.full(X.size, z)], axis=-1)


# --------------------------------------------------------------------------
# lights

def test_point_light_inverse_square():
    light = LightSource.point([0.0, 0.0, 2.0], 4.0)
    l, L = light_at(light, np.zeros((1, 3)))
    assert np.allclose(l, [[0, 0, 1]]) and L[0] == pytest.approx(1.0)
    _, L2 = light_at(light, np.array([[0.0, 0.0, -2.0]]))
    assert L2[0] == pytest.approx(0.25)


def test_directional_light_passes_through():
    d = np.array([0.6, 0.0, 0.8])
    l, L = light_at(LightSource.directional(d, 1.5), np.zeros((4, 3)))
    assert np.allclose(l, d) and np.allclose(L, 1.5)


def test_light_errors():
    with pytest.raises(ValueError):
        light_at(LightSource.point([0.0, 0, 0], 1.0), np.zeros((1, 3)))
    with pytest.raises(ValueError):
        LightSource("directional", direction=[0.0, 0.0, 2.0])
    with pytest.raises(ValueError):
        LightSource.directional([0, 0, 1], -1.0)


def test_light_batch_matches_single_lights():
    lights = [LightSource.directional([0, 0.6, 0.8], 1.0), LightSource.point([0.3, 0, 2.0], 3.0)]
    which = np.array([0, 1, 1, 0])
    x = np.array([[0.1, 0, 0], [0, 0.2, 0], [0.2, 0.2, -0.1], [0, 0, 0]])
    l, L = LightBatch.gather(lights, which).at(x)
    for r in range(4):
        lr, Lr = light_at(lights[which[r]], x[r:r + 1])
        assert np.allclose(l[r], lr[0]) and L[r] == pytest.approx(Lr[0])


def test_light_gradient_wrt_position(rng):
    light = LightSource.point([0.2, -0.1, 1.5], 2.0)

    def f(t):
        tape = ad.Tape()
        x = tape.var(t.reshape(1, 3))
        l, L = light_at(light, x)
        val = ad.add(ad.sum(ad.mul(l, [1.0, 2.0, 3.0])), ad.sum(L))
        (g,) = tape.backward(val, [x])
        return float(val.value), g.ravel()

    assert ad.finite_difference_check(f, rng.normal(size=3) * 0.3, h=1e-6) < 1e-7


# --------------------------------------------------------------------------
# opacity

def test_alpha_equal_sdf_is_zero():
    assert float(alpha_from_sdf(0.3, 0.3, 50.0)) == 0.0
    assert float(alpha_from_sdf(-0.2, -0.2, 1e3)) == 0.0


def test_alpha_entering_surface_saturates():
    assert abs(float(alpha_from_sdf(0.1, -0.1, 1e3)) - 1.0) < 1e-10


def test_alpha_exiting_surface_is_zero():
    assert float(alpha_from_sdf(-0.1, 0.1, 1e3)) == 0.0
    assert float(alpha_from_sdf(-0.1, 0.1, 5.0)) == 0.0


def test_alpha_in_unit_interval(rng):
    f = rng.normal(size=(2, 1000))
    s = rng.uniform(0.1, 2000, size=1000)
    a = np.asarray(alpha_from_sdf(f[0], f[1], s))
    assert np.all((a >= 0) & (a <= 1))


# --------------------------------------------------------------------------
# incoming radiance

def test_empty_scene_is_unattenuated():
    far_sphere = F.Sphere((0.0, 0.0, 50.0), 0.1)
    x = np.array([[0.0, 0, 0], [0.3, -0.2, 0.1]])
    c = incoming_radiance(far_sphere, x, LightSource.directional([1.0, 0, 1], 1.7), s=20.0)
    assert np.allclose(c, 1.7, atol=1e-3)


def test_point_light_behind_sphere_is_blocked():
    sphere = F.Sphere((0.0, 0.0, 0.5), 0.3)
    x = np.array([[0.0, 0.0, 0.0]])
    light = LightSource.point([0.0, 0.0, 0.95], 1.0)
    prev = 1.0
    for s in (10.0, 100.0, 1000.0):
        c = float(incoming_radiance(sphere, x, light, s=s, falloff=False)[0])
        assert c <= prev + 1e-12
        prev = c
    assert prev < 1e-6


def test_soft_shadow_profile_is_monotone():
    scene = S.builtin_scene("sphere-plane")
    field = F.SceneField(S.scene_objects(scene), S.scene_ground_plane(scene))
    light = LightSource.directional([0.0, 0.0, 1.0])
    # slide from the shadow centre outward across the penumbra
    x = np.stack([np.linspace(0.0, 0.6, 61), np.zeros(61), np.full(61, -0.4)], axis=-1)
    c = np.asarray(incoming_radiance(field, x, light, s=30.0, n_uniform=256, n_importance=64))
    assert c[0] < 0.05 and c[-1] > 0.95
    assert np.all(np.diff(c) >= -1e-9)


def test_radiance_bounded_by_intensity(rng):
    field = F.NetworkField(F.SdfNetwork(depth=2, width=16, n_freqs=2, seed=3))
    x = rng.uniform(-0.7, 0.7, size=(200, 3))
    c = np.asarray(incoming_radiance(field, x, LightSource.directional([0.2, 0.3, 1.0], 2.0),
                                     s=50.0))
    assert np.all((c >= 0) & (c <= 2.0 + 1e-12))


def test_importance_samples_cluster_at_surface():
    sphere = F.Sphere((0.0, 0.0, 0.5), 0.2)
    x = np.zeros((1, 3))
    t = sample_positions(sphere, x, np.array([[0.0, 0, 1]]), np.array([1.0]), 200.0,
                         n_uniform=80, n_importance=64)
    assert t.shape == (1, 144) and np.all(np.diff(t, axis=1) >= 0)
    near = np.abs(t[0] - 0.3) < 0.05
    assert near.sum() > 64 * 0.7


def test_self_shadowing_outward_and_inward(rng):
    sphere = F.Sphere((0.0, 0.0, 0.0), 0.4)
    d = rng.normal(size=(64, 3))
    n = d / np.linalg.norm(d, axis=1, keepdims=True)
    x = 0.4 * n
    lights = [LightSource.directional(v) for v in n]
    batch = LightBatch.gather(lights, np.arange(64))
    out = np.asarray(incoming_radiance(sphere, x, batch, s=1e3))
    assert np.all(out >= 0.99)
    inward = LightBatch.gather([LightSource.directional(-v) for v in n], np.arange(64))
    inn = np.asarray(incoming_radiance(sphere, x, inward, s=1e3))
    assert np.all(inn <= 0.01)


def test_hard_shadows_match_ray_tracing():
    scene = S.builtin_scene("sphere-plane")
    field = F.SceneField(S.scene_objects(scene), S.scene_ground_plane(scene))
    x = _ground_grid(scene)
    up = np.tile([0.0, 0.0, 1.0], (len(x), 1))
    for d in ([0.4, 0.2, 1.0], [-0.7, 0.3, 0.6]):
        light = LightSource.directional(d)
        c = np.asarray(incoming_radiance(field, x, light, s=1e3, n_uniform=512, n_importance=0))
        vis = S.oracle_visibility(scene, x, up, light)
        assert 0.05 < np.mean(vis < 0.5) < 0.5
        assert np.mean((c > 0.5) == (vis > 0.5)) >= 0.99


def test_radiance_gradient_matches_finite_differences(rng):
    net = F.SdfNetwork(depth=2, width=16, n_freqs=2, seed=4)
    x = np.array([[0.1, 0.0, -0.45], [0.0, 0.2, -0.5], [-0.1, 0.1, -0.48]])
    light = LightSource.point([0.2, 0.1, 0.9], 1.0)
    names = [k for k, _ in net.params.layout]
    t_fixed = {}

    def f(theta):
        m = F.SdfNetwork(depth=2, width=16, n_freqs=2, params=theta.copy())
        tape = ad.Tape()
        P = m.params.leaves(tape)
        c, smp = incoming_radiance(F.NetworkField(m, P), x, light, s=30.0, n_uniform=32,
                                   n_importance=16, return_samples=True,
                                   t_samples=t_fixed.get("t"))
        t_fixed.setdefault("t", smp.t)
        loss = ad.sum(c)
        gr = tape.backward(loss, [P[k] for k in names])
        return float(loss.value), m.params.flatten_grads(dict(zip(names, gr)))

    idx = rng.choice(net.params.size, 60, replace=False)
    assert ad.finite_difference_check(f, net.params.flat, h=1e-5, indices=idx, eps=1e-6) < 1e-4


# --------------------------------------------------------------------------
# aggregation and loss

def test_aggregate_boundary_examples():
    c = aggregate_boundary(np.array([0.3, 0.3]), np.array([0.0, 0.0]), np.array([1.0, 1.0]),
                           np.array([1.0, 0.5]), np.array([True, True]))
    assert np.allclose(c, [0.0, 0.5])
    c = aggregate_boundary(np.array([0.3]), np.array([0.0]), np.array([1.0]), np.array([0.5]),
                           np.array([False]))
    assert np.allclose(c, [0.3])


def test_shadow_loss_examples(rng):
    assert float(shadow_loss(np.array([0.4]), np.array([0.4]))) == 0.0
    assert float(shadow_loss(np.array([0.25]), np.array([1.0]))) == pytest.approx(0.75)
    a, b = rng.uniform(size=256), (rng.uniform(size=256) > 0.5).astype(float)
    assert float(shadow_loss(a, b)) == pytest.approx(np.mean(np.abs(a - b)))
