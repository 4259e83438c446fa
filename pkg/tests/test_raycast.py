import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shadowsdf import diffengine as ad
from shadowsdf import fields as F
from shadowsdf import scenes as S
from shadowsdf.raycast import (Rays, coverage_fraction, differentiable_intersection, ray_march,
                               surface_walk)


def _rays(o, d, near=0.0, far=6.0):
    o = np.atleast_2d(np.asarray(o, float))
    d = np.atleast_2d(np.asarray(d, float))
    d = d / np.linalg.norm(d, axis=1, keepdims=True)
    n = len(d)
    return Rays(np.broadcast_to(o, d.shape).copy(), d, np.full(n, near), np.full(n, far))


def test_march_unit_sphere():
    hit = ray_march(F.Sphere((0, 0, 0), 1.0), _rays([0, 0, 3], [0, 0, -1]))
    assert hit.valid[0] and not hit.hit_ground[0]
    assert hit.t[0] == pytest.approx(2.0, abs=1e-3)
    assert np.allclose(hit.x[0], [0, 0, 1], atol=1e-3)


def test_march_miss_hits_ground():
    field = F.SceneField(F.Sphere((0, 0, 0), 1.0), F.GroundPlane(np.array([0.0, 0, 1]), -1.0),
                         bound_radius=None)
    hit = ray_march(field, _rays([2.0, 0, 3], [0.2, 0, -1], far=10))
    assert hit.valid[0] and hit.hit_ground[0]
    assert hit.x[0, 2] == pytest.approx(-1.0, abs=1e-9)


def test_grazing_ray_lands_on_a_surface():
    field = F.SceneField(F.Sphere((0, 0, 0), 1.0), F.GroundPlane(np.array([0.0, 0, 1]), -1.0),
                         bound_radius=None)
    # tangent to the sphere at (1, 0, 0), descending slightly toward the ground
    hit = ray_march(field, _rays([1.0, -3.0, 0.0], [0, 1, -1e-3], far=3000))
    assert hit.valid[0]
    assert abs(float(field.sdf(hit.x[:1])[0])) < 1e-4


def test_object_hits_lie_on_surface(sphere_plane):
    _, camera, field = sphere_plane
    hit = ray_march(field, camera.rays(camera.pixel_centers()))
    obj = hit.hit_object
    assert obj.sum() > 100
    assert np.max(np.abs(field.sdf(hit.x[obj]))) < 1e-4


def test_intersection_is_identity_on_surface():
    s = F.Sphere((0, 0, 0), 1.0)
    x = np.array([[0.0, 0.6, 0.8]])
    xh = differentiable_intersection(s, np.array([[0.0, -0.6, -0.8]]), x)
    assert np.allclose(xh, x, atol=1e-15)


def test_intersection_derivative_in_radius():
    tape = ad.Tape()
    r = tape.var(0.7)
    sphere = F.Sphere((0.0, 0.0, 0.0), r)
    xh = differentiable_intersection(sphere, np.array([[0.0, 0, -1]]), np.array([[0.0, 0, 0.7]]))
    (g,) = tape.backward(xh[0, 2], [r])
    assert g == pytest.approx(1.0, abs=1e-12)


def test_intersection_derivative_oblique_ray():
    # d x_hat / d c = -v / (n . v) * df/dc, with df/dc = -n for a sphere centre
    tape = ad.Tape()
    c = tape.var([0.0, 0.0, 0.0])
    x = np.array([[0.0, 0.6, 0.8]])
    v = np.array([[0.3, -0.5, -0.8]])
    v /= np.linalg.norm(v)
    xh = differentiable_intersection(F.Sphere(c, 1.0), v, x)
    n = x[0]
    jac = np.stack([tape.backward(xh[0, k], [c])[0] for k in range(3)])
    expect = np.outer(-v[0] / (n @ v[0]), -n)
    assert np.allclose(jac, expect, atol=1e-12)


def test_intersection_gradient_matches_finite_differences(rng):
    net = F.SdfNetwork(depth=2, width=16, n_freqs=2, seed=2)
    net.params.flat[...] += 0.01 * rng.standard_normal(net.params.size)
    d = np.array([[0.1, 0.05, -1.0], [-0.08, 0.1, -1.0]])
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    hit = ray_march(F.NetworkField(net), _rays([0, 0, 2.0], d))
    assert hit.valid.all()
    x = hit.x
    _, g = F.sdf_gradient(F.NetworkField(net), x)
    n = g / np.linalg.norm(g, axis=1, keepdims=True)
    names = [k for k, _ in net.params.layout]

    def f(t):
        m = F.SdfNetwork(depth=2, width=16, n_freqs=2, params=t.copy())
        tape = ad.Tape()
        P = m.params.leaves(tape)
        xh = differentiable_intersection(F.NetworkField(m, P), d, x, n=n)
        loss = ad.sum(ad.square(xh))
        gr = tape.backward(loss, [P[k] for k in names])
        return float(loss.value), m.params.flatten_grads(dict(zip(names, gr)))

    idx = rng.choice(net.params.size, 60, replace=False)
    assert ad.finite_difference_check(f, net.params.flat, h=1e-5, indices=idx, eps=1e-6) < 1e-4


def test_flat_plane_pixel_is_not_boundary():
    cam = S.CameraModel.look_at([0, 0, 2.0], [0, 0, 0], 16, 16, 30.0, up=(0.0, 1.0, 0.0))
    field = F.SceneField(F.Sphere((5, 5, 5), 0.1), F.GroundPlane(np.array([0.0, 0, 1]), 0.0))
    uv = cam.pixel_centers()
    rays = cam.rays(uv)
    hit = ray_march(field, rays)
    info = surface_walk(field, cam, rays, hit, uv, 1.0)
    assert not info.is_boundary.any()


def test_silhouette_pixels(sphere_plane, silhouette_truth):
    scene, camera, field = sphere_plane
    cov, sil = silhouette_truth
    uv = camera.pixel_centers()
    rays = camera.rays(uv)
    hit = ray_march(field, rays)
    info = surface_walk(field, camera, rays, hit, uv, 1.0)
    found = info.is_boundary & sil
    # recall against the super-sampled truth
    assert found.sum() / sil.sum() >= 0.9
    # area fraction against 256 sub-rays
    w = info.w_value(camera)
    assert np.mean(np.abs(w[found] - cov[found]) < 0.05) >= 0.95
    # near ray on the object, far ray on the ground and behind it
    b = np.flatnonzero(info.is_boundary)
    assert info.x_near.hit_object[b].all() and info.x_far.valid[b].all()
    assert np.all(info.x_near.t[b] < info.x_far.t[b])


def test_silhouette_shift_moves_w(sphere_plane):
    scene, camera, _ = sphere_plane
    # shift the sphere sideways by a quarter pixel at the sphere's depth
    depth = np.linalg.norm(camera.center - np.array([0, 0, -0.1]))
    delta = 0.25 * depth / camera.fx
    moved = S.builtin_scene("sphere-plane")
    moved["objects"][0]["center"] = [delta, 0.0, -0.1]
    uv = camera.pixel_centers()
    ws, covs = [], []
    for sc in (scene, moved):
        field = F.SceneField(S.scene_objects(sc), S.scene_ground_plane(sc))
        rays = camera.rays(uv)
        hit = ray_march(field, rays)
        info = surface_walk(field, camera, rays, hit, uv, 1.0)
        ws.append(np.where(info.is_boundary, info.w_value(camera), np.nan))
        covs.append(_coverage(sc, camera, uv))
    dw = ws[1] - ws[0]
    dc = covs[1] - covs[0]
    both = np.isfinite(dw) & (np.abs(dc) > 0.1)
    assert both.sum() >= 5
    rel = np.abs(dw[both] - dc[both]) / np.abs(dc[both])
    assert np.median(rel) < 0.1


def _coverage(scene, camera, uv, k=16):
    sub = (np.arange(k) + 0.5) / k - 0.5
    su, sv = np.meshgrid(sub, sub)
    offs = np.stack([su.ravel(), sv.ravel()], axis=-1)
    t, _, _, g = S.oracle_hits(scene, camera, (uv[:, None] + offs[None]).reshape(-1, 2))
    return ((~g) & np.isfinite(t)).reshape(len(uv), -1).mean(axis=1)


def test_coverage_half_pixel():
    w = coverage_fraction(np.array([[0.5, 0.5]]), np.array([[1.0, 0.0]]), np.zeros((1, 2)),
                          np.ones(1))
    assert w[0] == pytest.approx(0.5)


def test_coverage_diagonal_corner():
    m = np.array([[1.0, 1.0]]) / np.sqrt(2)
    w = coverage_fraction(np.array([[0.5, 0.0]]), m, np.zeros((1, 2)), np.ones(1))
    assert w[0] == pytest.approx(0.125)


@settings(max_examples=60, deadline=None)
@given(st.floats(0, 2 * np.pi), st.floats(-0.5, 1.5), st.floats(-0.5, 1.5))
def test_coverage_properties(theta, u, v):
    m = np.array([[np.cos(theta), np.sin(theta)]])
    uv = np.array([[u, v]])
    w = coverage_fraction(uv, m, np.zeros((1, 2)), np.ones(1))[0]
    w_flip = coverage_fraction(uv, -m, np.zeros((1, 2)), np.ones(1))[0]
    assert 0.0 <= w <= 1.0
    assert w + w_flip == pytest.approx(1.0, abs=1e-8)
    # moving the edge toward the far side grows the near region
    w_more = coverage_fraction(uv + 0.05 * m, m, np.zeros((1, 2)), np.ones(1))[0]
    assert w_more >= w - 1e-12


def test_coverage_matches_sampling(rng):
    k = 200
    g = (np.arange(k) + 0.5) / k
    gx, gy = np.meshgrid(g, g)
    pts = np.stack([gx.ravel(), gy.ravel()], -1)
    for _ in range(20):
        th = rng.uniform(0, 2 * np.pi)
        m = np.array([np.cos(th), np.sin(th)])
        uv = rng.uniform(0, 1, 2)
        w = coverage_fraction(uv[None], m[None], np.zeros((1, 2)), np.ones(1))[0]
        assert w == pytest.approx(np.mean((pts - uv) @ m <= 0), abs=5e-3)


def test_coverage_gradient(rng):
    m = np.array([[0.6, 0.8]])

    def f(t):
        tape = ad.Tape()
        uv = tape.var(t.reshape(1, 2))
        w = ad.sum(coverage_fraction(uv, m, np.zeros((1, 2)), np.ones(1)))
        (g,) = tape.backward(w, [uv])
        return float(w.value), g.ravel()

    for uv in ([0.2, 0.3], [0.5, 0.5], [0.9, 0.7]):
        assert ad.finite_difference_check(f, uv, h=1e-7) < 1e-6
