import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from shadowsdf import diffengine as ad
from shadowsdf import fields as F
from shadowsdf.optim import Adam


@pytest.fixture(scope="module")
def small_net():
    return F.SdfNetwork(depth=4, width=32, n_freqs=4, seed=3)


def test_positional_encoding_at_origin():
    out = F.positional_encode(np.zeros((1, 3)), 1)
    assert np.allclose(out, [[0, 0, 0, 0, 0, 0, 1, 1, 1]])


def test_positional_encoding_without_frequencies():
    p = np.array([[0.1, 0.2, 0.3]])
    assert np.array_equal(F.positional_encode(p, 0), p)


def test_positional_encoding_first_sine_block():
    out = F.positional_encode(np.array([[0.5, 0.0, 0.0]]), 1)
    assert np.allclose(out[0, 3:6], [1, 0, 0])


def test_positional_encoding_jacobian(rng):
    p0 = rng.uniform(-1, 1, size=6)

    def f(t):
        tape = ad.Tape()
        tv = tape.var(t)
        loss = ad.sum(ad.mul(F.positional_encode(ad.reshape(tv, (2, 3)), 3), 0.7))
        (g,) = tape.backward(loss, [tv])
        return float(loss.value), g

    assert ad.finite_difference_check(f, p0, h=1e-6) < 1e-6


def test_analytic_sphere_distance():
    assert F.Sphere((0, 0, 0), 1.0).sdf(np.array([[2.0, 0, 0]]))[0] == pytest.approx(1.0)


def test_analytic_plane_zero_on_plane():
    plane = F.Plane(np.array([0.0, 0.0, 1.0]), -0.4)
    assert plane.sdf(np.array([[0.3, -0.7, -0.4]]))[0] == pytest.approx(0.0, abs=1e-15)


def test_sphere_initialised_network_center(small_net):
    f = F.NetworkField(small_net).sdf(np.zeros((1, 3)))[0]
    assert f == pytest.approx(-0.5, abs=0.05)


def test_sphere_initialised_network_sign(small_net, rng):
    field = F.NetworkField(small_net)
    d = rng.normal(size=(200, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    assert field.sdf(np.zeros((1, 3)))[0] < 0
    assert np.all(field.sdf(d * 1.0) > 0)


def test_output_shapes(small_net):
    f, feat = small_net.forward(np.zeros((5, 3)))
    assert f.shape == (5,) and feat.shape == (5, small_net.feature_dim)


def test_default_feature_width():
    net = F.SdfNetwork(depth=2, width=16, n_freqs=2, feature_dim=256, init_fit_steps=0)
    assert net.forward(np.zeros((1, 3)))[1].shape == (1, 256)


def test_sharpness_positive(small_net):
    P = small_net.params.views()
    P = dict(P, s_raw=np.array(-50.0))
    assert float(small_net.sharpness(P)) > 0


def test_sphere_normal_on_top():
    n = F.normal(F.Sphere((0, 0, 0), 0.7), np.array([[0, 0, 0.7]]))
    assert np.allclose(n, [[0, 0, 1]])


def test_plane_normal_constant(rng):
    plane = F.Plane(np.array([0.0, 0.6, 0.8]), 0.1)
    n = F.normal(plane, rng.normal(size=(20, 3)))
    assert np.allclose(n, [0, 0.6, 0.8])


def test_network_normal_matches_finite_differences(small_net, rng):
    field = F.NetworkField(small_net)
    x = rng.uniform(-0.6, 0.6, size=(10, 3))
    n = F.normal(field, x)
    h = 1e-6
    g = np.stack([(field.sdf(x + h * e) - field.sdf(x - h * e)) / (2 * h) for e in np.eye(3)], -1)
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    ang = np.degrees(np.arccos(np.clip(np.sum(n * g, axis=1), -1, 1)))
    assert ang.max() < 0.1


class _Scaled:
    def __init__(self, field, k):
        self.field, self.k = field, k

    def sdf(self, x):
        return ad.mul(self.field.sdf(x), self.k)


def test_normal_invariant_to_scaling(small_net, rng):
    field = F.NetworkField(small_net)
    x = rng.uniform(-0.6, 0.6, size=(10, 3))
    assert np.allclose(F.normal(field, x), F.normal(_Scaled(field, 2.0), x), atol=1e-12)


def test_degenerate_normal_raises():
    class Flat:
        def sdf(self, x):
            return ad.mul(ad.sum(x, axis=-1), 0.0)

    with pytest.raises(F.DegenerateNormalError):
        F.normal(Flat(), np.zeros((2, 3)))


@pytest.mark.parametrize("prim", [
    F.Sphere((0.1, 0.0, -0.2), 0.4),
    F.Plane(np.array([0.0, 0.0, 1.0]), -0.3),
    F.Box((0.0, 0.1, 0.0), (0.2, 0.3, 0.25)),
])
def test_eikonal_zero_for_primitives(prim, rng):
    pts = rng.uniform(-1, 1, size=(256, 3))
    if isinstance(prim, F.Box):
        # the box SDF gradient has unit length away from its medial axes
        pts = pts[np.abs(np.abs(pts - 0.0) - 0.0).min(axis=1) > 1e-3]
    assert float(F.eikonal_loss(prim, pts)) < 1e-12


def test_eikonal_of_doubled_sphere(rng):
    pts = rng.uniform(-1, 1, size=(64, 3)) + 2.0
    assert float(F.eikonal_loss(_Scaled(F.Sphere((0, 0, 0), 1.0), 2.0), pts)) == pytest.approx(1.0)


class _Stretched:
    # sphere distance in a scaled frame: not an exact SDF, so the Eikonal
    # loss depends on the stretch parameters
    def __init__(self, c, a, r):
        self.c, self.a, self.r = c, a, r

    def sdf(self, x):
        return ad.sub(ad.norm(ad.mul(ad.sub(x, self.c), self.a), axis=-1), self.r)


def test_eikonal_gradient_wrt_analytic_parameters():
    pts = np.random.default_rng(0).uniform(-1, 1, size=(32, 3))

    def f(t):
        tape = ad.Tape()
        c, a, r = tape.var(t[:3]), tape.var(t[3:6]), tape.var(t[6])
        loss = F.eikonal_loss(_Stretched(c, a, r), pts, tape=tape)
        g = tape.backward(loss, [c, a, r])
        return float(loss.value), np.concatenate([g[0], g[1], [g[2]]])

    theta = [0.1, 0.0, -0.1, 1.2, 0.8, 1.0, 0.5]
    assert ad.finite_difference_check(f, theta, h=1e-6) < 1e-6


def test_eikonal_of_sphere_is_parameter_free():
    pts = np.random.default_rng(0).uniform(-1, 1, size=(32, 3))
    tape = ad.Tape()
    r, c = tape.var(0.5), tape.var([0.1, 0.0, -0.1])
    loss = F.eikonal_loss(F.Sphere(c, r), pts, tape=tape)
    gr, gc = tape.backward(loss, [r, c])
    assert float(loss.value) < 1e-24 and gr == 0 and np.allclose(gc, 0, atol=1e-12)


def test_eikonal_training_decreases(rng):
    net = F.SdfNetwork(depth=2, width=32, n_freqs=2, seed=5, init_fit_steps=0)
    net.params.flat[...] += 0.3 * rng.standard_normal(net.params.size)
    opt = Adam(net.params.size)
    pts = F.sphere_points(rng, 1024)
    names = [n for n, _ in net.params.layout]
    losses = []
    for _ in range(150):
        tape = ad.Tape()
        P = net.params.leaves(tape)
        loss = F.eikonal_loss(F.NetworkField(net, P), pts, tape=tape)
        g = tape.backward(loss, [P[n] for n in names])
        opt.step(net.params.flat, net.params.flatten_grads(dict(zip(names, g))), 3e-3)
        losses.append(float(loss.value))
    assert np.mean(losses[-20:]) < 0.5 * np.mean(losses[:20])


def test_material_outputs_nonnegative(rng):
    mat = F.MaterialNetwork(feature_dim=8, depth=3, width=16, seed=2)
    mat.params.flat[...] = rng.normal(size=mat.params.size)
    x, n, feat = rng.normal(size=(1000, 3)), rng.normal(size=(1000, 3)), rng.normal(size=(1000, 8))
    rho, y = F.material_eval(mat, x, n, feat)
    assert rho.shape == (1000, 3) and y.shape == (1000, 27)
    assert np.all(rho >= 0) and np.all(y >= 0)


def test_material_zero_last_layer_gives_softplus_bias(rng):
    mat = F.MaterialNetwork(feature_dim=4, depth=2, width=8)
    v = mat.params.views()
    v["w1"][...] = 0.0
    v["b1"][...] = np.linspace(-0.02, 0.05, 30)
    rho, _ = F.material_eval(mat, rng.normal(size=(3, 3)), rng.normal(size=(3, 3)),
                             rng.normal(size=(3, 4)))
    expect = np.log1p(np.exp(100 * v["b1"][:3])) / 100
    assert np.allclose(rho, expect)


def test_material_gradient(rng):
    mat = F.MaterialNetwork(feature_dim=4, depth=2, width=8, seed=4)
    # generic parameters keep the beta=100 softplus away from its bend at 0
    mat.params.flat[...] = 0.5 * rng.standard_normal(mat.params.size)
    x, n, feat = rng.normal(size=(6, 3)), rng.normal(size=(6, 3)), rng.normal(size=(6, 4))
    names = [k for k, _ in mat.params.layout]

    def f(t):
        m = F.MaterialNetwork(feature_dim=4, depth=2, width=8, params=t.copy())
        tape = ad.Tape()
        P = m.params.leaves(tape)
        rho, y = m.forward(x, n, feat, P)
        loss = ad.add(ad.mean(ad.square(rho)), ad.mean(y))
        g = tape.backward(loss, [P[k] for k in names])
        return float(loss.value), m.params.flatten_grads(dict(zip(names, g)))

    # entries below ~1e-8 are dominated by the ~1e-10 roundoff of the central
    # difference, hence the absolute floor in the denominator
    assert ad.finite_difference_check(f, mat.params.flat, h=1e-5, eps=1e-6) < 1e-5


def test_float32_network_stays_float32():
    net = F.SdfNetwork(depth=2, width=16, n_freqs=2, dtype=np.float32)
    f, feat = net.forward(np.zeros((4, 3)))
    assert f.dtype == np.float32 and feat.dtype == np.float32


def test_ground_plane_requires_unit_normal():
    with pytest.raises(ValueError):
        F.GroundPlane(np.array([0.0, 0.0, 2.0]), 0.0)


def test_ground_plane_intersection():
    g = F.GroundPlane(np.array([0.0, 0.0, 1.0]), -1.0)
    t = g.intersect(np.array([[0.0, 0, 1], [0, 0, 1]]), np.array([[0.0, 0, -1], [0, 0, 1]]))
    assert t[0] == pytest.approx(2.0) and np.isinf(t[1])


def test_scene_field_is_min_of_parts():
    sf = F.SceneField(F.Sphere((0, 0, 0), 0.3), F.GroundPlane(np.array([0.0, 0, 1]), -0.5))
    p = np.array([[0, 0, 0.5], [0, 0, -0.45], [0.9, 0.0, 0.0]])
    # the far point is clipped by the unit scene sphere, then the ground is closer
    assert np.allclose(sf.sdf(p), [0.2, 0.05, 0.5])


def test_checkpoint_round_trip(tmp_path, small_net):
    path = tmp_path / "x.ckpt"
    F.save_checkpoint(path, {"a": small_net.params.flat, "t": np.array(3)}, {"k": [1, 2]})
    arrays, meta = F.load_checkpoint(path)
    assert np.array_equal(arrays["a"], small_net.params.flat) and meta == {"k": [1, 2]}


def test_checkpoint_rejects_foreign_file(tmp_path):
    p = tmp_path / "junk.ckpt"
    p.write_bytes(b"not a checkpoint at all")
    with pytest.raises(ValueError):
        F.load_checkpoint(p)


def test_parameter_size_mismatch():
    with pytest.raises(ValueError):
        F.SdfNetwork(depth=2, width=8, n_freqs=1, params=np.zeros(3))


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (8, 3), elements=st.floats(-1, 1)))
def test_sphere_points_property(p):
    d = np.linalg.norm(p, axis=1)
    s = F.Sphere((0, 0, 0), 0.5).sdf(p)
    assert np.allclose(s, d - 0.5)
