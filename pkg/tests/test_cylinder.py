import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pathspace import cylinder as cyl
from pathspace import functions as fn
from pathspace import hbm
from pathspace.exceptions import UsageError
from pathspace.geometry import get_manifold
from pathspace.hbm import DiscretePath

MANIFOLDS = ["flat:2", "sphere:2", "hyperbolic:2"]


def paths(name="flat:2", n_paths=64, n_steps=64, seed=0, T=1.0):
    return hbm.sample_path(name, None, T, n_steps, seed, n_paths)


def perturb(p: DiscretePath, h, eps):
    """``gamma_s + eps U_s h_s`` (flat model)."""
    pts = p.points + eps * np.einsum("pkai,pki->pka", p.frames, h)
    return DiscretePath(p.manifold, p.times, pts, p.frames, p.increments)


# evaluation -------------------------------------------------------------------------

def test_eval_constant_integrand_gives_T():
    F = cyl.linear([cyl.Integrand(fn.constant(1.0))])
    for T in (0.5, 1.0, 2.0):
        assert np.allclose(cyl.evaluate(F, paths(T=T)), T, rtol=0, atol=1e-15)


def test_eval_zero_path():
    M = get_manifold("flat:2")
    p = paths()
    z = DiscretePath(M, p.times, np.zeros_like(p.points), p.frames, p.increments)
    assert np.all(cyl.evaluate(cyl.build(M, "linear-coordinate:0"), z) == 0)


def test_eval_matches_independent_quadrature():
    M = get_manifold("flat:2")
    p = paths(n_steps=100)
    F = cyl.build(M, "linear-coordinate:0")
    oracle = np.array([np.trapezoid(x[:, 0], p.times) for x in p.points])
    assert np.allclose(cyl.evaluate(F, p), oracle, rtol=0, atol=1e-14)
    # against the continuous integral the quadrature error is O(T^2/n^2) * Lip per path,
    # checked on a smooth deterministic path
    fine = np.linspace(0, 1, 100_001)
    curve = lambda t: np.stack([np.sin(3 * t), t ** 2], axis=-1)  # noqa: E731
    q = DiscretePath(M, p.times, curve(p.times)[None], p.frames[:1], p.increments[:1])
    exact = (1 - np.cos(3.0)) / 3
    assert abs(cyl.evaluate(F, q)[0] - exact) < 9 / 12 / 100 ** 2
    assert abs(np.trapezoid(curve(fine)[:, 0], fine) - exact) < 1e-9


def test_window_integrand_subinterval():
    M = get_manifold("flat:1")
    p = paths("flat:1", n_steps=8)
    t = p.times
    q = DiscretePath(M, t, np.broadcast_to(t[None, :, None], p.points.shape).copy(), p.frames, p.increments)
    # int_{0.3}^{0.7} s ds with a window that is not on the grid
    F = cyl.build(M, "window(0.3;0.7;linear-coordinate:0)")
    assert cyl.evaluate(F, q)[0] == pytest.approx((0.7 ** 2 - 0.3 ** 2) / 2, abs=1e-15)


# gradients --------------------------------------------------------------------------

def test_linear_functional_gradient():
    p = paths()
    F = cyl.build("flat:2", "linear-coordinate:0")
    DF = cyl.grad(F, p)
    assert np.array_equal(DF.values, np.broadcast_to([1.0, 0.0], DF.values.shape))
    assert np.allclose(DF.norm2(), 1.0, rtol=0, atol=1e-15)


@pytest.mark.parametrize("expr", ["linear-coordinate:0", "sin(linear-coordinate:1)",
                                  "product(linear-coordinate:0;tanh-coordinate:1)",
                                  "exp(0.3;gaussian-bump:0.5,0,0.7)", "square(window(0.2;0.9;linear-coordinate:1))"])
def test_directional_derivative(expr):
    M = get_manifold("flat:2")
    rng = np.random.default_rng(4)
    p = paths(n_paths=20, n_steps=50)
    F = cyl.build(M, expr)
    DF = cyl.grad(F, p)
    h = rng.normal(size=(20, p.times.size, 2))
    eps = 1e-6
    fd = (F(perturb(p, h, eps)) - F(perturb(p, h, -eps))) / (2 * eps)
    assert np.allclose(fd, DF.pairing(h), rtol=1e-6, atol=1e-8)
    # the interpolant inner product differs from the trapezoid pairing by O(1/n^2)
    H = cyl.HVector(p.times, h)
    smooth = np.sin(np.outer(np.ones(20), 3 * p.times))[..., None] * np.ones(2)
    Hs = cyl.HVector(p.times, smooth)
    assert np.allclose(DF.inner(Hs), DF.pairing(smooth), atol=5.0 / 50 ** 2)
    assert np.all(np.isfinite(DF.inner(H)))


def test_sphere_height_gradient_oracle():
    M = get_manifold("sphere:2")
    v = np.array([0.6, -0.8, 0.0])
    p = paths("sphere:2", n_paths=10, n_steps=32)
    F = cyl.build(M, "ambient-height:0.6,-0.8,0")
    DF = cyl.grad(F, p)
    x = p.points
    tang = v - (x @ v)[..., None] * x
    expect = np.einsum("pkai,pka->pki", p.frames, tang)
    assert np.allclose(DF.values, expect, atol=1e-14)


@pytest.mark.parametrize("name", MANIFOLDS)
def test_site_functions_lipschitz_and_gradient(name):
    M = get_manifold(name)
    rng = np.random.default_rng(2)
    sites = [fn.coordinate(M, 0), fn.tanh_coordinate(M, 1), fn.bump(M, M.base_point(), 0.8),
             fn.height(M, np.eye(M.ambient_dim)[0])]
    for f in sites:
        for _ in range(30):
            fp = M.random_frame_point(rng, 0.7)
            v = rng.normal(size=M.dim)
            v /= np.linalg.norm(v)
            t = 1e-5
            xp, _ = M.exp_transport(fp.x, fp.U, t * v)
            xm, _ = M.exp_transport(fp.x, fp.U, -t * v)
            fd = (f(xp) - f(xm)) / (2 * t)
            an = M.covector_coords(fp.U, f.covector(fp.x)) @ v
            assert abs(fd - an) < 1e-5 * max(1.0, abs(an))
            y = M.random_point(rng, 0.7)
            if np.isfinite(f.lipschitz):
                assert abs(f(fp.x) - f(y)) <= f.lipschitz * M.distance(fp.x, y) + 1e-12


# damping ----------------------------------------------------------------------------

@pytest.mark.parametrize("name,c", [("flat:2", 0.0), ("sphere:2", 1.0), ("hyperbolic:2", -1.0),
                                    ("sphere:3", 2.0)])
def test_damping_oracle(name, c):
    p = paths(name, n_paths=2, n_steps=128)
    D = cyl.damping(p)
    expect = np.exp(-c * p.times / 2)[:, None, None] * np.eye(p.manifold.dim)
    assert np.max(np.abs(D.matrices - expect)) < 1e-10
    assert np.array_equal(D.matrices[0], np.eye(p.manifold.dim))


def test_damped_grad_flat_closed_form():
    p = paths(n_steps=64)
    F = cyl.build("flat:2", "linear-coordinate:0")
    Dt = cyl.damped_grad(F, p)
    assert np.allclose(Dt.values[..., 0], 1 - p.times, rtol=0, atol=1e-15)
    assert np.all(Dt.values[..., 1] == 0)
    assert np.allclose(Dt.norm2(), 1 / 3, rtol=0, atol=1e-15)
    assert np.all(Dt.values[:, -1] == 0)


@pytest.mark.parametrize("name,c", [("sphere:2", 1.0), ("hyperbolic:2", -1.0), ("sphere:3", 2.0)])
def test_damped_grad_einstein_closed_form(name, c):
    p = paths(name, n_paths=2, n_steps=128)
    d = p.manifold.dim
    e1 = np.zeros((2, p.times.size, d))
    e1[..., 0] = 1.0
    Dt = cyl.damped_grad(None, p, cyl.HVector(p.times, e1))
    expect = (2 / c) * (1 - np.exp(-c * (1 - p.times) / 2))
    assert np.allclose(Dt.values[..., 0], expect, atol=1e-5)
    assert np.all(Dt.values[:, -1] == 0)
    # c -> 0 reproduces the flat weight 1 - t
    small = 1e-6
    assert np.allclose((2 / small) * (1 - np.exp(-small * (1 - p.times) / 2)), 1 - p.times, atol=1e-6)


def test_zero_ricci_damped_is_tail_integral():
    from pathspace.quadrature import tail_integrals

    p = paths(n_steps=40)
    F = cyl.build("flat:2", "product(sin(linear-coordinate:0);tanh-coordinate:1)")
    DF = cyl.grad(F, p)
    assert np.array_equal(cyl.damped_grad(F, p, DF).values, tail_integrals(DF.values, p.times, axis=-2))
    assert np.array_equal(cyl.damped_grad(F, p, DF, cyl.undamped(p)).values, cyl.damped_grad(F, p, DF).values)


def test_positive_curvature_damping_shrinks_one_signed_gradients():
    p = paths("sphere:2", n_paths=4, n_steps=64)
    rng = np.random.default_rng(0)
    DF = cyl.HVector(p.times, np.abs(rng.normal(size=(4, p.times.size, 2))))
    damped = cyl.damped_grad(None, p, DF).norm2()
    plain = cyl.damped_grad(None, p, DF, cyl.undamped(p)).norm2()
    assert np.all(damped <= plain)


@settings(max_examples=40, deadline=None)
@given(st.sampled_from(["sphere:2", "sphere:3"]), st.sampled_from([16, 64, 128]), st.integers(0, 2 ** 20),
       st.booleans())
def test_positive_curvature_damping_contracts(name, n, seed, walk):
    # damped tail = (I - K) undamped tail with a Volterra K whose symbol has modulus < 1;
    # the grid operator can exceed the continuum bound by O(c h)
    p = paths(name, n_paths=1, n_steps=n)
    c = p.manifold.ricci_constant
    rng = np.random.default_rng(seed)
    v = rng.normal(size=(20, p.times.size, p.manifold.dim))
    DF = cyl.HVector(p.times, np.cumsum(v, axis=1) if walk else v)
    damped = cyl.damped_grad(None, p, DF).norm2()
    plain = cyl.damped_grad(None, p, DF, cyl.undamped(p)).norm2()
    assert np.all(damped <= plain * (1 + c / n))


# energies ---------------------------------------------------------------------------

def test_flat_energies_exact():
    p = paths(n_paths=500, n_steps=32)
    F = cyl.build("flat:2", "linear-coordinate:0")
    E = cyl.energy(F, F, p)
    Et = cyl.damped_energy(F, F, p)
    assert E.value == 0.5 and E.stderr == 0.0
    assert Et.value == pytest.approx(1 / 6, abs=1e-15) and Et.stderr < 1e-15


def test_flat_damped_equals_energy_of_undamped_tails():
    p = paths(n_paths=50)
    F = cyl.build("flat:2", "exp(0.5;tanh-coordinate:0)")
    Et = cyl.damped_energy(F, F, p)
    manual = 0.5 * cyl.damped_grad(F, p, None, cyl.undamped(p)).norm2()
    assert Et.value == pytest.approx(manual.mean(), rel=1e-14)


@pytest.mark.parametrize("name", MANIFOLDS)
def test_energy_bilinear_and_nonnegative(name):
    M = get_manifold(name)
    p = paths(name, n_paths=200, n_steps=32, seed=3)
    suite = cyl.default_suite(M)
    for a, b in [(suite[2], suite[5]), (suite[7], suite[11]), (suite[3], suite[20])]:
        F, G = cyl.build(M, a), cyl.build(M, b)
        S = cyl.build(M, f"sum({a};{b})")
        for en in (cyl.energy, cyl.damped_energy):
            lhs = en(S, S, p).value
            rhs = en(F, F, p).value + 2 * en(F, G, p).value + en(G, G, p).value
            assert abs(lhs - rhs) < 1e-12
            assert en(F, F, p).value >= 0


def test_energy_permutation_and_worker_invariance():
    M = get_manifold("sphere:2")
    F = cyl.build(M, "tanh(product(linear-coordinate:0;gaussian-bump:0,0,1,0.8))")
    p = paths("sphere:2", n_paths=300, n_steps=32, seed=8)
    perm = np.random.default_rng(0).permutation(300)
    a = cyl.energy(F, F, p).value
    assert cyl.energy(F, F, p[perm]).value == pytest.approx(a, rel=1e-13)
    S1 = hbm.PathSampler(M, 1.0, 32, 9000, seed=2, workers=1)
    S3 = hbm.PathSampler(M, 1.0, 32, 9000, seed=2, workers=3)
    for en in (cyl.energy, cyl.damped_energy):
        assert en(F, F, S1) == en(F, F, S3)
    assert cyl.ek_energy(F, -1.0, 1.0, 2, S1) == cyl.ek_energy(F, -1.0, 1.0, 2, S3)


def test_ek_energy_examples():
    p = paths(n_paths=100, n_steps=32)
    F = cyl.build("flat:2", "linear-coordinate:0")
    E = cyl.ek_energy(F, 0.0, 1.0, 1, p)
    assert E.value == pytest.approx(2.0, abs=1e-14) and E.stderr < 1e-14
    Z = cyl.ek_energy(cyl.build("flat:2", "constant:3"), 0.0, 1.0, 1, p)
    assert Z.value == 0.0
    G = cyl.build("flat:2", "sin(product(linear-coordinate:0;linear-coordinate:1))")
    for n in (1, 2, 4):
        one = cyl.ek_energy(G, 0.5, 1.0, n, p).value
        assert cyl.ek_energy(G, 0.5, 1.0, n, p, scale=(2.0, 2.0)).value == pytest.approx(2 * one, rel=1e-14)


def test_ek_window_validation():
    p = paths(T=0.4)
    F = cyl.build("flat:2", "linear-coordinate:0", 0.4)
    with pytest.raises(UsageError):
        cyl.ek_energy(F, 0.0, 0.4, 1, p)
    with pytest.raises(UsageError):
        cyl.ek_energy(F, 0.0, 0.4, 0, p)
    cyl.ek_energy(F, 0.0, 0.4, 3, p)


# registry ---------------------------------------------------------------------------

@pytest.mark.parametrize("name", MANIFOLDS)
def test_default_suite_builds(name):
    M = get_manifold(name)
    suite = cyl.default_suite(M)
    assert len(suite) >= 21 and len(set(suite)) == len(suite)
    p = paths(name, n_paths=8, n_steps=16)
    for e in suite:
        F = cyl.build(M, e)
        assert np.all(np.isfinite(F(p))) and np.all(np.isfinite(cyl.grad(F, p).values))


@pytest.mark.parametrize("bad", ["nothing", "linear-coordinate:9", "window(0.5;0.2;linear-coordinate:0)",
                                 "exp(linear-coordinate:0)", "sum()", "product(linear-coordinate:0"])
def test_registry_rejects(bad):
    with pytest.raises((UsageError, ValueError)):
        cyl.build("flat:2", bad)


@settings(max_examples=30, deadline=None)
@given(st.floats(-3, 3), st.floats(0.1, 3), st.integers(0, 1000))
def test_affine_gradient_scales(a, b, seed):
    p = paths(n_paths=4, n_steps=16, seed=seed)
    F = cyl.build("flat:2", "tanh-coordinate:0")
    A = cyl.build("flat:2", f"affine({a};{b};tanh-coordinate:0)")
    assert np.allclose(A(p), a + b * F(p), atol=1e-12)
    assert np.allclose(cyl.grad(A, p).values, b * cyl.grad(F, p).values, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 20), st.integers(2, 40))
def test_hvector_norm_nonnegative_and_consistent(seed, n):
    rng = np.random.default_rng(seed)
    t = np.sort(np.concatenate([[0.0, 1.0], rng.uniform(0, 1, n - 1)]))
    t = np.unique(t)
    v = rng.normal(size=(3, t.size, 2))
    H = cyl.HVector(t, v)
    n2 = H.norm2()
    assert np.all(n2 >= 0)
    assert np.allclose(n2, H.inner(H), rtol=1e-12, atol=1e-14)
    a, b = sorted(rng.uniform(0, 1, 2))
    parts = H.norm2_windows([(0.0, a), (a, b), (b, 1.0)])
    assert np.allclose(sum(parts), n2, rtol=1e-12, atol=1e-14)
