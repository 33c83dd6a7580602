import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, stats

from pathspace import cylinder as cyl
from pathspace import functions as fn
from pathspace import hbm, verify
from pathspace.exceptions import UsageError
from pathspace.geometry import FramePoint, geodesic_step, get_manifold


def sampler(name="flat:2", n=4000, steps=32, seed=0, T=1.0, **kw):
    return hbm.PathSampler(get_manifold(name), T, steps, n, seed, **kw)


def gaussian_entropy(eps, var=1 / 3):
    """``Ent(F^2)`` for ``F = 1 + eps X``, ``X ~ N(0, var)``, by quadrature."""
    sd = np.sqrt(var)
    pdf = stats.norm(0, sd).pdf
    m2 = 1 + eps ** 2 * var
    xlogx = lambda x: (1 + eps * x) ** 2 * np.log((1 + eps * x) ** 2) * pdf(x)  # noqa: E731
    val, _ = integrate.quad(xlogx, -12 * sd, 12 * sd, points=[-1 / eps], limit=200)
    return val - m2 * np.log(m2)


# verdict rule -----------------------------------------------------------------------

def test_decide():
    assert verify.decide(1.0, 0.1)[0] == "holds"
    assert verify.decide(-1.0, 0.1)[0] == "violated"
    assert verify.decide(0.2, 0.1)[0] == "inconclusive"
    assert verify.decide(0.2, 0.01, budget=0.5)[0] == "inconclusive"
    v, tol, eq = verify.decide(0.0, 0.0)
    assert v == "inconclusive" and eq and tol == verify.EQUALITY_ATOL
    assert verify.decide(np.nan, 0.1)[0] == "inconclusive"


# inequality suites ------------------------------------------------------------------

@pytest.mark.parametrize("name,K", [("flat:2", 0.0), ("sphere:2", -1.0), ("hyperbolic:2", 1.0)])
def test_equality_at_constants(name, K):
    S = sampler(name, n=500)
    reps = verify.run_suite(name, ["constant:1", "constant:2.5"], K, S, (1, 2, 4))
    assert len(reps) == 2 * 8
    for r in reps:
        assert abs(r.margin) <= 1e-12 and r.equality and r.acceptable
        assert r.lhs.value == pytest.approx(0.0, abs=1e-12)


def test_flat_lsi_gaussian_oracle():
    eps = 0.1
    S = sampler(n=20000, seed=3)
    F = cyl.build("flat:2", f"affine(1;{eps};linear-coordinate:0)")
    oracle = gaussian_entropy(eps)
    assert oracle == pytest.approx(2 * eps ** 2 / 3, rel=0.05)
    rd = verify.check_lsi_damped("flat:2", F, S)
    rl = verify.check_lsi_l2("flat:2", F, 0.0, S)
    for r in (rd, rl):
        assert abs(r.lhs.value - oracle) < 4 * r.lhs.stderr + 1e-4 * oracle
    # damped energy eps^2/6 and L2 energy eps^2/2 are exact on flat
    assert rd.rhs.value == pytest.approx(2 * eps ** 2 / 6, rel=1e-12)
    assert rl.rhs.value == pytest.approx(2 * 0.5 * eps ** 2 / 2, rel=1e-12)
    # the literal prefactor 2 sits a factor 2 below the Gaussian entropy at this F
    assert rd.verdict == "violated"
    g = verify.check_lsi_damped("flat:2", F, S, normalization="gaussian")
    assert g.verdict != "violated"


def test_gross_equality_for_exponentials():
    # Ent(F^2) = 2 E|D~F|^2 for F = exp(eps X) with X linear Gaussian
    eps = 0.3
    S = sampler(n=20000, seed=4)
    F = cyl.build("flat:2", f"exp({eps};linear-coordinate:0)")
    r = verify.check_lsi_damped("flat:2", F, S, normalization="gaussian")
    assert abs(r.margin) < 4 * r.margin_stderr
    var = 1 / 3
    exact = 2 * eps ** 2 * var * np.exp(2 * eps ** 2 * var)
    assert abs(r.lhs.value - exact) < 4 * r.lhs.stderr


def test_flat_l2_rhs_dominates_damped_rhs():
    # |int_t^1 v|_L2 <= (2/pi) |v|_L2 and 4/pi^2 < 1/2
    S = sampler(n=300, seed=1)
    M = get_manifold("flat:2")
    suite = cyl.default_suite(M)
    reps = verify.run_suite(M, suite, 0.0, S, (1,), ("lsi-damped", "lsi-l2"))
    by = {}
    for r in reps:
        by.setdefault(r.function, {})[r.inequality] = r
    for f, rr in by.items():
        assert rr["lsi-l2"].rhs.value >= rr["lsi-damped"].rhs.value - 1e-15


def test_l2_rhs_monotone_in_K():
    S = sampler(n=300, seed=2)
    F = "product(linear-coordinate:0;tanh-coordinate:1)"
    Ks = np.linspace(-3, 3, 13)
    rhs = [verify.check_lsi_l2("flat:2", F, K, S).rhs.value for K in Ks]
    assert np.all(np.diff(rhs) >= 0)


def test_flat_poincare_example():
    S = sampler(n=20000, seed=5, steps=64)
    r = verify.check_poincare("flat:2", "linear-coordinate:0", 0.0, 1.0, 1, None, S)
    assert abs(r.lhs.value - 1 / 3) < 3 * r.lhs.stderr
    assert r.rhs.value == pytest.approx(2.0, abs=1e-12)
    assert r.verdict == "holds"
    c = verify.check_poincare("flat:2", "constant:4", 0.0, 1.0, 1, None, S)
    assert c.equality and c.margin == 0


def test_reports_pair_lhs_and_rhs_on_the_same_paths():
    # re-running with new seeds moves the estimate by <= 4 stderr in most repetitions
    F = "sin(linear-coordinate:0)"
    base = verify.check_poincare("flat:2", F, 0.0, 1.0, 2, None, sampler(n=20000, seed=999))
    hits = 0
    for s in range(50):
        r = verify.check_poincare("flat:2", F, 0.0, 1.0, 2, None, sampler(n=1000, seed=s))
        hits += abs(r.margin - base.margin) <= 4 * np.hypot(r.margin_stderr, base.margin_stderr)
    assert hits >= 0.95 * 50


def test_suite_worker_invariance():
    M = get_manifold("hyperbolic:2")
    exprs = cyl.default_suite(M)[:6]
    a = verify.run_suite(M, exprs, 1.0, sampler("hyperbolic:2", n=9000, workers=1))
    b = verify.run_suite(M, exprs, 1.0, sampler("hyperbolic:2", n=9000, workers=3))
    assert [r.to_dict() for r in a] == [r.to_dict() for r in b]


def test_window_validation():
    S = sampler(T=0.4, n=10)
    with pytest.raises(UsageError):
        verify.check_poincare("flat:2", "linear-coordinate:0", 0.0, 0.4, 1, None, S)
    with pytest.raises(UsageError):
        verify.check_poincare("flat:2", "linear-coordinate:0", 0.0, 1.0, 1, None, S)
    y = FramePoint(np.array([1.0, 0.0]), np.eye(2))
    with pytest.raises(UsageError):
        verify.check_lsi_windowed("flat:2", "linear-coordinate:0", 0.0, 0.4, 3, y, S)
    with pytest.raises(UsageError):
        verify.check_lsi_l2("sphere:2", "linear-coordinate:0", 0.0, S)


def test_report_serialization():
    r = verify.check_poincare("flat:2", "linear-coordinate:0", 0.0, 1.0, 1, None, sampler(n=100))
    d = r.to_dict()
    assert d["schema"] == verify.REPORT_SCHEMA and d["verdict"] == r.verdict
    import json

    json.dumps(d)


# semigroup --------------------------------------------------------------------------

def test_semigroup_examples():
    M = get_manifold("flat:2")
    S = sampler(n=20000, steps=20, seed=6)
    y = FramePoint(np.array([0.4, -0.2]), np.eye(2))
    grid = [0.25, 0.5, 1.0]
    one = verify.estimate_semigroup(M, fn.constant(1.0), y, grid, S)
    assert np.all(one.values == 1.0) and np.all(one.stderr == 0)
    x1 = verify.estimate_semigroup(M, fn.coordinate(M, 0), y, grid, S)
    assert np.all(np.abs(x1.values - 0.4) < 3 * x1.stderr)
    assert np.allclose(x1.gradient, [1.0, 0.0], atol=1e-10)
    sq = fn.SiteFunction("x0^2", lambda x: x[..., 0] ** 2,
                         lambda x: np.stack([2 * x[..., 0], 0 * x[..., 0]], axis=-1))
    e = verify.estimate_semigroup(M, sq, y, grid, S)
    assert np.all(np.abs(e.values - (0.16 + np.array(grid))) < 3 * e.stderr)
    assert np.allclose(e.gradient[:, 0], 0.8, atol=4 * e.gradient_stderr[:, 0].max() + 1e-6)


def test_semigroup_grid_validation():
    S = sampler(n=10, steps=10)
    with pytest.raises(UsageError):
        verify.estimate_semigroup("flat:2", fn.constant(1.0), None, [0.33], S)
    with pytest.raises(UsageError):
        verify.estimate_semigroup("flat:2", fn.constant(1.0), None, [0.5], hbm.sample_path("flat:2"))


@pytest.mark.parametrize("name", ["flat:2", "sphere:2", "hyperbolic:2"])
def test_test_function_properties(name):
    M = get_manifold(name)
    y = M.base()
    f = verify.build_test_function(M, y)
    assert f.grad_norm(M, y.x, y.U) == pytest.approx(1.0, abs=1e-12)
    rng = np.random.default_rng(0)
    for _ in range(10):
        v = rng.normal(size=M.dim)
        v /= np.linalg.norm(v)
        sec = []
        for h in (1e-2, 5e-3):
            xp = geodesic_step(M, y, h * v).x
            xm = geodesic_step(M, y, -h * v).x
            sec.append(abs(f(xp) - 2 * f(y.x) + f(xm)))
        # a vanishing Hessian makes second differences O(h^4) rather than O(h^2)
        assert sec[0] < 1e-6 and (sec[1] <= sec[0] / 8 or sec[0] < 1e-12)


def test_gradient_inequality_flat_equality():
    M = get_manifold("flat:2")
    f = verify.build_test_function(M)
    for T in (0.1, 1.0):
        r = verify.check_gradient_inequality(M, f, None, T, 0.0, sampler(n=2000, T=T))
        assert r.lhs.value == pytest.approx(T, abs=1e-12) and r.rhs.value == pytest.approx(T, abs=1e-12)
        assert r.verdict == "inconclusive" and r.equality


def test_gradient_inequality_sphere_holds():
    M = get_manifold("sphere:2")
    f = verify.build_test_function(M)
    r = verify.check_gradient_inequality(M, f, None, 0.5, -1.0, sampler("sphere:2", n=8000, steps=32, T=0.5))
    assert r.verdict == "holds" and r.margin > 0
    assert r.details["admissible"]


def test_gradient_inequality_requires_sampler():
    with pytest.raises(UsageError):
        verify.check_gradient_inequality("flat:2", verify.build_test_function("flat:2"), None, 1.0, 0.0,
                                         hbm.sample_path("flat:2"))


# curvature limits -------------------------------------------------------------------

@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(1e-3, 0.1), min_size=2, max_size=4, unique=True))
def test_richardson_weights(T):
    T = sorted(T, reverse=True)
    if min(np.diff(sorted(T))) < 1e-3:
        return
    w = verify._richardson_weights(T)
    assert np.sum(w) == pytest.approx(1.0, abs=1e-8)
    for k in range(1, len(T)):
        assert np.dot(w, np.power(T, k)) == pytest.approx(0.0, abs=1e-8)


def test_richardson_default_weights():
    assert np.allclose(verify._richardson_weights([0.02, 0.01, 0.005]), [1 / 3, -2, 8 / 3])


def test_ricci_targets():
    for name, target in (("flat:2", 0.0), ("sphere:2", 0.5), ("hyperbolic:2", -0.5), ("sphere:3", 1.0)):
        M = get_manifold(name)
        assert verify.ricci_target(M, verify.build_test_function(M), M.base()) == pytest.approx(target)


def test_ricci_limits_flat_and_agreement():
    r = verify.estimate_ricci_limits("flat:2", None, None, n_paths=4000, n_steps=32)
    for k in ("gradient", "variance"):
        assert abs(r[k].estimate.value) < 1e-9
    assert verify.limits_agree(r["gradient"], r["variance"])


def test_ricci_limits_sphere_small_budget():
    r = verify.estimate_ricci_limits("sphere:2", None, None, n_paths=20000, n_steps=32, seed=1)
    g, v = r["gradient"], r["variance"]
    assert abs(g.estimate.value - 0.5) < 4 * g.estimate.stderr + 0.05
    assert abs(v.estimate.value - 0.5) < 4 * v.estimate.stderr + 0.05
    assert verify.limits_agree(g, v)


def test_ricci_tseq_validation():
    with pytest.raises(UsageError):
        verify.estimate_ricci_limits("flat:2", None, None, T_seq=(0.01,), n_paths=10)
    with pytest.raises(UsageError):
        verify.estimate_ricci_limits("flat:2", None, None, T_seq=(0.01, 0.01), n_paths=10)


def test_tail_window_search():
    assert verify.tail_window_expression("linear-coordinate:0", 1.0, 4) == \
        "affine(0;4;window(0.75;1;linear-coordinate:0))"
    with pytest.raises(UsageError):
        verify.tail_window_expression("linear-coordinate:0", 0.2, 1)
    reps = verify.poincare_tail_search("flat:2", "linear-coordinate:0", 0.0, 1.0, 1,
                                       sampler(n=4000, steps=32, seed=3), ks=(1, 2, 4))
    assert [r.details["k"] for r in reps] == [1, 2, 4]
    assert all(not r.gating for r in reps)
    # with the correct K no row is a violation
    assert all(r.verdict != "violated" for r in reps)
