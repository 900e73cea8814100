import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sepccm.metric import assemble_T_full, check_killing, save_metric
from sepccm.network import load_network
from sepccm.polyalg import CompiledMatrix
from sepccm.synthesis import (
    AffineConstraints,
    SynthesisProblem,
    export_metric,
    import_metric,
    monomials_upto,
    parameterize,
    realize,
    sampled_constraints,
    solve_feasibility,
    training_samples,
)

from .conftest import SCALAR_STABLE, SCALAR_UNSTABLE


def transcribe(tmpl, metric, mult):
    """Decision vector reproducing a given metric, or raise if it lies outside the template."""
    dv = np.zeros(tmpl.size)
    for k, e in enumerate(tmpl.entries):
        if e.kind == "W":
            dv[k] = metric.W_blocks[e.node][e.entry].coeff(e.monomial)
        else:
            dv[k] = mult.rho[e.node].coeff(e.monomial)
    return dv


def test_monomial_enumeration():
    assert monomials_upto([0], 2) == [(), ((0, 1),), ((0, 2),)]
    assert len(monomials_upto([0, 1, 2], 2)) == 10
    assert len(monomials_upto([3, 4], 0)) == 1


def test_template_counts(scalar_stable, example_net):
    assert parameterize(SynthesisProblem(scalar_stable, deg_W=0, deg_rho=0)).counts() == {"W0": 1, "rho0": 1}
    counts = parameterize(SynthesisProblem(example_net)).counts()
    assert counts == {"W0": 36, "W1": 36, "W2": 36, "rho0": 28, "rho1": 55, "rho2": 28}


def test_problem_validation(scalar_stable):
    with pytest.raises(ValueError):
        SynthesisProblem(scalar_stable, deg_W=-1)
    with pytest.raises(ValueError):
        SynthesisProblem(scalar_stable, lam=-0.1)
    with pytest.raises(ValueError):
        SynthesisProblem(scalar_stable, method="newton")
    with pytest.raises(ValueError):
        SynthesisProblem(scalar_stable, m_upper=1e-3)
    with pytest.raises(ValueError):
        SynthesisProblem(scalar_stable, box=((-1, 1), (-1, 1)))


def test_scalar_constraint_is_affine(scalar_stable):
    # f = -x, B = 1, constant w and rho: T = -2w - rho + 2 lam w
    prob = SynthesisProblem(scalar_stable, deg_W=0, deg_rho=0, lam=0.1, eps=1e-6)
    tmpl = parameterize(prob)
    X = np.array([[0.3]])
    for w, r in [(1.0, 0.0), (0.5, 1.0), (2.0, 3.0)]:
        mats = sampled_constraints(prob, [w, r], X)
        assert mats[0][0, 0] == pytest.approx(-2 * w - r + 0.2 * w + 1e-6, abs=1e-14)
        assert mats[1][0, 0] == pytest.approx(prob.m_lower - w, abs=1e-14)
    assert tmpl.size == 2


@given(st.integers(0, 10**6))
@settings(max_examples=10)
def test_constraints_affine_in_dv(example_net, seed):
    prob = SynthesisProblem(example_net, n_random=8, grid_per_axis=1, grid_cap=1)
    tmpl = parameterize(prob)
    cons = _cons(prob, tmpl)
    r = np.random.default_rng(seed)
    a, b = r.normal(size=tmpl.size), r.normal(size=tmpl.size)
    t = float(r.uniform(-2, 2))
    lhs = cons.T_of(t * a + (1 - t) * b)
    rhs = t * cons.T_of(a) + (1 - t) * cons.T_of(b)
    assert np.max(np.abs(lhs - rhs)) < 1e-9 * (1 + np.max(np.abs(lhs)))


_CACHE = {}


def _cons(prob, tmpl):
    key = id(prob.net)
    if key not in _CACHE:
        c = AffineConstraints(prob, tmpl)
        c.add_samples(training_samples(prob)[0])
        _CACHE[key] = c
    return _CACHE[key]


def test_phi_convex(example_net, rng):
    prob = SynthesisProblem(example_net, n_random=8, grid_per_axis=1, grid_cap=1)
    tmpl = parameterize(prob)
    cons = _cons(prob, tmpl)
    for _ in range(10):
        a, b = rng.normal(size=tmpl.size), rng.normal(size=tmpl.size)
        t = float(rng.uniform())
        mid = cons.phi(t * a + (1 - t) * b, 0.0, 50.0)
        assert mid <= t * cons.phi(a, 0.0, 50.0) + (1 - t) * cons.phi(b, 0.0, 50.0) + 1e-9


def test_subgradient_is_valid(example_net, rng):
    prob = SynthesisProblem(example_net, n_random=8, grid_per_axis=1, grid_cap=1)
    tmpl = parameterize(prob)
    cons = _cons(prob, tmpl)
    a = tmpl.x0 + 0.1 * rng.normal(size=tmpl.size)
    pa, g, _ = cons.evaluate(a, 0.0)
    for _ in range(10):
        b = a + 0.1 * rng.normal(size=tmpl.size)
        assert cons.phi(b, 0.0) >= pa + g @ (b - a) - 1e-9


def test_smoothed_upper_bounds_hard(example_net, rng):
    prob = SynthesisProblem(example_net, n_random=8, grid_per_axis=1, grid_cap=1)
    tmpl = parameterize(prob)
    cons = _cons(prob, tmpl)
    dv = tmpl.x0 + 0.05 * rng.normal(size=tmpl.size)
    for mu in (0.1, 0.01):
        F, g, hard = cons.smoothed(dv, mu, 0.0, prob.m_upper)
        assert hard == pytest.approx(cons.phi(dv, 0.0, prob.m_upper), abs=1e-12)
        assert hard <= F + 1e-12
        d = rng.normal(size=tmpl.size)
        h = 1e-6
        fd = (cons.smoothed(dv + h * d, mu, 0.0, prob.m_upper)[0]
              - cons.smoothed(dv - h * d, mu, 0.0, prob.m_upper)[0]) / (2 * h)
        assert g @ d == pytest.approx(fd, rel=1e-4, abs=1e-6)


def test_paper_transcription_matches_full_T(example_net, paper_metric, rng):
    metric, mult = paper_metric
    prob = SynthesisProblem(example_net, lam=metric.lam, n_random=8, grid_per_axis=1, grid_cap=1)
    tmpl = parameterize(prob)
    dv = transcribe(tmpl, metric, mult)
    m2, r2 = realize(example_net, tmpl, dv, metric.lam)
    for i in range(3):
        assert m2.W_blocks[i].allclose(metric.W_blocks[i], atol=1e-15)
        assert r2.rho[i].allclose(mult.rho[i], atol=1e-15)
    X = rng.uniform(-0.5, 0.5, (100, 9))
    cons = AffineConstraints(prob, tmpl)
    cons.add_samples(X)
    T_full = CompiledMatrix(assemble_T_full(example_net, metric, mult), range(9))(X)
    assert np.max(np.abs(cons.T_of(dv) - T_full)) < 1e-10


def test_scalar_stable_feasible(scalar_stable):
    res = solve_feasibility(SynthesisProblem(scalar_stable, lam=0.1, deg_W=0, deg_rho=0))
    assert res.feasible and res.certificate.verified
    w = res.metric.W_blocks[0][0, 0].coeff(())
    rho = res.mult.rho[0].coeff(())
    assert -1.8 * w - rho < 0 and w >= 1e-2 - 1e-12
    assert "feasible" in res.summary()


def test_unstable_uncontrolled_reports_infeasible():
    net = load_network(SCALAR_UNSTABLE)
    res = solve_feasibility(SynthesisProblem(net, lam=0.1, deg_W=2, deg_rho=0, max_iter=200, rounds=1))
    assert not res.feasible
    assert "infeasible at this parameterization" in res.summary()
    assert res.worst_constraint is not None
    assert "lower lambda" in res.message


def test_export_requires_feasible(tmp_path):
    net = load_network(SCALAR_UNSTABLE)
    res = solve_feasibility(SynthesisProblem(net, deg_W=0, deg_rho=0, max_iter=50, rounds=0))
    with pytest.raises(ValueError):
        export_metric(res, tmp_path / "x.metric")


def test_export_import_roundtrip_and_determinism(tmp_path):
    net = load_network(SCALAR_STABLE)
    prob = dict(lam=0.2, deg_W=0, deg_rho=2, seed=3)
    a = solve_feasibility(SynthesisProblem(net, **prob))
    b = solve_feasibility(SynthesisProblem(net, **prob))
    assert np.array_equal(a.dv, b.dv)
    export_metric(a, tmp_path / "a.metric")
    export_metric(b, tmp_path / "b.metric")
    assert (tmp_path / "a.metric").read_bytes() == (tmp_path / "b.metric").read_bytes()
    metric, mult = import_metric(tmp_path / "a.metric")
    save_metric(tmp_path / "c.metric", metric, mult)
    assert (tmp_path / "c.metric").read_bytes() == (tmp_path / "a.metric").read_bytes()


def test_constant_B_excludes_input_channel(example_net, rng):
    prob = SynthesisProblem(example_net)
    tmpl = parameterize(prob)
    assert tmpl.basis is None
    for _ in range(3):
        metric, mult = realize(example_net, tmpl, rng.normal(size=tmpl.size), 0.1)
        assert check_killing(example_net, metric).passed


def test_synthesized_metric_fixture(example_net, synth_metric):
    metric, mult = synth_metric
    assert check_killing(example_net, metric).passed
    assert metric.lam == pytest.approx(0.1)
