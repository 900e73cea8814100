import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sepccm.polyalg import (
    CompiledMatrix,
    CompiledPolys,
    DimensionError,
    PolyMatrix,
    PolyParseError,
    PolyVector,
    Polynomial,
    block_diag,
    diff_poly,
    directional_derivative,
    eval_poly,
    format_poly,
    parse_poly,
    poly_arith,
    polymat_eval,
)

from .oracles import fd_directional

x = Polynomial.var(0)
y = Polynomial.var(1)

coeffs = st.floats(min_value=-5, max_value=5, allow_nan=False).filter(lambda c: abs(c) > 1e-3)
monos = st.lists(st.tuples(st.integers(0, 3), st.integers(1, 3)), max_size=3).map(
    lambda ms: tuple(sorted(dict(ms).items()))
)
polys = st.dictionaries(monos, coeffs, max_size=6).map(Polynomial)
points = st.lists(st.floats(min_value=-1.5, max_value=1.5), min_size=4, max_size=4).map(np.array)


def test_eval_monomial():
    assert eval_poly(x**2 * y, [2.0, 3.0]) == 12.0


def test_eval_out_of_range():
    with pytest.raises(DimensionError):
        eval_poly(Polynomial.var(4), [1.0, 2.0])


def test_paper_entries(example):
    net, metric, mult = example
    assert mult.rho[0](np.zeros(9)) == pytest.approx(5.39, abs=1e-12)
    xx = np.zeros(9)
    xx[0] = 1.0
    assert metric.W_blocks[0][1, 1](xx) == pytest.approx(0.22 + 0.05 + 2.61, abs=1e-12)
    xx = np.zeros(9)
    xx[6] = 1.0
    assert metric.W_blocks[2][1, 1](xx) == pytest.approx(0.38 + 0.04 + 2.86, abs=1e-12)


def test_diff_examples(example):
    assert diff_poly(x**2, 0) == 2 * x
    assert diff_poly(x**2 * y, 1) == x**2
    W0 = example[1].W_blocks[0]
    assert diff_poly(W0[0, 1], 0) == Polynomial.const(-0.11)


def test_arith_examples():
    assert poly_arith(x + 1, x - 1, "mul") == x**2 - 1
    assert poly_arith(x, Polynomial(), "add") == x
    assert poly_arith(x**2, 2 * 0.1, "scale") == Polynomial({((0, 2),): 0.2})
    with pytest.raises(ValueError):
        poly_arith(x, x, "div")


def test_pruning_and_canonical_order():
    p = (x + 1e-15) - x
    assert p.is_zero()
    assert list((y + x**2 + 1).terms) == [((0, 2),), ((1, 1),), ()]


@given(polys, polys, points)
def test_product_evaluates_to_product(p, q, pt):
    lhs = (p * q)(pt)
    rhs = p(pt) * q(pt)
    assert lhs == pytest.approx(rhs, rel=1e-12, abs=1e-9)


@given(polys, st.integers(0, 3), st.integers(0, 3))
def test_mixed_partials_commute(p, u, v):
    assert p.diff(u).diff(v).allclose(p.diff(v).diff(u), atol=0.0)


@given(polys)
def test_text_roundtrip(p):
    assert parse_poly(format_poly(p)) == p


def test_parse_syntax():
    p = parse_poly("0.22*v0^2 + 0.05*v0 - 2.61")
    assert p == Polynomial({((0, 2),): 0.22, ((0, 1),): 0.05, (): -2.61})
    assert parse_poly("-v1*v0") == Polynomial({((0, 1), (1, 1)): -1.0})
    assert parse_poly("0").is_zero()


@pytest.mark.parametrize("bad", ["v0 +", "2**v0", "x1", "v0^-1", "3 v0"])
def test_parse_errors(bad):
    with pytest.raises(PolyParseError):
        parse_poly(bad)


def test_polymat_eval_paper(example):
    W0 = example[1].W_blocks[0]
    want = np.array([[0.06, -0.01, -0.16], [-0.01, 2.61, 0.28], [-0.16, 0.28, 0.89]])
    got = polymat_eval(W0, np.zeros(9))
    assert np.array_equal(got, want)
    assert np.array_equal(got, got.T)


def test_identity_eval():
    I = PolyMatrix.identity(3)
    assert np.array_equal(polymat_eval(I, [0.3, -2.0, 7.0]), np.eye(3))


def test_symmetric_flag_checks_entries():
    with pytest.raises(ValueError):
        PolyMatrix.from_rows([[x, y], [x, x]], symmetric=True)
    S = PolyMatrix.from_rows([[x, y], [y, x]], symmetric=True)
    assert S.symmetric


def test_matrix_dimension_errors():
    A = PolyMatrix.zeros(2, 3)
    with pytest.raises(ValueError):
        A @ A
    with pytest.raises(ValueError):
        A + PolyMatrix.zeros(3, 2)


def test_directional_derivative_trivial():
    W = PolyMatrix.from_rows([[x]])
    assert directional_derivative(W, PolyVector([Polynomial.const(1.0)]), [0]) == PolyMatrix.from_rows(
        [[Polynomial.const(1.0)]]
    )
    W2 = PolyMatrix.from_rows([[x * y, x], [x, y**2]])
    zero = directional_derivative(W2, PolyVector([Polynomial(), Polynomial()]), [0, 1])
    assert zero.is_zero()
    with pytest.raises(ValueError):
        directional_derivative(W2, PolyVector([x]), [0, 1])


def test_directional_derivative_fd_example(example, rng):
    net, metric, _ = example
    f, _ = net.full
    W = metric.full_W()
    dW = directional_derivative(W, f, list(range(9)))
    for _ in range(100):
        pt = rng.uniform(-0.5, 0.5, 9)
        # t -> W(x + t f(x)) differentiated at t=0
        fd = fd_directional(lambda z: W.eval(z), pt, f.eval(pt), h=1e-5)
        assert np.max(np.abs(dW.eval(pt) - fd)) < 1e-6


def test_block_diag_and_block():
    A = PolyMatrix.from_rows([[x, y], [y, x]], symmetric=True)
    B = PolyMatrix.identity(1)
    D = block_diag([A, B])
    assert D.shape == (3, 3)
    assert D.block(0, 0, 2, 2) == A
    assert D[0, 2].is_zero()


@given(st.lists(polys, min_size=1, max_size=4), st.lists(points, min_size=1, max_size=5))
def test_compiled_matches_pointwise(ps, pts):
    X = np.array(pts)
    C = CompiledPolys(ps, range(4))
    got = C(X)
    want = np.array([[p(pt) for p in ps] for pt in pts])
    assert np.allclose(got, want, rtol=1e-12, atol=1e-10)


def test_compiled_matrix_symmetric(example, rng):
    W = example[1].full_W()
    X = rng.uniform(-1, 1, (20, 9))
    got = CompiledMatrix(W, range(9))(X)
    assert np.array_equal(got, np.swapaxes(got, 1, 2))
    assert np.allclose(got[3], W.eval(X[3]), atol=1e-14)
