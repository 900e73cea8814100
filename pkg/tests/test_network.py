import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sepccm.network import (
    DisconnectedGraphError,
    Graph,
    LocalityError,
    ReferenceSignal,
    SpecParseError,
    assemble_full,
    dump_network,
    jacobian_blocks,
    load_network,
)
from sepccm.polyalg import PolyMatrix

from .conftest import SCALAR_STABLE
from .oracles import fd_jacobian


def test_example_structure(example_net):
    net = example_net
    assert net.N == 3 and net.n == 9 and net.m == 3
    assert [nd.n for nd in net.nodes] == [3, 3, 3]
    assert set(net.graph.edges) == {(0, 1), (1, 2)}
    assert net.neighbors(1) == (0, 2)


def test_scalar_network(scalar_stable):
    f, B = assemble_full(scalar_stable)
    assert f[0](np.array([2.0])) == -2.0
    assert B[0, 0](np.array([0.0])) == 1.0


def test_locality_violation():
    spec = """
edges = 0-1, 1-2
[node 0]
dims = 1 1
f[0] = v2
[node 1]
dims = 1 1
f[0] = v1
[node 2]
dims = 1 1
f[0] = v2
"""
    with pytest.raises(LocalityError) as err:
        load_network(spec)
    assert err.value.node == 0 and err.value.var == 2


def test_B_must_use_own_state():
    spec = "edges = 0-1\n[node 0]\ndims = 1 1\nf[0] = v0\nB[0,0] = v1\n[node 1]\ndims = 1 1\nf[0] = v1\n"
    with pytest.raises(LocalityError):
        load_network(spec)


def test_disconnected():
    spec = "edges = 0-1\n[node 0]\ndims = 1 1\n[node 1]\ndims = 1 1\n[node 2]\ndims = 1 1\n"
    with pytest.raises(DisconnectedGraphError):
        load_network(spec)


def test_parse_error_line_number():
    with pytest.raises(SpecParseError) as err:
        load_network("[node 0]\ndims = 1 1\nf[0] = v0 +\n")
    assert err.value.line == 3


def test_graph_rejects_self_loop():
    with pytest.raises(ValueError):
        Graph(2, ((0, 0),))


def test_jacobian_blocks_example(example_net):
    jb = jacobian_blocks(example_net)
    A12 = jb.block(0, 1).eval(np.zeros(9))
    want = np.zeros((3, 3))
    want[0, 0] = 1e-3
    assert np.allclose(A12, want, atol=1e-15, rtol=0)
    A11 = jb.block(0, 0).eval(np.zeros(9))
    assert np.allclose(A11, [[-1 - 1e-3, 0, 1], [0, 0, 1], [0, -1, 0]], atol=1e-15, rtol=0)
    assert jb.block(0, 2).is_zero()


def test_linear_node_jacobian():
    net = load_network("[node 0]\ndims = 2 1\nf[0] = 2*v0 - 3*v1\nf[1] = 0.5*v0\nB[1,0] = 1\n")
    A = jacobian_blocks(net).block(0, 0)
    assert A == PolyMatrix.from_array([[2.0, -3.0], [0.5, 0.0]])


def test_assemble_full_example(example_net):
    f, B = assemble_full(example_net)
    assert B.is_constant()
    Bv = B.eval(np.zeros(9))
    want = np.zeros((9, 3))
    want[2, 0] = want[5, 1] = want[8, 2] = 1.0
    assert np.array_equal(Bv, want)
    assert np.array_equal(f.eval(np.zeros(9)), np.zeros(9))


def test_full_jacobian_matches_blocks(example_net, rng):
    f, _ = assemble_full(example_net)
    J = f.jacobian(range(9))
    jb = jacobian_blocks(example_net)
    for i in range(3):
        for j in range(3):
            si, sj = example_net.node_slice(i), example_net.node_slice(j)
            assert J.block(si.start, sj.start, 3, 3) == jb.block(i, j)
    pt = rng.uniform(-1, 1, 9)
    assert np.allclose(J.eval(pt), fd_jacobian(example_net.eval_f, pt), atol=1e-7)


def test_off_neighbourhood_derivatives_vanish(example_net):
    f0 = example_net.nodes[0].f
    for v in example_net.node_vars(2):
        assert all(p.diff(v).is_zero() for p in f0)


@given(st.lists(st.floats(-2, 2), min_size=9, max_size=9))
def test_assembly_consistency(vals):
    from sepccm.network import example_network

    net = example_network()
    pt = np.array(vals)
    full = net.eval_f(pt)
    for i, nd in enumerate(net.nodes):
        local = np.array([p(pt) for p in nd.f])
        assert np.allclose(full[net.node_slice(i)], local, rtol=1e-12, atol=1e-12)


def test_dump_roundtrip(example_net):
    again = load_network(dump_network(example_net))
    assert dump_network(again) == dump_network(example_net)
    assert again.graph.edges == example_net.graph.edges


def test_vector_field(scalar_stable):
    assert scalar_stable.vector_field([1.0], [0.5]) == pytest.approx([-0.5])


def test_reference_signals():
    z = ReferenceSignal(np.zeros(2), m=2)
    assert np.array_equal(z.u_star(3.0), np.zeros(2))
    c = ReferenceSignal(np.zeros(1), kind="constant", value=np.array([2.0]))
    assert c.u_star(1.0)[0] == 2.0
    s = ReferenceSignal(np.zeros(1), kind="sinusoid", value=np.array([0.0]), amplitude=np.array([1.0]), omega=2.0)
    assert s.u_star(0.3)[0] == pytest.approx(np.sin(0.6))
    with pytest.raises(ValueError):
        ReferenceSignal(np.zeros(1), kind="square")


def test_single_node_spec_loads():
    net = load_network(SCALAR_STABLE)
    assert net.N == 1 and net.graph.is_connected()
