"""Random small networks with metrics and multipliers, for property tests."""

import itertools

import numpy as np
from hypothesis import strategies as st

from sepccm.metric import Multipliers, SumSeparableMetric
from sepccm.network import Graph, Network, NodeDynamics
from sepccm.polyalg import PolyMatrix, Polynomial, PolyVector


def random_poly(rng, vars, degree, n_terms, scale=1.0):
    terms = {}
    for _ in range(n_terms):
        d = int(rng.integers(0, degree + 1))
        vs = rng.choice(vars, size=d) if d else []
        mono: dict = {}
        for v in vs:
            mono[int(v)] = mono.get(int(v), 0) + 1
        key = tuple(sorted(mono.items()))
        terms[key] = terms.get(key, 0.0) + scale * float(rng.normal())
    return Polynomial(terms)


def random_instance(seed, max_nodes=3, max_dim=3, lam=None, constant_B=None):
    rng = np.random.default_rng(seed)
    N = int(rng.integers(1, max_nodes + 1))
    dims = [int(rng.integers(1, max_dim + 1)) for _ in range(N)]
    ms = [int(rng.integers(1, 3)) for _ in range(N)]
    edges = [(i, i + 1) for i in range(N - 1)]
    for i, j in itertools.combinations(range(N), 2):
        if j > i + 1 and rng.random() < 0.5:
            edges.append((i, j))
    graph = Graph(N, tuple(edges))
    offsets = np.concatenate([[0], np.cumsum(dims)[:-1]]).astype(int)
    own = [list(range(offsets[i], offsets[i] + dims[i])) for i in range(N)]
    nodes = []
    cB = rng.random() < 0.5 if constant_B is None else constant_B
    for i in range(N):
        local = own[i] + [v for j in graph.neighbors(i) for v in own[j]]
        f = PolyVector([random_poly(rng, local, 3, 4) for _ in range(dims[i])])
        B = PolyMatrix(dims[i], ms[i], [random_poly(rng, own[i], 0 if cB else 1, 2) for _ in range(dims[i] * ms[i])])
        nodes.append(NodeDynamics(dims[i], ms[i], f, B))
    net = Network(graph, tuple(nodes))
    blocks = []
    for i in range(N):
        up = {(a, b): random_poly(rng, own[i], 2, 3) for a in range(dims[i]) for b in range(a, dims[i])}
        blocks.append(PolyMatrix.symmetric_from_upper(dims[i], up))
    rho = tuple(random_poly(rng, net.local_vars(i), 2, 4) for i in range(N))
    lam = float(rng.uniform(0, 1)) if lam is None else lam
    return net, SumSeparableMetric(tuple(blocks), lam), Multipliers(rho)


instances = st.integers(0, 2**31 - 1).map(random_instance)
