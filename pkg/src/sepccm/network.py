"""Networks of input-affine polynomial systems.

Node ``i`` owns the global coordinates ``offsets[i] .. offsets[i] + n_i - 1``.
Its drift ``f_i`` may read its own and its neighbours' coordinates; its input
matrix ``B_i`` may read only its own.

Network spec file grammar (``#`` starts a comment, blank lines ignored)::

    edges = 0-1, 1-2          # undirected; omit or leave empty for one node

    [node 0]
    dims = 3 1                # n_i m_i
    f[0] = -1.001*v0 + v2 + 0.001*v3
    f[1] = ...
    B[2,0] = 1                # entries not listed are zero

Nodes are 0-based and must appear in order; ``f[k]`` and ``B[r,c]`` are local
row/column indices, polynomial variables ``v<i>`` are global.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from functools import cached_property
from importlib import resources

import numpy as np

from .polyalg import (
    ZERO,
    CompiledMatrix,
    CompiledPolys,
    PolyMatrix,
    PolyParseError,
    PolyVector,
    parse_poly,
)


class NetworkError(ValueError):
    pass


class LocalityError(NetworkError):
    def __init__(self, node: int, var: int, what: str = "f"):
        self.node = node
        self.var = var
        super().__init__(f"node {node}: {what} references v{var}, which belongs to neither the node nor its neighbours")


class DisconnectedGraphError(NetworkError):
    pass


class SpecParseError(NetworkError):
    def __init__(self, line: int, msg: str):
        self.line = line
        super().__init__(f"line {line}: {msg}")


@dataclass(frozen=True)
class Graph:
    node_count: int
    edges: frozenset

    def __post_init__(self):
        if self.node_count <= 0:
            raise NetworkError("graph needs at least one node")
        norm = set()
        for i, j in self.edges:
            if i == j:
                raise NetworkError(f"self-loop at node {i}")
            if not (0 <= i < self.node_count and 0 <= j < self.node_count):
                raise NetworkError(f"edge ({i},{j}) references a missing node")
            norm.add((min(i, j), max(i, j)))
        object.__setattr__(self, "edges", frozenset(norm))

    def neighbors(self, i: int) -> tuple:
        return tuple(sorted({b for a, b in self.edges if a == i} | {a for a, b in self.edges if b == i}))

    def is_connected(self) -> bool:
        seen = {0}
        stack = [0]
        while stack:
            k = stack.pop()
            for j in self.neighbors(k):
                if j not in seen:
                    seen.add(j)
                    stack.append(j)
        return len(seen) == self.node_count


@dataclass(frozen=True)
class NodeDynamics:
    n: int
    m: int
    f: PolyVector
    B: PolyMatrix

    def __post_init__(self):
        if self.f.dim != self.n:
            raise NetworkError(f"f has {self.f.dim} entries for n={self.n}")
        if self.B.shape != (self.n, self.m):
            raise NetworkError(f"B is {self.B.shape}, expected {(self.n, self.m)}")


@dataclass(frozen=True, eq=False)
class Network:
    graph: Graph
    nodes: tuple
    offsets: tuple = field(init=False)

    def __post_init__(self):
        if len(self.nodes) != self.graph.node_count:
            raise NetworkError(f"{len(self.nodes)} node dynamics for {self.graph.node_count} graph nodes")
        offs, acc = [], 0
        for nd in self.nodes:
            offs.append(acc)
            acc += nd.n
        object.__setattr__(self, "offsets", tuple(offs))
        if not self.graph.is_connected():
            raise DisconnectedGraphError("graph is not connected")
        for i, nd in enumerate(self.nodes):
            allowed = set(self.local_vars(i))
            for v in sorted(nd.f.variables()):
                if v not in allowed:
                    raise LocalityError(i, v, "f")
            own = set(self.node_vars(i))
            for v in sorted(nd.B.variables()):
                if v not in own:
                    raise LocalityError(i, v, "B")

    @property
    def N(self) -> int:
        return len(self.nodes)

    @property
    def n(self) -> int:
        return sum(nd.n for nd in self.nodes)

    @property
    def m(self) -> int:
        return sum(nd.m for nd in self.nodes)

    @cached_property
    def input_offsets(self) -> tuple:
        offs, acc = [], 0
        for nd in self.nodes:
            offs.append(acc)
            acc += nd.m
        return tuple(offs)

    def neighbors(self, i: int) -> tuple:
        return self.graph.neighbors(i)

    def node_vars(self, i: int) -> tuple:
        return tuple(range(self.offsets[i], self.offsets[i] + self.nodes[i].n))

    def local_vars(self, i: int) -> tuple:
        """Own coordinates followed by neighbour coordinates (neighbours in index order)."""
        out = list(self.node_vars(i))
        for j in self.neighbors(i):
            out.extend(self.node_vars(j))
        return tuple(out)

    def node_slice(self, i: int) -> slice:
        return slice(self.offsets[i], self.offsets[i] + self.nodes[i].n)

    def input_slice(self, i: int) -> slice:
        return slice(self.input_offsets[i], self.input_offsets[i] + self.nodes[i].m)

    @cached_property
    def full(self) -> tuple:
        return assemble_full(self)

    @cached_property
    def _compiled(self):
        f, B = self.full
        allv = range(self.n)
        return CompiledPolys(list(f.entries), allv), CompiledMatrix(B, allv)

    def eval_f(self, x) -> np.ndarray:
        return self._compiled[0](np.asarray(x, float)[None, :])[0]

    def eval_B(self, x) -> np.ndarray:
        return self._compiled[1](np.asarray(x, float)[None, :])[0]

    def vector_field(self, x, u) -> np.ndarray:
        return self.eval_f(x) + self.eval_B(x) @ np.asarray(u, float)

    @cached_property
    def _node_B(self) -> tuple:
        return tuple(CompiledMatrix(nd.B, self.node_vars(i)) for i, nd in enumerate(self.nodes))

    def eval_B_node(self, i: int, X_local) -> np.ndarray:
        """B_i at a batch of points in node-local coordinates, shape (P, n_i, m_i)."""
        return self._node_B[i](X_local)


@dataclass(frozen=True)
class JacobianBlocks:
    net: Network
    A_blocks: dict

    def block(self, i: int, j: int) -> PolyMatrix:
        if (i, j) in self.A_blocks:
            return self.A_blocks[(i, j)]
        return PolyMatrix.zeros(self.net.nodes[i].n, self.net.nodes[j].n)


def jacobian_blocks(net: Network) -> JacobianBlocks:
    blocks = {}
    for i, nd in enumerate(net.nodes):
        for j in (i,) + net.neighbors(i):
            blocks[(i, j)] = nd.f.jacobian(net.node_vars(j))
    return JacobianBlocks(net, blocks)


def assemble_full(net: Network) -> tuple:
    f = PolyVector([p for nd in net.nodes for p in nd.f.entries])
    n, m = net.n, net.m
    entries = [ZERO] * (n * m)
    for i, nd in enumerate(net.nodes):
        r0, c0 = net.offsets[i], net.input_offsets[i]
        for a in range(nd.n):
            for b in range(nd.m):
                entries[(r0 + a) * m + c0 + b] = nd.B[a, b]
    return f, PolyMatrix(n, m, entries)


@dataclass(frozen=True)
class ReferenceSignal:
    """Reference initial state and a closed-form input ``t -> u*(t)``.

    ``kind`` is ``zero``, ``constant`` (``value``) or ``sinusoid``
    (``value + amplitude * sin(omega * t + phase)``).
    """

    x_star0: np.ndarray
    kind: str = "zero"
    value: np.ndarray | None = None
    amplitude: np.ndarray | None = None
    omega: float = 1.0
    phase: float = 0.0
    m: int | None = None

    def __post_init__(self):
        if self.kind not in ("zero", "constant", "sinusoid"):
            raise ValueError(f"unknown reference kind {self.kind!r}")
        if self.kind != "zero" and self.value is None and self.amplitude is None:
            raise ValueError(f"{self.kind} reference needs value or amplitude")

    def u_star(self, t: float) -> np.ndarray:
        m = self.m if self.m is not None else len(self.value if self.value is not None else self.amplitude)
        u = np.zeros(m) if self.value is None else np.array(self.value, dtype=float)
        if self.kind == "zero":
            return np.zeros(m)
        if self.kind == "sinusoid" and self.amplitude is not None:
            u = u + np.asarray(self.amplitude, float) * math.sin(self.omega * t + self.phase)
        return u


# spec file parsing

_SECTION = re.compile(r"^\[\s*node\s+(\d+)\s*\]$")
_ENTRY = re.compile(r"^(f|B)\[\s*(\d+)\s*(?:,\s*(\d+)\s*)?\]$")


def _strip(line: str) -> str:
    return line.split("#", 1)[0].strip()


def load_network(spec_text: str) -> Network:
    edges: set = set()
    nodes: list = []
    cur = None

    def close(lineno):
        if cur is None:
            return
        if cur["dims"] is None:
            raise SpecParseError(lineno, f"node {len(nodes)} has no dims line")
        n, m = cur["dims"]
        f = [cur["f"].get(k, ZERO) for k in range(n)]
        B = [cur["B"].get((a, b), ZERO) for a in range(n) for b in range(m)]
        try:
            nodes.append(NodeDynamics(n, m, PolyVector(f), PolyMatrix(n, m, B)))
        except (NetworkError, ValueError) as exc:
            raise SpecParseError(cur["line"], str(exc)) from exc

    for lineno, raw in enumerate(spec_text.splitlines(), start=1):
        line = _strip(raw)
        if not line:
            continue
        sec = _SECTION.match(line)
        if sec:
            close(lineno)
            idx = int(sec.group(1))
            if idx != len(nodes):
                raise SpecParseError(lineno, f"expected section [node {len(nodes)}], found [node {idx}]")
            cur = {"dims": None, "f": {}, "B": {}, "line": lineno}
            continue
        if "=" not in line:
            raise SpecParseError(lineno, f"expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if cur is None:
            if key != "edges":
                raise SpecParseError(lineno, f"unknown header key {key!r}")
            for tok in filter(None, (t.strip() for t in value.split(","))):
                mt = re.fullmatch(r"(\d+)\s*-\s*(\d+)", tok)
                if not mt:
                    raise SpecParseError(lineno, f"bad edge {tok!r}")
                edges.add((int(mt.group(1)), int(mt.group(2))))
            continue
        if key == "dims":
            parts = value.split()
            if len(parts) != 2 or not all(p.isdigit() for p in parts) or int(parts[0]) < 1:
                raise SpecParseError(lineno, "dims needs two integers 'n m' with n >= 1")
            cur["dims"] = (int(parts[0]), int(parts[1]))
            continue
        ent = _ENTRY.match(key)
        if not ent:
            raise SpecParseError(lineno, f"unknown key {key!r}")
        if cur["dims"] is None:
            raise SpecParseError(lineno, "dims must precede f and B entries")
        try:
            poly = parse_poly(value)
        except PolyParseError as exc:
            raise SpecParseError(lineno, str(exc)) from exc
        n, m = cur["dims"]
        if ent.group(1) == "f":
            k = int(ent.group(2))
            if ent.group(3) is not None or k >= n:
                raise SpecParseError(lineno, f"f index out of range for n={n}")
            cur["f"][k] = poly
        else:
            if ent.group(3) is None:
                raise SpecParseError(lineno, "B entries need two indices")
            a, b = int(ent.group(2)), int(ent.group(3))
            if a >= n or b >= m:
                raise SpecParseError(lineno, f"B index out of range for dims ({n},{m})")
            cur["B"][(a, b)] = poly
    close(len(spec_text.splitlines()))
    if not nodes:
        raise SpecParseError(1, "no [node] sections")
    return Network(Graph(len(nodes), frozenset(edges)), tuple(nodes))


def dump_network(net: Network) -> str:
    lines = ["edges = " + ", ".join(f"{i}-{j}" for i, j in sorted(net.graph.edges)), ""]
    for i, nd in enumerate(net.nodes):
        lines.append(f"[node {i}]")
        lines.append(f"dims = {nd.n} {nd.m}")
        for k, p in enumerate(nd.f.entries):
            lines.append(f"f[{k}] = {p}")
        for a in range(nd.n):
            for b in range(nd.m):
                if not nd.B[a, b].is_zero():
                    lines.append(f"B[{a},{b}] = {nd.B[a, b]}")
        lines.append("")
    return "\n".join(lines)


def _data_text(name: str) -> str:
    return resources.files("sepccm.data").joinpath(name).read_text()


def example_network() -> Network:
    return load_network(_data_text("three_node.net"))


def builtin_example():
    """Three-node path network with its published metric and multipliers."""
    from .metric import load_metric_text

    net = example_network()
    metric, mult = load_metric_text(_data_text("three_node_published.metric"))
    return net, metric, mult
