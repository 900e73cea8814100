"""Sum-separable metrics, the contraction certificate T(x), and sampled verification.

The dual metric ``W = diag(W_1, ..., W_N)`` is stored block by block, each
block written in the global variables of its own node.  ``M_i = W_i^{-1}``
is the Riemannian metric used by geodesics and the controller.

Metric file grammar::

    lambda = 0.1
    box = -1 1, -1 1, ...          # one 'lo hi' pair per global coordinate
    [node 0]
    dim = 3
    bounds = 0.01 4.2              # optional: eigenvalue range of W_0 on the box
    W[0,0] = ...                   # upper triangle; a lower entry must repeat its mirror
    rho = ...                      # omitted means zero
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np
from scipy.stats import qmc

from .network import Network, assemble_full, jacobian_blocks
from .polyalg import (
    ZERO,
    CompiledMatrix,
    CompiledPolys,
    PolyMatrix,
    PolyParseError,
    Polynomial,
    block_diag,
    directional_derivative,
    format_poly,
    parse_poly,
)

COND_LIMIT = 1e12


class MetricError(ValueError):
    pass


class SingularMetricError(MetricError):
    def __init__(self, node: int, cond: float):
        self.node = node
        self.cond = cond
        super().__init__(f"W_{node} is singular or ill-conditioned (condition number {cond:.3g})")


class MetricParseError(MetricError):
    def __init__(self, line: int, msg: str):
        self.line = line
        super().__init__(f"line {line}: {msg}")


def _box_tuple(box) -> tuple | None:
    if box is None:
        return None
    arr = np.asarray(box, dtype=float).reshape(-1, 2)
    if np.any(arr[:, 0] > arr[:, 1]):
        raise ValueError("box lower bounds must not exceed upper bounds")
    return tuple((float(lo), float(hi)) for lo, hi in arr)


def uniform_box(n: int, lo: float = -1.0, hi: float = 1.0) -> tuple:
    return tuple((float(lo), float(hi)) for _ in range(n))


@dataclass(frozen=True, eq=False)
class SumSeparableMetric:
    W_blocks: tuple
    lam: float
    box: tuple | None = None
    m_lower: tuple | None = None
    m_upper: tuple | None = None

    def __post_init__(self):
        object.__setattr__(self, "W_blocks", tuple(self.W_blocks))
        object.__setattr__(self, "box", _box_tuple(self.box))
        if self.lam < 0:
            raise MetricError("lambda must be nonnegative")
        blocks = []
        for i, W in enumerate(self.W_blocks):
            if W.rows != W.cols:
                raise MetricError(f"W_{i} must be square")
            if not W.symmetric:
                try:
                    W = W.symmetrized()
                except ValueError as exc:
                    raise MetricError(f"W_{i} is not symmetric") from exc
            blocks.append(W)
        object.__setattr__(self, "W_blocks", tuple(blocks))
        for i, (W, (lo, _)) in enumerate(zip(self.W_blocks, self.block_ranges)):
            for v in W.variables():
                if not lo <= v < lo + W.rows:
                    raise MetricError(f"W_{i} references v{v} outside its own block")
        if self.box is not None and len(self.box) != self.n:
            raise MetricError(f"box has {len(self.box)} intervals for state dimension {self.n}")
        for name in ("m_lower", "m_upper"):
            val = getattr(self, name)
            if val is not None:
                object.__setattr__(self, name, tuple(float(v) for v in val))

    @property
    def N(self) -> int:
        return len(self.W_blocks)

    @property
    def dims(self) -> tuple:
        return tuple(W.rows for W in self.W_blocks)

    @property
    def n(self) -> int:
        return sum(self.dims)

    @property
    def block_ranges(self) -> tuple:
        out, acc = [], 0
        for W in self.W_blocks:
            out.append((acc, acc + W.rows))
            acc += W.rows
        return tuple(out)

    def node_vars(self, i: int) -> tuple:
        lo, hi = self.block_ranges[i]
        return tuple(range(lo, hi))

    def full_W(self) -> PolyMatrix:
        return block_diag(self.W_blocks)

    def metric_bounds(self, i: int) -> tuple:
        """Bounds (lower, upper) on the eigenvalues of M_i implied by the W_i bounds."""
        if self.m_lower is None or self.m_upper is None:
            raise MetricError("metric carries no eigenvalue bounds")
        return 1.0 / self.m_upper[i], 1.0 / self.m_lower[i]

    def with_lambda(self, lam: float) -> "SumSeparableMetric":
        return SumSeparableMetric(self.W_blocks, lam, self.box, self.m_lower, self.m_upper)

    def with_bounds(self, m_lower, m_upper, box=None) -> "SumSeparableMetric":
        return SumSeparableMetric(self.W_blocks, self.lam, self.box if box is None else box, m_lower, m_upper)

    @cached_property
    def compiled(self) -> tuple:
        return tuple(NodeMetric(self, i) for i in range(self.N))


@dataclass(frozen=True, eq=False)
class Multipliers:
    rho: tuple

    def __post_init__(self):
        object.__setattr__(self, "rho", tuple(self.rho))

    def check_locality(self, net: Network):
        for i, r in enumerate(self.rho):
            allowed = set(net.local_vars(i))
            bad = sorted(r.variables() - allowed)
            if bad:
                raise MetricError(f"rho_{i} references v{bad[0]}, outside node {i} and its neighbours")

    def compiled(self, net: Network) -> tuple:
        """Per-node evaluators reading node-local vectors ``(x_i, neighbour states...)``."""
        return tuple(CompiledPolys([r], net.local_vars(i)) for i, r in enumerate(self.rho))


class NodeMetric:
    """Batched W_i and its partial derivatives in node-local coordinates."""

    def __init__(self, metric: SumSeparableMetric, i: int):
        W = metric.W_blocks[i]
        self.node = i
        self.n = W.rows
        gvars = metric.node_vars(i)
        self._iu = np.triu_indices(self.n)
        ups = [W[a, b] for a, b in zip(*self._iu)]
        polys = list(ups)
        for v in gvars:
            polys.extend(p.diff(v) for p in ups)
        self._fn = CompiledPolys(polys, gvars)
        self._nu = len(ups)
        self.constant = W.is_constant()

    def _unpack(self, vals: np.ndarray) -> np.ndarray:
        out = np.empty(vals.shape[:-1] + (self.n, self.n))
        out[..., self._iu[0], self._iu[1]] = vals
        out[..., self._iu[1], self._iu[0]] = vals
        return out

    def W(self, X) -> np.ndarray:
        vals = self._fn(X)
        return self._unpack(vals[:, : self._nu])

    def W_and_grad(self, X) -> tuple:
        """Returns W (P,n,n) and dW (P,n,n,n) with dW[:, k] = dW/dx_k."""
        vals = self._fn(X)
        W = self._unpack(vals[:, : self._nu])
        dW = self._unpack(vals[:, self._nu :].reshape(vals.shape[0], self.n, self._nu))
        return W, dW


# certificate assembly

def _check_dims(net: Network, metric: SumSeparableMetric, mult: Multipliers):
    if metric.dims != tuple(nd.n for nd in net.nodes):
        raise MetricError(f"metric block sizes {metric.dims} do not match node sizes")
    if len(mult.rho) != net.N:
        raise MetricError(f"{len(mult.rho)} multipliers for {net.N} nodes")
    mult.check_locality(net)


def assemble_T_blocks(net: Network, metric: SumSeparableMetric, mult: Multipliers) -> PolyMatrix:
    """Blockwise assembly: only node-local data enters each block."""
    _check_dims(net, metric, mult)
    A = jacobian_blocks(net)
    n = net.n
    entries = [ZERO] * (n * n)
    lam2 = 2.0 * metric.lam

    def place(i, j, blk):
        r0, c0 = net.offsets[i], net.offsets[j]
        for a in range(blk.rows):
            for b in range(blk.cols):
                entries[(r0 + a) * n + c0 + b] = blk[a, b]

    for i, nd in enumerate(net.nodes):
        Wi = metric.W_blocks[i]
        Aii = A.block(i, i)
        BBt = nd.B @ nd.B.T()
        Tii = (
            -directional_derivative(Wi, nd.f, net.node_vars(i))
            + Aii @ Wi
            + Wi @ Aii.T()
            - BBt.scale(mult.rho[i])
            + Wi.scale(lam2)
        )
        place(i, i, Tii)
        for j in net.neighbors(i):
            Tij = A.block(i, j) @ metric.W_blocks[j] + Wi @ A.block(j, i).T()
            place(i, j, Tij)
    return PolyMatrix(n, n, entries).symmetrized()


def assemble_T_full(net: Network, metric: SumSeparableMetric, mult: Multipliers) -> PolyMatrix:
    """Whole-matrix assembly from the stacked f, B, W and R = diag(rho_i I)."""
    _check_dims(net, metric, mult)
    f, B = assemble_full(net)
    allv = list(range(net.n))
    W = metric.full_W()
    J = f.jacobian(allv)
    R = block_diag([PolyMatrix.identity(nd.m).scale(mult.rho[i]) for i, nd in enumerate(net.nodes)])
    T = (
        -directional_derivative(W, f, allv)
        + J @ W
        + W @ J.T()
        - B @ R @ B.T()
        + W.scale(2.0 * metric.lam)
    )
    return T.symmetrized()


@dataclass(frozen=True)
class KillingCheck:
    passed: bool
    witness: tuple | None = None  # (input column, row, col, polynomial)

    def __bool__(self):
        return self.passed


def check_killing(net: Network, metric: SumSeparableMetric, tol: float = 1e-12) -> KillingCheck:
    """Tests d_b W - (db/dx) W - W (db/dx)^T == 0 for every input column b."""
    _, B = assemble_full(net)
    allv = list(range(net.n))
    W = metric.full_W()
    for k in range(B.cols):
        b = B.column(k)
        Jb = b.jacobian(allv)
        K = directional_derivative(W, b, allv) - Jb @ W - W @ Jb.T()
        for r in range(K.rows):
            for c in range(K.cols):
                if K[r, c].max_abs_coeff() >= tol:
                    return KillingCheck(False, (k, r, c, K[r, c]))
    return KillingCheck(True)


# sampling and verification

def grid_points(box, per_axis: int = 3, cap: int = 3**6, rng=None) -> np.ndarray:
    """Tensor grid; when it exceeds ``cap`` points a seeded subset of grid nodes is used."""
    box = np.asarray(box, float)
    n = box.shape[0]
    axes = np.linspace(0.0, 1.0, per_axis)
    total = per_axis**n
    if total <= cap:
        flat = np.arange(total)
    else:
        rng = rng if rng is not None else np.random.default_rng(0)
        flat = np.sort(rng.choice(total, size=cap, replace=False))
    digits = np.empty((flat.size, n), dtype=np.int64)
    rem = flat.copy()
    for k in range(n - 1, -1, -1):
        digits[:, k] = rem % per_axis
        rem //= per_axis
    return box[:, 0] + axes[digits] * (box[:, 1] - box[:, 0])


def sample_box(box, n_random: int, seed: int = 0, per_axis: int = 3, cap: int = 3**6,
               n_lowdisc: int | None = None) -> tuple:
    """Grid, scrambled-Sobol and uniform samples in ``box``.

    Returns ``(points, counts)`` with points ordered grid, low-discrepancy, random.
    """
    box = np.asarray(box, float)
    n = box.shape[0]
    rng = np.random.default_rng(seed)
    grid = grid_points(box, per_axis, cap, rng) if per_axis > 0 else np.empty((0, n))
    n_lowdisc = n_random // 2 if n_lowdisc is None else n_lowdisc
    if n_lowdisc > 0:
        sob = qmc.Sobol(d=n, scramble=True, seed=rng).random(n_lowdisc)
        sob = qmc.scale(sob, box[:, 0], box[:, 1]) if np.all(box[:, 1] > box[:, 0]) else box[:, 0] + sob * (box[:, 1] - box[:, 0])
    else:
        sob = np.empty((0, n))
    n_unif = max(n_random - n_lowdisc, 0)
    unif = box[:, 0] + rng.random((n_unif, n)) * (box[:, 1] - box[:, 0])
    counts = {"grid": len(grid), "lowdisc": len(sob), "random": len(unif)}
    return np.vstack([grid, sob, unif]), counts


def max_eigs(T: CompiledMatrix, X: np.ndarray, chunk: int = 4096) -> np.ndarray:
    out = np.empty(len(X))
    for s in range(0, len(X), chunk):
        out[s : s + chunk] = np.linalg.eigvalsh(T(X[s : s + chunk]))[:, -1]
    return out


@dataclass
class Certificate:
    box: tuple
    eps: float
    samples_checked: int
    worst_point: np.ndarray
    worst_eig: float
    verified: bool
    counts: dict = field(default_factory=dict)
    lam: float | None = None
    label: str = ""

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "verified": self.verified,
            "worst_eig": self.worst_eig,
            "eps": self.eps,
            "lambda": self.lam,
            "samples_checked": self.samples_checked,
            "sample_counts": dict(self.counts),
            "worst_point": [float(v) for v in self.worst_point],
            "box": [list(iv) for iv in self.box],
            "soundness": "sampled: T(x) checked only at the listed sample points",
        }

    def to_text(self) -> str:
        lines = [
            f"certificate {self.label}".rstrip(),
            f"verified = {str(self.verified).lower()}",
            f"worst_eig = {self.worst_eig!r}",
            f"eps = {self.eps!r}",
        ]
        if self.lam is not None:
            lines.append(f"lambda = {self.lam!r}")
        lines.append(f"samples_checked = {self.samples_checked}")
        for k in sorted(self.counts):
            lines.append(f"samples_{k} = {self.counts[k]}")
        lines.append("worst_point = " + " ".join(repr(float(v)) for v in self.worst_point))
        lines.append("box = " + ", ".join(f"{lo!r} {hi!r}" for lo, hi in self.box))
        lines.append("soundness = sampled verification; points between samples are not covered")
        return "\n".join(lines) + "\n"


def verify_points(T: PolyMatrix, X: np.ndarray, box, eps: float = 1e-6, counts=None,
                  lam=None, label: str = "") -> Certificate:
    if eps <= 0:
        raise ValueError("eps must be positive")
    X = np.asarray(X, float)
    if len(X) == 0:
        raise ValueError("no sample points")
    lmax = max_eigs(CompiledMatrix(T, range(T.rows)), X)
    k = int(np.argmax(lmax))
    worst = float(lmax[k])
    return Certificate(
        box=_box_tuple(box), eps=eps, samples_checked=len(X), worst_point=X[k].copy(),
        worst_eig=worst, verified=bool(worst <= -eps), counts=dict(counts or {"points": len(X)}),
        lam=lam, label=label,
    )


def verify_on_box(T: PolyMatrix, box, eps: float = 1e-6, n_samples: int = 4096, seed: int = 0,
                  per_axis: int = 3, cap: int = 3**6, lam=None, label: str = "") -> Certificate:
    """Largest eigenvalue of T over grid, Sobol and uniform samples of ``box``."""
    box = np.asarray(box, float)
    if box.ndim != 2 or box.shape[0] != T.rows or np.any(box[:, 0] > box[:, 1]):
        raise ValueError("box must hold one (lo, hi) interval per coordinate")
    X, counts = sample_box(box, n_samples, seed, per_axis, cap)
    return verify_points(T, X, box, eps, counts, lam, label)


def estimate_bounds(metric: SumSeparableMetric, X: np.ndarray) -> tuple:
    """Per-node (min, max) eigenvalues of W_i over the sample points X (global coordinates)."""
    lows, highs = [], []
    for i, nm in enumerate(metric.compiled):
        ev = np.linalg.eigvalsh(nm.W(X[:, list(metric.node_vars(i))]))
        lows.append(float(ev[:, 0].min()))
        highs.append(float(ev[:, -1].max()))
    return tuple(lows), tuple(highs)


# point evaluation of W_i and M_i

def metric_eval(metric: SumSeparableMetric, i: int, x_i) -> tuple:
    x_i = np.asarray(x_i, float).reshape(1, -1)
    W = metric.compiled[i].W(x_i)[0]
    cond = np.linalg.cond(W)
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise SingularMetricError(i, float(cond))
    M = np.linalg.inv(W)
    return W, 0.5 * (M + M.T)


def metric_derivative(metric: SumSeparableMetric, i: int, x_i, v) -> np.ndarray:
    """Directional derivative of M_i = W_i^{-1} along v: -M (d_v W) M."""
    _, M = metric_eval(metric, i, x_i)
    _, dW = metric.compiled[i].W_and_grad(np.asarray(x_i, float).reshape(1, -1))
    dWv = np.tensordot(np.asarray(v, float), dW[0], axes=1)
    return -M @ dWv @ M


# file format

def dump_metric(metric: SumSeparableMetric, mult: Multipliers | None = None) -> str:
    lines = [f"lambda = {float(metric.lam)!r}"]
    if metric.box is not None:
        lines.append("box = " + ", ".join(f"{lo!r} {hi!r}" for lo, hi in metric.box))
    lines.append("")
    for i, W in enumerate(metric.W_blocks):
        lines.append(f"[node {i}]")
        lines.append(f"dim = {W.rows}")
        if metric.m_lower is not None and metric.m_upper is not None:
            lines.append(f"bounds = {metric.m_lower[i]!r} {metric.m_upper[i]!r}")
        for a in range(W.rows):
            for b in range(a, W.cols):
                lines.append(f"W[{a},{b}] = {format_poly(W[a, b])}")
        if mult is not None:
            lines.append(f"rho = {format_poly(mult.rho[i])}")
        lines.append("")
    return "\n".join(lines)


_NODE = re.compile(r"^\[\s*node\s+(\d+)\s*\]$")
_WENT = re.compile(r"^W\[\s*(\d+)\s*,\s*(\d+)\s*\]$")


def load_metric_text(text: str) -> tuple:
    lam = None
    box = None
    nodes: list = []
    cur = None

    def floats(lineno, s, count=None):
        try:
            vals = [float(t) for t in s.replace(",", " ").split()]
        except ValueError as exc:
            raise MetricParseError(lineno, f"expected numbers, got {s!r}") from exc
        if count is not None and len(vals) != count:
            raise MetricParseError(lineno, f"expected {count} numbers")
        return vals

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        sec = _NODE.match(line)
        if sec:
            if int(sec.group(1)) != len(nodes):
                raise MetricParseError(lineno, f"expected [node {len(nodes)}]")
            cur = {"dim": None, "W": {}, "rho": ZERO, "bounds": None, "line": lineno}
            nodes.append(cur)
            continue
        if "=" not in line:
            raise MetricParseError(lineno, f"expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if cur is None:
            if key == "lambda":
                lam = floats(lineno, value, 1)[0]
            elif key == "box":
                vals = floats(lineno, value)
                if len(vals) % 2:
                    raise MetricParseError(lineno, "box needs lo/hi pairs")
                box = np.array(vals).reshape(-1, 2)
            else:
                raise MetricParseError(lineno, f"unknown header key {key!r}")
            continue
        if key == "dim":
            cur["dim"] = int(floats(lineno, value, 1)[0])
            continue
        if key == "bounds":
            cur["bounds"] = floats(lineno, value, 2)
            continue
        try:
            poly = parse_poly(value)
        except PolyParseError as exc:
            raise MetricParseError(lineno, str(exc)) from exc
        if key == "rho":
            cur["rho"] = poly
            continue
        ent = _WENT.match(key)
        if not ent:
            raise MetricParseError(lineno, f"unknown key {key!r}")
        if cur["dim"] is None:
            raise MetricParseError(lineno, "dim must precede W entries")
        a, b = int(ent.group(1)), int(ent.group(2))
        if max(a, b) >= cur["dim"]:
            raise MetricParseError(lineno, f"W index ({a},{b}) out of range")
        lo, hi = min(a, b), max(a, b)
        if (lo, hi) in cur["W"] and cur["W"][(lo, hi)] != poly:
            raise MetricParseError(lineno, f"asymmetric W declaration at ({a},{b})")
        cur["W"][(lo, hi)] = poly
    if lam is None:
        raise MetricParseError(1, "missing 'lambda' header")
    if not nodes:
        raise MetricParseError(1, "no [node] sections")
    blocks, rhos, lows, highs = [], [], [], []
    for nd in nodes:
        if nd["dim"] is None:
            raise MetricParseError(nd["line"], "node section without dim")
        blocks.append(PolyMatrix.symmetric_from_upper(nd["dim"], nd["W"]))
        rhos.append(nd["rho"])
        if nd["bounds"] is not None:
            lows.append(nd["bounds"][0])
            highs.append(nd["bounds"][1])
    has_bounds = len(lows) == len(nodes)
    try:
        metric = SumSeparableMetric(tuple(blocks), lam, box,
                                    tuple(lows) if has_bounds else None,
                                    tuple(highs) if has_bounds else None)
    except MetricError as exc:
        raise MetricParseError(1, str(exc)) from exc
    return metric, Multipliers(tuple(rhos))


def load_metric(path) -> tuple:
    with open(path) as fh:
        return load_metric_text(fh.read())


def save_metric(path, metric: SumSeparableMetric, mult: Multipliers | None = None):
    with open(path, "w") as fh:
        fh.write(dump_metric(metric, mult))


def metric_from_arrays(blocks: Sequence, lam: float, box=None) -> SumSeparableMetric:
    """Constant metric from numeric symmetric blocks."""
    return SumSeparableMetric(tuple(PolyMatrix.from_array(b).symmetrized() for b in blocks), lam, box)


def zero_multipliers(N: int) -> Multipliers:
    return Multipliers(tuple(Polynomial() for _ in range(N)))
