"""Distributed tracking control from a sum-separable metric.

Each node integrates the differential feedback

    delta_u_i = -(rho_i(x~_i) / 2) B_i(x_i)^T W_i(x_i)^{-1} delta_x_i

along its own minimum-energy curve from x_i* to x_i, using the midpoint rule
on the same grid the curve was optimized on.  rho_i reads neighbour states,
so node i also computes its neighbours' curves from the data in its
LocalView; no non-neighbour data is ever touched.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geodesic import solve_geodesic
from .metric import Multipliers, SingularMetricError, SumSeparableMetric, metric_eval
from .network import Network
from .polyalg import CompiledMatrix, CompiledPolys


class ControllerError(ValueError):
    pass


@dataclass(frozen=True)
class LocalView:
    """What node i may read: its own and its neighbours' states and references."""

    node: int
    neighbors: tuple
    x: np.ndarray
    x_nbr: tuple
    x_star: np.ndarray
    x_star_nbr: tuple
    u_star: np.ndarray

    @property
    def local_state(self) -> np.ndarray:
        return np.concatenate([self.x, *self.x_nbr])

    @property
    def local_reference(self) -> np.ndarray:
        return np.concatenate([self.x_star, *self.x_star_nbr])


def local_view(net: Network, i: int, x, x_star, u_star) -> LocalView:
    """Projects global snapshots onto node i's neighbourhood (copies only those slices)."""
    x = np.asarray(x, float)
    x_star = np.asarray(x_star, float)
    u_star = np.asarray(u_star, float)
    nb = net.neighbors(i)
    return LocalView(
        node=i,
        neighbors=nb,
        x=x[net.node_slice(i)].copy(),
        x_nbr=tuple(x[net.node_slice(j)].copy() for j in nb),
        x_star=x_star[net.node_slice(i)].copy(),
        x_star_nbr=tuple(x_star[net.node_slice(j)].copy() for j in nb),
        u_star=u_star[net.input_slice(i)].copy(),
    )


def local_views(net: Network, x, x_star, u_star) -> list:
    return [local_view(net, i, x, x_star, u_star) for i in range(net.N)]


@dataclass
class ControlOutput:
    u: np.ndarray
    energy: float
    K: int
    iterations: int = 0
    converged: bool = True

    def __post_init__(self):
        if not np.all(np.isfinite(self.u)):
            raise ControllerError("control output is not finite")


def differential_feedback(net: Network, metric: SumSeparableMetric, mult: Multipliers, i: int,
                          x_local, delta) -> np.ndarray:
    """-(rho_i/2) B_i^T W_i^{-1} delta at the node-local point (x_i, neighbour states)."""
    x_local = np.asarray(x_local, float)
    n_i = net.nodes[i].n
    x_i = x_local[:n_i]
    W, _ = metric_eval(metric, i, x_i)
    rho = float(mult.rho[i](_global_point(net, i, x_local)))
    B = net.eval_B_node(i, x_i[None])[0]
    return -0.5 * rho * (B.T @ np.linalg.solve(W, np.asarray(delta, float)))


def _global_point(net: Network, i: int, x_local) -> np.ndarray:
    # rho_i is stored in global variable indices; scatter the local point
    x = np.zeros(net.n)
    x[list(net.local_vars(i))] = x_local
    return x


class _NodeData:
    """Compiled per-node evaluators shared by the controllers."""

    def __init__(self, net: Network, metric: SumSeparableMetric, mult: Multipliers):
        mult.check_locality(net)
        self.net = net
        self.metric = metric
        self.mult = mult
        self.rho = mult.compiled(net)


def integrate_feedback(net: Network, metric: SumSeparableMetric, mult: Multipliers, i: int,
                       curves: dict, u_star_i, _data: _NodeData | None = None) -> ControlOutput:
    """u_i* minus the midpoint quadrature of the feedback along node i's curve.

    ``curves`` maps node index to DiscreteCurve for node i and each neighbour.
    """
    data = _data or _NodeData(net, metric, mult)
    needed = (i, *net.neighbors(i))
    missing = [j for j in needed if j not in curves]
    if missing:
        raise ControllerError(f"node {i} needs curves for nodes {missing}")
    K = curves[i].K
    if any(curves[j].K != K for j in needed):
        raise ControllerError(f"curves for node {i} have different K")
    P = np.asarray(curves[i].waypoints, float)
    D = np.diff(P, axis=0)
    u_star_i = np.asarray(u_star_i, float)
    if not np.any(D):
        return ControlOutput(u_star_i.copy(), 0.0, K)
    mids = [0.5 * (np.asarray(curves[j].waypoints)[1:] + np.asarray(curves[j].waypoints)[:-1]) for j in needed]
    Xl = np.hstack(mids)
    rho = data.rho[i](Xl)[:, 0]
    B = net.eval_B_node(i, mids[0])
    W = metric.compiled[i].W(mids[0])
    ev = np.linalg.eigvalsh(W)
    if np.any(ev[:, 0] <= 0) or np.any(ev[:, -1] > 1e12 * ev[:, 0]):
        k = int(np.argmin(ev[:, 0] / ev[:, -1]))
        raise SingularMetricError(i, float("inf") if ev[k, 0] <= 0 else float(ev[k, -1] / ev[k, 0]))
    Y = np.linalg.solve(W, D[..., None])[..., 0]
    terms = 0.5 * rho[:, None] * np.einsum("kam,ka->km", B, Y)
    energy = float(K * np.sum(D * Y))
    return ControlOutput(u_star_i - terms.sum(axis=0), energy, K)


class NodeController:
    """Node i's online computation.  Keeps its last curves as warm starts."""

    def __init__(self, net: Network, metric: SumSeparableMetric, mult: Multipliers, i: int,
                 K: int = 16, tol: float = 1e-8, max_iter: int = 500, warm_start: bool = True,
                 _data: _NodeData | None = None):
        self.net = net
        self.metric = metric
        self.mult = mult
        self.node = i
        self.K = K
        self.tol = tol
        self.max_iter = max_iter
        self.warm_start = warm_start
        self._data = _data or _NodeData(net, metric, mult)
        self._cache: dict = {}

    def reset(self):
        self._cache.clear()

    def _curve(self, j: int, x_star_j, x_j) -> tuple:
        init = self._cache.get(j) if self.warm_start else None
        res = solve_geodesic(self.metric, j, x_star_j, x_j, self.K, self.tol, self.max_iter, init=init)
        if self.warm_start:
            self._cache[j] = res.curve
        return res

    def step(self, view: LocalView) -> ControlOutput:
        if view.node != self.node:
            raise ControllerError(f"controller of node {self.node} got the view of node {view.node}")
        try:
            own = self._curve(self.node, view.x_star, view.x)
            curves = {self.node: own.curve}
            for j, xs, xj in zip(view.neighbors, view.x_star_nbr, view.x_nbr):
                curves[j] = self._curve(j, xs, xj).curve
            out = integrate_feedback(self.net, self.metric, self.mult, self.node, curves, view.u_star, self._data)
        except SingularMetricError as exc:
            raise SingularMetricError(self.node, exc.cond) from exc
        out.energy = own.energy
        out.iterations = own.iterations
        out.converged = own.converged
        return out


@dataclass
class DistributedController:
    net: Network
    metric: SumSeparableMetric
    mult: Multipliers
    K: int = 16
    tol: float = 1e-8
    warm_start: bool = True
    nodes: list = field(init=False)

    def __post_init__(self):
        data = _NodeData(self.net, self.metric, self.mult)
        self.nodes = [NodeController(self.net, self.metric, self.mult, i, self.K, self.tol,
                                     warm_start=self.warm_start, _data=data) for i in range(self.net.N)]

    def reset(self):
        for c in self.nodes:
            c.reset()

    def __call__(self, x, x_star, u_star) -> tuple:
        outs = distributed_control_step(self.net, self.metric, self.mult,
                                        local_views(self.net, x, x_star, u_star), self.K, self.nodes)
        return np.concatenate([o.u for o in outs]), outs


def distributed_control_step(net: Network, metric: SumSeparableMetric, mult: Multipliers, views,
                             K: int = 16, controllers=None) -> list:
    """One ControlOutput per node, in node order; each reads only its own view."""
    if controllers is None:
        data = _NodeData(net, metric, mult)
        controllers = [NodeController(net, metric, mult, i, K, warm_start=False, _data=data)
                       for i in range(net.N)]
    views = sorted(views, key=lambda v: v.node)
    if [v.node for v in views] != list(range(net.N)):
        raise ControllerError("need exactly one view per node")
    return [controllers[v.node].step(v) for v in views]


def monolithic_control(net: Network, metric: SumSeparableMetric, mult: Multipliers, x, x_star, u_star,
                       K: int = 16, tol: float = 1e-8) -> np.ndarray:
    """Global evaluation with full W, B and R = diag(rho_i I): an oracle for the distributed path."""
    x = np.asarray(x, float)
    x_star = np.asarray(x_star, float)
    P = np.empty((K + 1, net.n))
    for i in range(net.N):
        sl = net.node_slice(i)
        P[:, sl] = solve_geodesic(metric, i, x_star[sl], x[sl], K, tol).curve.waypoints
    D = np.diff(P, axis=0)
    mids = 0.5 * (P[1:] + P[:-1])
    W = CompiledMatrix(metric.full_W(), range(net.n))(mids)
    _, Bfull = net.full
    B = CompiledMatrix(Bfull, range(net.n))(mids)
    rho = CompiledPolys(list(mult.rho), range(net.n))(mids)
    R = np.zeros((K, net.m))
    for i in range(net.N):
        R[:, net.input_slice(i)] = rho[:, i : i + 1]
    Y = np.linalg.solve(W, D[..., None])[..., 0]
    terms = 0.5 * R * np.einsum("kam,ka->km", B, Y)
    return np.asarray(u_star, float) - terms.sum(axis=0)
