"""Per-node minimum-energy curves under M_i = W_i^{-1}.

A curve is stored as K+1 waypoints at s_k = k/K.  Its energy uses the
composite midpoint rule

    E = sum_k K * d_k^T M_i(m_k) d_k,   d_k = p_{k+1} - p_k,  m_k = (p_k + p_{k+1}) / 2,

and interior waypoints are moved by preconditioned gradient descent with
Armijo backtracking.  The preconditioner is the exact Hessian of E for a
constant metric, so straight lines are reached in one step when M is constant.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_banded

from .metric import SingularMetricError, SumSeparableMetric

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DiscreteCurve:
    node: int
    waypoints: np.ndarray

    @property
    def K(self) -> int:
        return len(self.waypoints) - 1

    def reversed(self) -> "DiscreteCurve":
        return DiscreteCurve(self.node, self.waypoints[::-1].copy())


@dataclass
class GeodesicResult:
    curve: DiscreteCurve
    energy: float
    iterations: int
    converged: bool
    residual: float
    left_box: bool = False
    energies: list = field(default_factory=list)  # energy after each accepted step


def straight_curve(node: int, x_star, x, K: int) -> DiscreteCurve:
    x_star = np.asarray(x_star, float)
    x = np.asarray(x, float)
    s = np.arange(K + 1)[:, None] / K
    P = x_star + s * (x - x_star)
    P[0] = x_star
    P[K] = x
    return DiscreteCurve(node, P)


class _Energy:
    def __init__(self, metric: SumSeparableMetric, node: int, K: int):
        self.nm = metric.compiled[node]
        self.node = node
        self.K = K

    def _factor(self, W):
        ev = np.linalg.eigvalsh(W)
        lo, hi = ev[:, 0], ev[:, -1]
        if np.any(lo <= 0) or np.any(hi > 1e12 * lo):
            k = int(np.argmin(lo / np.maximum(hi, 1e-300)))
            cond = float("inf") if lo[k] <= 0 else float(hi[k] / lo[k])
            raise SingularMetricError(self.node, cond)

    def value(self, P) -> float:
        D = np.diff(P, axis=0)
        W = self.nm.W(0.5 * (P[1:] + P[:-1]))
        self._factor(W)
        Y = np.linalg.solve(W, D[..., None])[..., 0]
        return float(self.K * np.sum(D * Y))

    def value_grad(self, P) -> tuple:
        K = self.K
        D = np.diff(P, axis=0)
        W, dW = self.nm.W_and_grad(0.5 * (P[1:] + P[:-1]))
        self._factor(W)
        Y = np.linalg.solve(W, D[..., None])[..., 0]  # M d
        E = float(K * np.sum(D * Y))
        # d(d^T M d)/dm_l = -y^T (dW/dx_l) y
        H = -np.einsum("ka,klab,kb->kl", Y, dW, Y)
        G = np.zeros_like(P)
        G[1:] += 2.0 * K * Y + 0.5 * K * H
        G[:-1] += -2.0 * K * Y + 0.5 * K * H
        return E, G[1:-1], W


def discrete_energy(metric: SumSeparableMetric, curve: DiscreteCurve) -> float:
    return _Energy(metric, curve.node, curve.K).value(np.asarray(curve.waypoints, float))


def energy_gradient(metric: SumSeparableMetric, curve: DiscreteCurve) -> np.ndarray:
    """Gradient of the discrete energy with respect to the interior waypoints."""
    return _Energy(metric, curve.node, curve.K).value_grad(np.asarray(curve.waypoints, float))[1]


def _precondition(G, Wbar, K):
    # inverse of 2K (L kron M) with L = tridiag(-1, 2, -1), M = Wbar^{-1}
    k = G.shape[0]
    ab = np.zeros((3, k))
    ab[0, 1:] = -1.0
    ab[1, :] = 2.0
    ab[2, :-1] = -1.0
    return solve_banded((1, 1), ab, G) @ Wbar / (2.0 * K)


def solve_geodesic(metric: SumSeparableMetric, i: int, x_star_i, x_i, K: int = 16,
                   tol: float = 1e-8, max_iter: int = 500, init: DiscreteCurve | np.ndarray | None = None,
                   box=None) -> GeodesicResult:
    if K < 1:
        raise ValueError("K must be at least 1")
    x_star_i = np.asarray(x_star_i, float)
    x_i = np.asarray(x_i, float)
    scale = float(np.linalg.norm(x_i - x_star_i))
    if scale == 0.0:
        curve = straight_curve(i, x_star_i, x_i, K)
        return GeodesicResult(curve, 0.0, 0, True, 0.0)
    if init is None:
        P = straight_curve(i, x_star_i, x_i, K).waypoints
    else:
        P = np.array(init.waypoints if isinstance(init, DiscreteCurve) else init, dtype=float)
        if P.shape != (K + 1, x_i.size):
            raise ValueError(f"initial curve has shape {P.shape}, expected {(K + 1, x_i.size)}")
        P[0] = x_star_i
        P[K] = x_i
    en = _Energy(metric, i, K)
    E, G, W = en.value_grad(P)
    history = [E]
    it = 0
    residual = np.inf
    converged = False
    while True:
        if K == 1:
            residual, converged = 0.0, True
            break
        Wbar = W.mean(axis=0)
        step = -_precondition(G, Wbar, K)
        residual = float(np.linalg.norm(step) / scale)
        if residual < tol:
            converged = True
            break
        if it >= max_iter:
            break
        slope = float(np.sum(G * step))
        if slope >= 0:
            converged = abs(slope) <= 1e-12 * max(E, 1e-300)
            break
        alpha = 1.0
        accepted = False
        for _ in range(50):
            trial = P.copy()
            trial[1:-1] += alpha * step
            try:
                E_new = en.value(trial)
            except SingularMetricError:
                E_new = np.inf
            if E_new <= E + 1e-4 * alpha * slope and E_new < E:
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            # no descent left at roundoff: treat as stationary
            converged = abs(slope) <= 1e-12 * max(E, 1e-300)
            break
        P = trial
        it += 1
        E, G, W = en.value_grad(P)
        history.append(E)
    curve = DiscreteCurve(i, P)
    left = False
    if box is not None:
        b = np.asarray(box, float)
        left = bool(np.any(P < b[:, 0] - 1e-12) or np.any(P > b[:, 1] + 1e-12))
        if left:
            log.warning("geodesic of node %d leaves the verification box", i)
    return GeodesicResult(curve, en.value(P), it, converged, residual, left, history)


def solve_network_geodesic(metric: SumSeparableMetric, x_star, x, K: int = 16, **opts) -> list:
    x_star = np.asarray(x_star, float)
    x = np.asarray(x, float)
    out = []
    for i in range(metric.N):
        lo, hi = metric.block_ranges[i]
        box = None if metric.box is None else np.asarray(metric.box)[lo:hi]
        try:
            out.append(solve_geodesic(metric, i, x_star[lo:hi], x[lo:hi], K, box=box, **opts))
        except SingularMetricError as exc:
            raise SingularMetricError(i, exc.cond) from exc
    return out


def growth_diagnostic(metric: SumSeparableMetric, i: int, n_rays: int = 64,
                      radii=(1.0, 2.0, 4.0, 8.0, 16.0), seed: int = 0) -> dict:
    """Samples lmax(W_i(r d)) / (1 + r^2) on random rays.

    A ratio that stays bounded as r grows is consistent with a quadratic
    envelope lmax(W) <= |F q + G|^2, the growth condition under which
    geodesics extend to the whole space.  Informative only.
    """
    rng = np.random.default_rng(seed)
    n = metric.dims[i]
    d = rng.normal(size=(n_rays, n))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    ratios, min_eigs = [], []
    for r in radii:
        ev = np.linalg.eigvalsh(metric.compiled[i].W(r * d))
        ratios.append(float(ev[:, -1].max() / (1.0 + r * r)))
        min_eigs.append(float(ev[:, 0].min()))
    degree = max(p.degree() for p in metric.W_blocks[i].entries)
    return {
        "node": i,
        "radii": list(radii),
        "max_ratio": ratios,
        "min_eig": min_eigs,
        "entry_degree": degree,
        "quadratic_envelope": bool(degree <= 2 and ratios[-1] <= 1.5 * max(ratios[:-1], default=ratios[-1])),
        "positive_on_rays": bool(min(min_eigs) > 0),
    }
