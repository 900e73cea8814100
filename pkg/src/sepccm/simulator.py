"""Fixed-step RK4 simulation of the reference and the closed loop, and convergence fits.

The closed loop is sampled: every ``hc`` seconds the controller recomputes
the feedback correction k(x) - u*(t) from a snapshot of both trajectories and
holds it until the next update, while u*(t) itself is evaluated continuously.
With x0 = x* the correction is exactly zero, so plant and reference stay
bitwise equal.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .controller import DistributedController
from .metric import Multipliers, SumSeparableMetric
from .network import Network, ReferenceSignal

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    def __init__(self, t: float, what: str = "state"):
        self.t = t
        super().__init__(f"{what} became non-finite at t = {t:.6g}")


@dataclass(frozen=True)
class SimConfig:
    dt: float = 1e-3
    horizon: float = 20.0
    hc: float = 1e-2
    K: int = 16
    seed: int = 0
    fit_skip: float = 0.1  # fraction of the horizon left out as transient
    fit_floor: float = 1e-10
    geodesic_tol: float = 1e-8

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")
        if self.hc < self.dt:
            raise ValueError("hc must be at least dt")
        ratio = self.hc / self.dt
        if abs(ratio - round(ratio)) > 1e-9 * ratio:
            raise ValueError("hc must be an integer multiple of dt")
        if self.K < 1:
            raise ValueError("K must be at least 1")
        if not 0 <= self.fit_skip < 1:
            raise ValueError("fit_skip must lie in [0, 1)")

    @property
    def steps(self) -> int:
        return int(round(self.horizon / self.dt))

    @property
    def hold(self) -> int:
        return int(round(self.hc / self.dt))


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    input_times: np.ndarray = field(default_factory=lambda: np.empty(0))
    inputs: np.ndarray = field(default_factory=lambda: np.empty((0, 0)))
    energies: np.ndarray = field(default_factory=lambda: np.empty(0))
    left_box: bool = False

    def __post_init__(self):
        if len(self.times) != len(self.states):
            raise ValueError("times and states differ in length")
        if len(self.times) > 1 and np.any(np.diff(self.times) <= 0):
            raise ValueError("times must increase")


@dataclass
class ConvergenceReport:
    times: np.ndarray
    error: np.ndarray
    C_fit: float
    lambda_fit: float
    window: tuple
    bound_check: float
    error0: float

    @property
    def C_overshoot(self) -> float:
        """C in error(t) <= C e^{-lambda t} error(0)."""
        return self.C_fit / self.error0 if self.error0 > 0 else math.nan

    def rows(self) -> list:
        return [
            ("C_fit", self.C_fit),
            ("C_overshoot", self.C_overshoot),
            ("lambda_fit", self.lambda_fit),
            ("window_start", self.window[0]),
            ("window_end", self.window[1]),
            ("bound_check", self.bound_check),
            ("error0", self.error0),
            ("error_final", float(self.error[-1]) if len(self.error) else math.nan),
        ]


def rk4_step(fun, t: float, x: np.ndarray, dt: float) -> np.ndarray:
    k1 = fun(t, x)
    k2 = fun(t + 0.5 * dt, x + 0.5 * dt * k1)
    k3 = fun(t + 0.5 * dt, x + 0.5 * dt * k2)
    k4 = fun(t + dt, x + dt * k3)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _times(cfg: SimConfig) -> np.ndarray:
    return np.arange(cfg.steps + 1) * cfg.dt


def integrate_reference(net: Network, ref: ReferenceSignal, cfg: SimConfig) -> Trajectory:
    def rhs(t, x):
        return net.vector_field(x, ref.u_star(t))

    times = _times(cfg)
    X = np.empty((len(times), net.n))
    X[0] = np.asarray(ref.x_star0, float)
    for k in range(cfg.steps):
        X[k + 1] = rk4_step(rhs, times[k], X[k], cfg.dt)
        if not np.all(np.isfinite(X[k + 1])):
            raise DivergenceError(times[k + 1], "reference state")
    return Trajectory(times, X)


def _outside(box, x) -> bool:
    if box is None:
        return False
    b = np.asarray(box, float)
    return bool(np.any(x < b[:, 0]) or np.any(x > b[:, 1]))


def integrate_closed_loop(net: Network, metric: SumSeparableMetric, mult: Multipliers, ref: ReferenceSignal,
                          x0, cfg: SimConfig) -> tuple:
    """Co-integrates reference and plant; returns (reference, closed loop) trajectories."""
    ctrl = DistributedController(net, metric, mult, cfg.K, cfg.geodesic_tol)
    times = _times(cfg)
    R = np.empty((len(times), net.n))
    X = np.empty((len(times), net.n))
    R[0] = np.asarray(ref.x_star0, float)
    X[0] = np.asarray(x0, float)
    n_ctrl = (cfg.steps + cfg.hold - 1) // cfg.hold
    U = np.empty((n_ctrl, net.m))
    E = np.empty(n_ctrl)
    tu = np.empty(n_ctrl)
    correction = np.zeros(net.m)

    def rhs_ref(t, x):
        return net.vector_field(x, ref.u_star(t))

    def rhs_plant(t, x):
        return net.vector_field(x, ref.u_star(t) + correction)

    left = False
    c = 0
    for k in range(cfg.steps):
        t = times[k]
        if k % cfg.hold == 0:
            us = ref.u_star(t)
            try:
                u, outs = ctrl(X[k], R[k], us)
            except Exception as exc:
                raise RuntimeError(f"controller failed at t = {t:.6g}: {exc}") from exc
            correction = u - us
            U[c], E[c], tu[c] = u, sum(o.energy for o in outs), t
            c += 1
            if not left and _outside(metric.box, X[k]):
                left = True
                log.warning("closed-loop state left the verification box at t = %.4g", t)
        R[k + 1] = rk4_step(rhs_ref, t, R[k], cfg.dt)
        X[k + 1] = rk4_step(rhs_plant, t, X[k], cfg.dt)
        if not np.all(np.isfinite(X[k + 1])):
            raise DivergenceError(times[k + 1])
        if not np.all(np.isfinite(R[k + 1])):
            raise DivergenceError(times[k + 1], "reference state")
    ref_traj = Trajectory(times, R)
    cl = Trajectory(times, X, tu, U, E, left)
    return ref_traj, cl


def fit_exponential(times, error, skip_until: float, floor: float) -> tuple:
    """Least-squares line through log(error) on [skip_until, first time error < floor)."""
    times = np.asarray(times, float)
    error = np.asarray(error, float)
    mask = times >= skip_until
    below = np.flatnonzero(mask & (error < floor))
    if len(below):
        mask &= times < times[below[0]]
    mask &= error > 0
    idx = np.flatnonzero(mask)
    if len(idx) < 2:
        return math.nan, math.nan, (math.nan, math.nan), idx
    slope, intercept = np.polyfit(times[idx], np.log(error[idx]), 1)
    return float(np.exp(intercept)), float(-slope), (float(times[idx[0]]), float(times[idx[-1]])), idx


def measure_convergence(ref: Trajectory, cl: Trajectory, cfg: SimConfig) -> ConvergenceReport:
    if ref.times.shape != cl.times.shape or np.any(ref.times != cl.times):
        raise ValueError("trajectories must share a time grid")
    err = np.linalg.norm(cl.states - ref.states, axis=1)
    e0 = float(err[0]) if len(err) else 0.0
    if len(err) == 0 or np.all(err < cfg.fit_floor):
        return ConvergenceReport(ref.times, err, 0.0, math.inf, (math.nan, math.nan), 1.0, e0)
    C, lam, window, idx = fit_exponential(ref.times, err, cfg.fit_skip * ref.times[-1], cfg.fit_floor)
    if len(idx) < 2:
        return ConvergenceReport(ref.times, err, 0.0, math.inf, window, 1.0, e0)
    envelope = 1.05 * C * np.exp(-lam * ref.times[idx])
    check = float(np.mean(err[idx] <= envelope))
    return ConvergenceReport(ref.times, err, C, lam, window, check, e0)


def _fmt(v) -> str:
    return format(float(v), ".17g")


def export_csv(obj, path, kind: str = "states") -> None:
    """Writes a Trajectory (``kind`` = states, inputs or energy) or a ConvergenceReport."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if isinstance(obj, ConvergenceReport):
            w.writerow(["key", "value"])
            for k, v in obj.rows():
                w.writerow([k, _fmt(v)])
            return
        if kind == "states":
            n = obj.states.shape[1] if obj.states.ndim == 2 else 0
            w.writerow(["times"] + [f"state_{j}" for j in range(n)])
            for t, x in zip(obj.times, obj.states):
                w.writerow([_fmt(t)] + [_fmt(v) for v in x])
        elif kind == "inputs":
            m = obj.inputs.shape[1] if obj.inputs.ndim == 2 else 0
            w.writerow(["times"] + [f"u_{j}" for j in range(m)])
            for t, u in zip(obj.input_times, obj.inputs):
                w.writerow([_fmt(t)] + [_fmt(v) for v in u])
        elif kind == "energy":
            w.writerow(["times", "energy"])
            for t, e in zip(obj.input_times, obj.energies):
                w.writerow([_fmt(t), _fmt(e)])
        else:
            raise ValueError(f"unknown csv kind {kind!r}")


def read_csv(path) -> tuple:
    """(header, float array) from a file written by export_csv."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    if header == ["key", "value"]:
        return header, {k: float(v) for k, v in body}
    return header, np.array([[float(v) for v in r] for r in body]).reshape(len(body), len(header))


def config_dict(cfg: SimConfig) -> dict:
    return asdict(cfg)
