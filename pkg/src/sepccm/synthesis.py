"""Offline search for a sum-separable metric by sampled spectral feasibility.

The certificate T(x) is linear in the coefficients of W_i and rho_i, so at a
fixed sample x_s the condition T(x_s) <= -eps I is a linear matrix inequality
in the decision vector.  The worst sampled eigenvalue

    phi(dv) = max( max_s lmax(T(x_s; dv)) + eps,  max_{s,i} lmax(m_lower I - W_i(x_s; dv)) )

is convex.  By default it is minimized through a log-sum-exp smoothing with
L-BFGS under a decreasing smoothing parameter, stopping at the first decision
vector whose hard value is negative; plain subgradient steps (the top
eigenvector of the active constraint supplies the subgradient) are available
as an alternative.  An upper bound W_i <= m_upper I keeps the problem bounded.
Rounds of audit on a denser sample set follow, where violators are added to
the training set and the solve resumes.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy.optimize import minimize

from .metric import (
    Certificate,
    Multipliers,
    SumSeparableMetric,
    assemble_T_blocks,
    estimate_bounds,
    load_metric,
    max_eigs,
    sample_box,
    save_metric,
    uniform_box,
    verify_points,
)
from .network import Network, assemble_full
from .polyalg import (
    CompiledMatrix,
    CompiledPolys,
    PolyMatrix,
    Polynomial,
    directional_derivative,
)

log = logging.getLogger(__name__)


@dataclass
class SynthesisProblem:
    net: Network
    lam: float = 0.1
    box: tuple | None = None
    deg_W: int = 2
    deg_rho: int = 2
    eps: float = 1e-6
    m_lower: float = 1e-2
    n_random: int = 2048
    grid_per_axis: int = 3
    grid_cap: int = 3**6
    m_upper: float = 1e2
    rounds: int = 6
    max_iter: int = 4000
    method: str = "smoothed"
    smoothing: tuple = (0.1, 0.03, 0.01)
    train_margin: float = 1e-2
    audit_factor: int = 4
    refine_per_round: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.deg_W < 0 or self.deg_rho < 0:
            raise ValueError("polynomial degrees must be nonnegative")
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if self.m_lower <= 0:
            raise ValueError("m_lower must be positive")
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")
        if not self.m_upper > self.m_lower:
            raise ValueError("m_upper must exceed m_lower")
        if self.method not in ("smoothed", "subgradient"):
            raise ValueError(f"unknown method {self.method!r}")
        if self.rounds < 0 or self.max_iter < 1:
            raise ValueError("rounds must be >= 0 and max_iter >= 1")
        if self.box is None:
            self.box = uniform_box(self.net.n)
        self.box = tuple((float(lo), float(hi)) for lo, hi in np.asarray(self.box, float).reshape(-1, 2))
        if len(self.box) != self.net.n:
            raise ValueError(f"box has {len(self.box)} intervals for state dimension {self.net.n}")


def monomials_upto(vars, deg: int) -> list:
    """All monomials of total degree <= deg, constant first, in a fixed order."""
    vars = sorted(vars)
    out = [()]
    for d in range(1, deg + 1):
        for combo in itertools.combinations_with_replacement(vars, d):
            m: dict = {}
            for v in combo:
                m[v] = m.get(v, 0) + 1
            out.append(tuple(sorted(m.items())))
    return out


def input_channel_vars(net: Network, i: int) -> tuple:
    """Own coordinates driven directly by a constant B_i (excluded from W_i)."""
    nd = net.nodes[i]
    if not nd.B.is_constant():
        return ()
    return tuple(
        net.offsets[i] + a for a in range(nd.n) if any(not nd.B[a, b].is_zero() for b in range(nd.m))
    )


@dataclass(frozen=True)
class ParamEntry:
    kind: str  # "W" or "rho"
    node: int
    entry: tuple | None
    monomial: tuple


@dataclass
class DecisionTemplate:
    entries: list
    x0: np.ndarray
    basis: np.ndarray | None = None  # columns span the Killing-consistent subspace

    @property
    def size(self) -> int:
        return len(self.entries)

    def counts(self) -> dict:
        out: dict = {}
        for e in self.entries:
            key = f"{e.kind}{e.node}"
            out[key] = out.get(key, 0) + 1
        return out


def parameterize(problem: SynthesisProblem) -> DecisionTemplate:
    net = problem.net
    entries = []
    x0 = []
    for i, nd in enumerate(net.nodes):
        excl = set(input_channel_vars(net, i))
        wvars = [v for v in net.node_vars(i) if v not in excl]
        monos = monomials_upto(wvars, problem.deg_W)
        for a in range(nd.n):
            for b in range(a, nd.n):
                for mono in monos:
                    entries.append(ParamEntry("W", i, (a, b), mono))
                    x0.append(1.0 if (a == b and mono == ()) else 0.0)
    for i in range(net.N):
        for mono in monomials_upto(net.local_vars(i), problem.deg_rho):
            entries.append(ParamEntry("rho", i, None, mono))
            x0.append(0.0)
    tmpl = DecisionTemplate(entries, np.array(x0))
    if not all(nd.B.is_constant() for nd in net.nodes):
        tmpl.basis = killing_nullspace(net, tmpl)
        coef, *_ = np.linalg.lstsq(tmpl.basis, tmpl.x0, rcond=None)
        tmpl.x0 = tmpl.basis @ coef
    return tmpl


def realize(net: Network, tmpl: DecisionTemplate, dv, lam: float, box=None) -> tuple:
    """Decision vector -> (metric, multipliers)."""
    W_up = [dict() for _ in net.nodes]
    rho = [dict() for _ in net.nodes]
    for e, c in zip(tmpl.entries, np.asarray(dv, float)):
        if c == 0.0:
            continue
        if e.kind == "W":
            d = W_up[e.node].setdefault(e.entry, {})
            d[e.monomial] = d.get(e.monomial, 0.0) + c
        else:
            rho[e.node][e.monomial] = rho[e.node].get(e.monomial, 0.0) + c
    blocks = tuple(
        PolyMatrix.symmetric_from_upper(nd.n, {k: Polynomial(v) for k, v in W_up[i].items()})
        for i, nd in enumerate(net.nodes)
    )
    return SumSeparableMetric(blocks, lam, box), Multipliers(tuple(Polynomial(r) for r in rho))


def _unit(net: Network, tmpl: DecisionTemplate, k: int, lam: float) -> tuple:
    dv = np.zeros(tmpl.size)
    dv[k] = 1.0
    return realize(net, tmpl, dv, lam)


def killing_nullspace(net: Network, tmpl: DecisionTemplate) -> np.ndarray:
    """Basis of decision vectors whose W satisfies the Killing identity exactly."""
    _, B = assemble_full(net)
    allv = list(range(net.n))
    cols = []
    rows: dict = {}
    for k, e in enumerate(tmpl.entries):
        col: dict = {}
        if e.kind == "W":
            W = _unit(net, tmpl, k, 0.0)[0].full_W()
            for c in range(B.cols):
                b = B.column(c)
                Jb = b.jacobian(allv)
                K = directional_derivative(W, b, allv) - Jb @ W - W @ Jb.T()
                for r in range(K.rows):
                    for s in range(r, K.cols):
                        for mono, coef in K[r, s].items():
                            key = (c, r, s, mono)
                            col[rows.setdefault(key, len(rows))] = coef
        cols.append(col)
    A = np.zeros((max(len(rows), 1), tmpl.size))
    for k, col in enumerate(cols):
        for r, v in col.items():
            A[r, k] = v
    return scipy.linalg.null_space(A, rcond=1e-12)


class AffineConstraints:
    """Per-sample constraint matrices, affine in the decision vector.

    ``T_of(dv)`` returns T(x_s; dv) + shift*I stacked over samples;
    ``W_of(dv)`` returns m_lower*I - W_i(x_s; dv) for each node.
    """

    def __init__(self, problem: SynthesisProblem, tmpl: DecisionTemplate):
        self.problem = problem
        self.tmpl = tmpl
        net = problem.net
        self.n = net.n
        self.iu = np.triu_indices(self.n)
        n_e = len(self.iu[0])
        lam = problem.lam
        monos: dict = {}
        rows, cols, vals = [], [], []
        for k in range(tmpl.size):
            metric, mult = _unit(net, tmpl, k, lam)
            T = assemble_T_blocks(net, metric, mult)
            for e, (a, b) in enumerate(zip(*self.iu)):
                for mono, c in T[a, b].items():
                    mu = monos.setdefault(mono, len(monos))
                    rows.append(mu * n_e + e)
                    cols.append(k)
                    vals.append(c)
        self.n_entries = n_e
        self.monomials = list(monos)
        self.C = sp.csr_matrix((vals, (rows, cols)), shape=(len(monos) * n_e, tmpl.size))
        self._mono_eval = CompiledPolys([Polynomial({m: 1.0}) for m in self.monomials], range(self.n))
        # W_i constraints: one small map per node in node-local coordinates
        self.wmaps = []
        for i, nd in enumerate(net.nodes):
            ks = [k for k, e in enumerate(tmpl.entries) if e.kind == "W" and e.node == i]
            wmonos = sorted({tmpl.entries[k].monomial for k in ks}, key=lambda m: (len(m), m))
            iu_i = np.triu_indices(nd.n)
            pos = {(a, b): e for e, (a, b) in enumerate(zip(*iu_i))}
            mpos = {m: j for j, m in enumerate(wmonos)}
            Ci = np.zeros((len(wmonos) * len(pos), len(ks)))
            for col, k in enumerate(ks):
                e = tmpl.entries[k]
                Ci[mpos[e.monomial] * len(pos) + pos[e.entry], col] = 1.0
            ev = CompiledPolys([Polynomial({m: 1.0}) for m in wmonos], net.node_vars(i))
            self.wmaps.append((i, np.array(ks), iu_i, len(pos), Ci, ev))
        self._Cd = self.C.toarray().reshape(len(monos), n_e, tmpl.size)
        self.X = np.empty((0, self.n))
        # monomial values per sample; constraint matrices are never materialized
        self.mono = np.empty((0, len(monos)))
        self.monoW = [np.empty((0, w[4].shape[0] // w[3])) for w in self.wmaps]

    def add_samples(self, X: np.ndarray):
        X = np.asarray(X, float)
        self.mono = np.concatenate([self.mono, self._mono_eval.monomial_values(X)])
        for idx, (i, ks, iu_i, n_pos, Ci, ev) in enumerate(self.wmaps):
            mv = ev.monomial_values(X[:, list(self.problem.net.node_vars(i))])
            self.monoW[idx] = np.concatenate([self.monoW[idx], mv])
        self.X = np.concatenate([self.X, X])

    def G_at(self, s: int) -> np.ndarray:
        """Upper-triangle entries of T(x_s) as a linear map of dv, shape (entries, size)."""
        return np.tensordot(self.mono[s], self._Cd, 1)

    def GW_at(self, idx: int, s: int) -> np.ndarray:
        i, ks, iu_i, n_pos, Ci, ev = self.wmaps[idx]
        return np.tensordot(self.monoW[idx][s], Ci.reshape(-1, n_pos, len(ks)), 1)

    def _T_vals(self, dv) -> np.ndarray:
        coef = (self.C @ dv).reshape(len(self.monomials), self.n_entries)
        return self.mono @ coef

    def _W_vals(self, idx: int, dv) -> np.ndarray:
        i, ks, iu_i, n_pos, Ci, ev = self.wmaps[idx]
        return self.monoW[idx] @ (Ci @ dv[ks]).reshape(-1, n_pos)

    @property
    def n_samples(self) -> int:
        return len(self.X)

    def _unpack(self, vals, n):
        iu = np.triu_indices(n)
        out = np.empty(vals.shape[:-1] + (n, n))
        out[..., iu[0], iu[1]] = vals
        out[..., iu[1], iu[0]] = vals
        return out

    def T_of(self, dv, shift: float = 0.0) -> np.ndarray:
        T = self._unpack(self._T_vals(dv), self.n)
        if shift:
            T = T + shift * np.eye(self.n)
        return T

    def W_of(self, dv) -> list:
        out = []
        for idx, (i, ks, iu_i, n_pos, Ci, ev) in enumerate(self.wmaps):
            ni = self.problem.net.nodes[i].n
            Wi = self._unpack(self._W_vals(idx, dv), ni)
            out.append(self.problem.m_lower * np.eye(ni) - Wi)
        return out

    def _W_eigs(self, dv, vectors: bool):
        out = []
        for idx, (i, ks, iu_i, n_pos, Ci, ev) in enumerate(self.wmaps):
            Wi = self._unpack(self._W_vals(idx, dv), self.problem.net.nodes[i].n)
            out.append(np.linalg.eigh(Wi) if vectors else np.linalg.eigvalsh(Wi))
        return out

    @staticmethod
    def _weights(P, iu):
        # <P, G> over the stored upper triangle counts off-diagonal entries twice
        fac = np.where(iu[0] == iu[1], 1.0, 2.0)
        return P[:, iu[0], iu[1]] * fac

    def phi(self, dv, shift: float, m_upper: float = np.inf) -> float:
        """Worst constraint eigenvalue over the current samples."""
        worst = float(np.linalg.eigvalsh(self.T_of(dv, shift))[:, -1].max())
        for evw in self._W_eigs(dv, False):
            worst = max(worst, float(self.problem.m_lower - evw[:, 0].min()))
            if np.isfinite(m_upper):
                worst = max(worst, float(evw[:, -1].max() - m_upper))
        return worst

    def evaluate(self, dv, shift: float, m_upper: float = np.inf) -> tuple:
        """phi and a subgradient at dv.

        Ties go to the lowest sample index; T constraints precede the lower
        and then upper W bounds.
        """
        T = self.T_of(dv, shift)
        ev, vec = np.linalg.eigh(T)
        top = ev[:, -1]
        s = int(np.argmax(top))
        best = (float(top[s]), "T", s, vec[s, :, -1])
        m_lo = self.problem.m_lower
        for idx, (evw, vecw) in enumerate(self._W_eigs(dv, True)):
            low = m_lo - evw[:, 0]
            sw = int(np.argmax(low))
            if low[sw] > best[0]:
                best = (float(low[sw]), ("W", idx, -1.0), sw, vecw[sw, :, 0])
            if np.isfinite(m_upper):
                up = evw[:, -1] - m_upper
                su = int(np.argmax(up))
                if up[su] > best[0]:
                    best = (float(up[su]), ("W", idx, 1.0), su, vecw[su, :, -1])
        phi, kind, s, v = best
        g = np.zeros(self.tmpl.size)
        P = np.outer(v, v)[None]
        if kind == "T":
            g = self._weights(P, self.iu)[0] @ self.G_at(s)
        else:
            _, idx, sign = kind
            i, ks, iu_i, n_pos, Ci, ev_ = self.wmaps[idx]
            g[ks] = sign * (self._weights(P, iu_i)[0] @ self.GW_at(idx, s))
        return phi, g, (kind if kind == "T" else kind[:2], s)

    def smoothed(self, dv, mu: float, shift: float, m_upper: float, cutoff: float = 40.0) -> tuple:
        """Log-sum-exp smoothing of phi over every constraint eigenvalue.

        Returns (value, gradient, hard phi).  The smoothed value
        overestimates phi by at most mu*log(#eigenvalues).
        """
        D = self.tmpl.size
        T = self.T_of(dv, shift)
        evT = np.linalg.eigvalsh(T)
        Weig = self._W_eigs(dv, True)
        m_lo = self.problem.m_lower
        mx = float(evT[:, -1].max())
        for evw, _ in Weig:
            mx = max(mx, float((m_lo - evw[:, 0]).max()), float((evw[:, -1] - m_upper).max()))
        Z = float(np.exp((evT - mx) / mu).sum())
        wl_all, wu_all = [], []
        for evw, _ in Weig:
            wl = np.exp((m_lo - evw - mx) / mu)
            wu = np.exp((evw - m_upper - mx) / mu)
            Z += float(wl.sum() + wu.sum())
            wl_all.append(wl)
            wu_all.append(wu)
        g = np.zeros(D)
        # samples far below the maximum carry negligible weight
        sel = np.flatnonzero(evT[:, -1] > mx - cutoff * mu)
        if len(sel):
            e_s, v_s = np.linalg.eigh(T[sel])
            w = np.exp((e_s - mx) / mu)
            P = np.einsum("sj,saj,sbj->sab", w, v_s, v_s)
            U = self._weights(P, self.iu)
            g += self.C.T @ (self.mono[sel].T @ U).reshape(-1)
        for idx, ((evw, vecw), wl, wu) in enumerate(zip(Weig, wl_all, wu_all)):
            i, ks, iu_i, n_pos, Ci, ev_ = self.wmaps[idx]
            P = np.einsum("sj,saj,sbj->sab", wu - wl, vecw, vecw)
            U = self._weights(P, iu_i)
            g[ks] += Ci.T @ (self.monoW[idx].T @ U).reshape(-1)
        return mx + mu * math.log(Z), g / Z, mx


def sampled_constraints(problem: SynthesisProblem, dv, X=None) -> list:
    """Constraint matrices at the sample points: T(x_s)+eps*I, then m_lower*I - W_i(x_s)."""
    tmpl = parameterize(problem)
    cons = AffineConstraints(problem, tmpl)
    if X is None:
        X, _ = training_samples(problem)
    cons.add_samples(X)
    dv = np.asarray(dv, float)
    return list(cons.T_of(dv, problem.eps)) + [m for Wc in cons.W_of(dv) for m in Wc]


def training_samples(problem: SynthesisProblem) -> tuple:
    return sample_box(problem.box, problem.n_random, problem.seed, problem.grid_per_axis,
                      problem.grid_cap, n_lowdisc=0)


def audit_samples(problem: SynthesisProblem) -> tuple:
    return sample_box(problem.box, problem.audit_factor * problem.n_random, problem.seed + 7919,
                      problem.grid_per_axis + 2, problem.audit_factor * problem.grid_cap)


SUGGESTION = "raise deg_W/deg_rho, shrink the box, or lower lambda"


@dataclass
class SynthesisResult:
    feasible: bool
    metric: SumSeparableMetric
    mult: Multipliers
    objective: float  # worst sampled eigenvalue, eps shift included
    iterations: int
    certificate: Certificate | None
    rounds: int
    n_samples: int
    dv: np.ndarray
    template: DecisionTemplate
    worst_constraint: tuple | None = None  # (kind, point) of the binding constraint
    message: str = ""
    history: list = field(default_factory=list)

    def summary(self) -> str:
        head = "feasible" if self.feasible else "infeasible at this parameterization"
        lines = [
            f"status: {head}",
            f"objective: {self.objective:.6g}",
            f"iterations: {self.iterations}",
            f"refinement rounds: {self.rounds}",
            f"training samples: {self.n_samples}",
        ]
        if self.message:
            lines.append(self.message)
        if self.certificate is not None:
            lines.append(self.certificate.to_text())
        return "\n".join(lines)


class _Found(Exception):
    pass


def _descend_smoothed(cons: AffineConstraints, z0, basis, problem: SynthesisProblem, shift: float) -> tuple:
    """L-BFGS on the log-sum-exp smoothing with decreasing mu; stops at the first phi < 0."""
    counter = [0]

    def fg(z, mu):
        counter[0] += 1
        dv = z if basis is None else basis @ z
        F, g, hard = cons.smoothed(dv, mu, shift, problem.m_upper)
        if hard < 0:
            raise _Found(z.copy())
        return F, (g if basis is None else basis.T @ g)

    z = np.array(z0, float)
    budget = problem.max_iter
    for mu in problem.smoothing:
        left = budget - counter[0]
        if left <= 0:
            break
        try:
            r = minimize(fg, z, args=(mu,), jac=True, method="L-BFGS-B",
                         options=dict(maxfun=left, maxiter=left, ftol=1e-15, gtol=1e-12))
            z = r.x
        except _Found as hit:
            return hit.args[0], counter[0], True
    return z, counter[0], False


def _descend_subgradient(cons: AffineConstraints, z0, basis, problem: SynthesisProblem, shift: float) -> tuple:
    """Polyak steps toward the target value -train_margin."""
    z = np.array(z0, float)
    target = -problem.train_margin
    for it in range(problem.max_iter):
        dv = z if basis is None else basis @ z
        phi, g, _ = cons.evaluate(dv, shift, problem.m_upper)
        if phi < 0:
            return z, it + 1, True
        if basis is not None:
            g = basis.T @ g
        gg = float(g @ g)
        if gg == 0.0:
            break
        z = z - (phi - target) / gg * g
    return z, problem.max_iter, False


def _audit(problem: SynthesisProblem, metric, mult, Xa) -> tuple:
    T = assemble_T_blocks(problem.net, metric, mult)
    lmax = max_eigs(CompiledMatrix(T, range(T.rows)), Xa)
    viol = lmax + problem.eps
    for i, nm in enumerate(metric.compiled):
        wmin = np.linalg.eigvalsh(nm.W(Xa[:, list(metric.node_vars(i))]))[:, 0]
        viol = np.maximum(viol, problem.m_lower - wmin)
    return T, viol


def solve_feasibility(problem: SynthesisProblem) -> SynthesisResult:
    net = problem.net
    tmpl = parameterize(problem)
    cons = AffineConstraints(problem, tmpl)
    X, _ = training_samples(problem)
    cons.add_samples(X)
    Xa, acounts = audit_samples(problem)
    shift = problem.eps + problem.train_margin
    basis = tmpl.basis
    z = tmpl.x0.copy() if basis is None else np.linalg.lstsq(basis, tmpl.x0, rcond=None)[0]
    descend = _descend_smoothed if problem.method == "smoothed" else _descend_subgradient
    total = 0
    history = []
    feasible = False
    rnd = 0
    T = None
    for rnd in range(problem.rounds + 1):
        z, used, found = descend(cons, z, basis, problem, shift)
        total += used
        dv = z if basis is None else basis @ z
        metric, mult = realize(net, tmpl, dv, problem.lam, problem.box)
        if not found:
            history.append({"round": rnd, "evaluations": used, "found": False})
            break
        T, viol = _audit(problem, metric, mult, Xa)
        bad = np.flatnonzero(viol > 0)
        history.append({"round": rnd, "evaluations": used, "found": True,
                        "audit_worst": float(viol.max()), "violators": int(len(bad))})
        log.info("round %d: %d evaluations, audit worst %.3g, %d violators", rnd, used, viol.max(), len(bad))
        if len(bad) == 0:
            feasible = True
            break
        if rnd == problem.rounds:
            break
        order = np.argsort(-viol[bad], kind="stable")[: problem.refine_per_round]
        cons.add_samples(Xa[bad[order]])
    phi, _, (kind, s) = cons.evaluate(dv, problem.eps, np.inf)
    worst = (kind if isinstance(kind, str) else f"W{kind[1]}", cons.X[s].copy())
    cert = None
    if T is not None:
        cert = verify_points(T, Xa, problem.box, problem.eps, acounts, problem.lam, "synthesis audit")
    if feasible:
        lo, hi = estimate_bounds(metric, Xa)
        metric = metric.with_bounds(lo, hi, problem.box)
        msg = ""
    else:
        why = "training objective stayed nonnegative" if not history[-1]["found"] else \
            "audit violations remain after all refinement rounds"
        msg = f"{why}; binding constraint {worst[0]} at {np.array2string(worst[1], precision=3)}; {SUGGESTION}"
        log.warning("synthesis infeasible: %s", msg)
    return SynthesisResult(feasible, metric, mult, float(phi), total, cert, rnd, cons.n_samples,
                           dv, tmpl, worst, msg, history)


def export_metric(result: SynthesisResult, path) -> None:
    if result.certificate is None or not result.feasible:
        raise ValueError("only audited, feasible results can be exported")
    save_metric(path, result.metric, result.mult)


def import_metric(path) -> tuple:
    return load_metric(path)
