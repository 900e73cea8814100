"""Independent numerical oracles: finite differences on plain callables.

None of these touch the polynomial algebra beyond point evaluation, so they
check the symbolic code paths from the outside.
"""

import numpy as np


def fd_jacobian(fun, x, h=1e-6):
    x = np.asarray(x, float)
    f0 = np.asarray(fun(x))
    J = np.empty((f0.size, x.size))
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = h
        J[:, k] = (np.asarray(fun(x + e)) - np.asarray(fun(x - e))) / (2 * h)
    return J


def fd_directional(fun, x, v, h=1e-5):
    x = np.asarray(x, float)
    v = np.asarray(v, float)
    return (np.asarray(fun(x + h * v)) - np.asarray(fun(x - h * v))) / (2 * h)


def numeric_T(net, metric, mult, x, h=1e-6):
    """T(x) from point evaluations only: W, f, B, rho are sampled, derivatives by finite differences."""
    x = np.asarray(x, float)
    Wfun = lambda z: metric.full_W().eval(z)
    f = net.eval_f(x)
    J = fd_jacobian(net.eval_f, x, h)
    W = Wfun(x)
    dW = fd_directional(Wfun, x, f, h)
    B = net.eval_B(x)
    r = np.concatenate([np.full(nd.m, mult.rho[i](x)) for i, nd in enumerate(net.nodes)])
    T = -dW + J @ W + W @ J.T - B @ np.diag(r) @ B.T + 2 * metric.lam * W
    return 0.5 * (T + T.T)


def curve_energy(Mfun, P):
    """Midpoint-rule energy with an explicit Python loop."""
    K = len(P) - 1
    E = 0.0
    for k in range(K):
        d = P[k + 1] - P[k]
        E += K * d @ Mfun(0.5 * (P[k] + P[k + 1])) @ d
    return E


def lattice_dp_energy(Mfun, a, b, K=8, width=0.15, per_side=3):
    """Minimum midpoint energy over curves whose interior waypoints lie on a
    lattice in the planes orthogonal to the segment a-b (dynamic programming)."""
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    d = b - a
    n = a.size
    u = d / np.linalg.norm(d)
    Q, _ = np.linalg.qr(np.column_stack([u, np.eye(n)]))
    perp = Q[:, 1:n]
    ticks = np.linspace(-width, width, 2 * per_side + 1) * np.linalg.norm(d)
    grid = np.array(np.meshgrid(*[ticks] * (n - 1), indexing="ij")).reshape(n - 1, -1).T
    offsets = grid @ perp.T
    stages = [a[None]] + [a + (k / K) * d + offsets for k in range(1, K)] + [b[None]]

    def seg(p, q):
        dd = q - p
        return K * dd @ Mfun(0.5 * (p + q)) @ dd

    cost = np.zeros(1)
    for k in range(K):
        prev, nxt = stages[k], stages[k + 1]
        new = np.full(len(nxt), np.inf)
        for j, q in enumerate(nxt):
            new[j] = min(cost[i] + seg(p, q) for i, p in enumerate(prev))
        cost = new
    return float(cost[0])
