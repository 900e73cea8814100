"""Command-line entry point.

Exit codes: 0 success, 1 negative scientific result (not verified,
infeasible, convergence criteria missed), 2 and above operational errors.
Every command writes ``manifest.json`` (config echo and library versions)
into ``--out-dir``.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import platform
import sys
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .geodesic import solve_geodesic
from .metric import (
    Multipliers,
    SumSeparableMetric,
    assemble_T_blocks,
    check_killing,
    load_metric,
    load_metric_text,
    save_metric,
    uniform_box,
    verify_on_box,
)
from .network import Network, ReferenceSignal, _data_text, example_network, load_network
from .polyalg import PolyMatrix, Polynomial
from .simulator import SimConfig, export_csv, integrate_closed_loop, measure_convergence
from .synthesis import SynthesisProblem, solve_feasibility

log = logging.getLogger("sepccm")

BUILTIN_METRICS = {"paper": "three_node_published.metric", "synth": "three_node_synth.metric"}


class StageError(Exception):
    """Operational failure inside a named stage (exit code 2)."""

    def __init__(self, stage: str, exc: BaseException):
        self.stage = stage
        super().__init__(f"{stage}: {exc}")


# argument helpers

def parse_vector(text: str, n: int | None = None) -> np.ndarray:
    vals = np.array([float(v) for v in text.replace(" ", "").split(",") if v != ""])
    if n is not None and len(vals) == 1:
        vals = np.full(n, vals[0])
    if n is not None and len(vals) != n:
        raise ValueError(f"expected {n} values, got {len(vals)}")
    return vals


def parse_box(text: str, n: int) -> tuple:
    """``lo,hi`` for every coordinate, or ``lo,hi;lo,hi;...`` per coordinate."""
    parts = [p for p in text.split(";") if p.strip()]
    ivs = []
    for p in parts:
        v = parse_vector(p)
        if len(v) != 2 or not v[0] <= v[1]:
            raise ValueError(f"bad interval {p!r}")
        ivs.append((float(v[0]), float(v[1])))
    if len(ivs) == 1:
        ivs = ivs * n
    if len(ivs) != n:
        raise ValueError(f"box has {len(ivs)} intervals for state dimension {n}")
    return tuple(ivs)


def load_net(spec: str) -> Network:
    if spec == "example":
        return example_network()
    return load_network(Path(spec).read_text())


def identity_metric(net: Network, lam: float) -> tuple:
    blocks = tuple(PolyMatrix.identity(nd.n) for nd in net.nodes)
    return SumSeparableMetric(blocks, lam), Multipliers(tuple(Polynomial() for _ in net.nodes))


def load_met(spec: str, net: Network | None = None, lam: float = 0.1) -> tuple:
    if spec in BUILTIN_METRICS:
        return load_metric_text(_data_text(BUILTIN_METRICS[spec]))
    if spec == "identity":
        if net is None:
            raise ValueError("the identity metric needs --network")
        return identity_metric(net, lam)
    return load_metric(spec)


def _versions() -> dict:
    return {"sepccm": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


def write_manifest(out: Path, command: str, args: argparse.Namespace, outputs: list, status: dict) -> None:
    cfg = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "command", "out_dir")}
    data = {"command": command, "config": cfg, "versions": _versions(), "outputs": sorted(outputs),
            "status": status}
    (out / "manifest.json").write_text(json.dumps(data, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"cannot serialize {type(o).__name__}")


def _stage(name, fn, *a, **kw):
    try:
        return fn(*a, **kw)
    except (ValueError, OSError, KeyError, ArithmeticError, RuntimeError) as exc:
        raise StageError(name, exc) from exc


def _box_for(args, net: Network, metric: SumSeparableMetric | None = None) -> tuple:
    if args.box:
        return parse_box(args.box, net.n)
    if metric is not None and metric.box is not None:
        return metric.box
    return uniform_box(net.n)


def _sim_config(args) -> SimConfig:
    return SimConfig(dt=args.dt, horizon=args.horizon, hc=args.hc, K=args.k_segments, seed=args.seed)


def _write(out: Path, name: str, text: str, outputs: list) -> None:
    (out / name).write_text(text)
    outputs.append(name)


# commands

def cmd_verify(args) -> int:
    out = Path(args.out_dir)
    net = _stage("load", load_net, args.network)
    metric, mult = _stage("load", load_met, args.metric, net, args.lam)
    lam = args.lam if args.lam is not None else metric.lam
    metric = metric.with_lambda(lam)
    box = _stage("config", _box_for, args, net, metric)
    outputs: list = []
    killing = check_killing(net, metric)
    T = _stage("assemble", assemble_T_blocks, net, metric, mult)
    cert = _stage("verify", verify_on_box, T, box, args.eps, args.samples, args.seed, lam=lam, label=args.metric)
    _write(out, "certificate.txt", cert.to_text() + f"killing = {str(killing.passed).lower()}\n", outputs)
    _write(out, "certificate.json", json.dumps({**cert.to_dict(), "killing": killing.passed}, indent=2) + "\n",
           outputs)
    ok = cert.verified and killing.passed
    write_manifest(out, "verify", args, outputs, {"verified": cert.verified, "killing": killing.passed})
    print(cert.to_text(), end="")
    return 0 if ok else 1


def cmd_synth(args) -> int:
    out = Path(args.out_dir)
    net = _stage("load", load_net, args.network)
    box = _stage("config", _box_for, args, net)
    lam = 0.1 if args.lam is None else args.lam
    problem = _stage("config", SynthesisProblem, net, lam=lam, box=box, deg_W=args.deg_w, deg_rho=args.deg_rho,
                     eps=args.eps, seed=args.seed, rounds=args.rounds, max_iter=args.max_iter,
                     method=args.method)
    res = _stage("synth", solve_feasibility, problem)
    outputs: list = []
    _write(out, "synthesis.txt", res.summary() + "\n", outputs)
    if res.certificate is not None:
        _write(out, "certificate.txt", res.certificate.to_text(), outputs)
    if res.feasible:
        save_metric(out / "synthesized.metric", res.metric, res.mult)
        outputs.append("synthesized.metric")
    write_manifest(out, "synth", args, outputs, {"feasible": res.feasible, "objective": res.objective})
    print(res.summary())
    return 0 if res.feasible else 1


def cmd_geodesic(args) -> int:
    out = Path(args.out_dir)
    net = _stage("load", load_net, args.network)
    metric, _ = _stage("load", load_met, args.metric, net, 0.1 if args.lam is None else args.lam)
    i = args.node
    if not 0 <= i < metric.N:
        raise StageError("config", ValueError(f"node {i} out of range"))
    n_i = metric.dims[i]
    xs = _stage("config", parse_vector, args.x_star, n_i)
    x = _stage("config", parse_vector, args.x, n_i)
    lo, hi = metric.block_ranges[i]
    box = None if metric.box is None else np.asarray(metric.box)[lo:hi]
    res = _stage("geodesic", solve_geodesic, metric, i, xs, x, args.k_segments, box=box)
    outputs: list = []
    lines = ["s," + ",".join(f"x_{j}" for j in range(n_i))]
    for k, p in enumerate(res.curve.waypoints):
        lines.append(",".join(format(v, ".17g") for v in (k / res.curve.K, *p)))
    _write(out, "geodesic.csv", "\n".join(lines) + "\n", outputs)
    summary = {"node": i, "energy": res.energy, "iterations": res.iterations, "converged": res.converged,
               "residual": res.residual, "left_box": res.left_box}
    _write(out, "geodesic.json", json.dumps(summary, indent=2) + "\n", outputs)
    write_manifest(out, "geodesic", args, outputs, summary)
    print(f"energy = {res.energy!r}")
    return 0 if res.converged else 1


def _simulate(args, net, metric, mult, out: Path, outputs: list) -> tuple:
    cfg = _stage("config", _sim_config, args)
    ref = ReferenceSignal(np.zeros(net.n), m=net.m)
    x0 = ref.x_star0 + _stage("config", parse_vector, args.x0_offset, net.n)
    r, c = _stage("simulate", integrate_closed_loop, net, metric, mult, ref, x0, cfg)
    rep = measure_convergence(r, c, cfg)
    export_csv(r, out / "reference.csv")
    export_csv(c, out / "closedloop.csv")
    export_csv(c, out / "inputs.csv", kind="inputs")
    export_csv(c, out / "energy.csv", kind="energy")
    export_csv(rep, out / "report.csv")
    outputs += ["reference.csv", "closedloop.csv", "inputs.csv", "energy.csv", "report.csv"]
    return rep, c


def _convergence_ok(rep, lam: float) -> bool:
    return bool(rep.lambda_fit >= 0.5 * lam and rep.bound_check >= 0.95)


def cmd_simulate(args) -> int:
    out = Path(args.out_dir)
    net = _stage("load", load_net, args.network)
    metric, mult = _stage("load", load_met, args.metric, net, args.lam)
    lam = metric.lam if args.lam is None else args.lam
    outputs: list = []
    rep, c = _simulate(args, net, metric, mult, out, outputs)
    ok = _convergence_ok(rep, lam)
    write_manifest(out, "simulate", args, outputs,
                   {"lambda_fit": rep.lambda_fit, "bound_check": rep.bound_check, "converged": ok,
                    "left_box": c.left_box})
    print(f"lambda_fit = {rep.lambda_fit!r}\nbound_check = {rep.bound_check!r}")
    return 0 if ok else 1


def cmd_demo(args) -> int:
    out = Path(args.out_dir)
    outputs: list = []
    net = _stage("load", example_network)
    paper, paper_mult = _stage("load", load_met, "paper")
    killing = _stage("killing", check_killing, net, paper)
    pbox = paper.box
    lines = [f"killing = {str(killing.passed).lower()}"]
    for lam in (0.0, 0.05, 0.1):
        T = assemble_T_blocks(net, paper.with_lambda(lam), paper_mult)
        cert = _stage("paper-audit", verify_on_box, T, pbox, args.eps, args.samples, args.seed, lam=lam,
                      label=f"published lambda={lam}")
        lines.append(cert.to_text())
    _write(out, "paper_certificate.txt", "\n".join(lines), outputs)
    lam = 0.1 if args.lam is None else args.lam
    if args.metric in (None, "synthesize"):
        box = _stage("config", _box_for, args, net)
        problem = _stage("config", SynthesisProblem, net, lam=lam, box=box, eps=args.eps, seed=args.seed)
        res = _stage("synth", solve_feasibility, problem)
        _write(out, "synthesis.txt", res.summary() + "\n", outputs)
        if not res.feasible:
            write_manifest(out, "demo", args, outputs, {"stage": "synth", "feasible": False})
            print(res.summary())
            return 1
        metric, mult, cert = res.metric, res.mult, res.certificate
    else:
        metric, mult = _stage("load", load_met, args.metric, net, lam)
        metric = metric.with_lambda(lam)
        box = _stage("config", _box_for, args, net, metric)
        T = assemble_T_blocks(net, metric, mult)
        cert = _stage("audit", verify_on_box, T, box, args.eps, args.samples, args.seed, lam=lam,
                      label=args.metric)
    save_metric(out / "synthesized.metric", metric, mult)
    outputs.append("synthesized.metric")
    _write(out, "certificate.txt", cert.to_text(), outputs)
    rep, c = _simulate(args, net, metric, mult, out, outputs)
    conv = _convergence_ok(rep, lam)
    status = {"audit_verified": cert.verified, "lambda_fit": rep.lambda_fit, "bound_check": rep.bound_check,
              "converged": conv, "left_box": c.left_box}
    write_manifest(out, "demo", args, outputs, status)
    print(f"audit verified = {cert.verified}\nlambda_fit = {rep.lambda_fit!r}\nbound_check = {rep.bound_check!r}")
    return 0 if cert.verified and conv else 1


def cmd_report(args) -> int:
    out = Path(args.out_dir)
    try:
        manifest = json.loads((out / "manifest.json").read_text())
    except (OSError, ValueError) as exc:
        raise StageError("report", exc) from exc
    print(f"command: {manifest['command']}")
    for k, v in sorted(manifest.get("status", {}).items()):
        print(f"{k}: {v}")
    rep = out / "report.csv"
    if rep.exists():
        print(rep.read_text(), end="")
    for name in ("certificate.txt", "synthesis.txt"):
        if (out / name).exists():
            print((out / name).read_text(), end="")
    return 0


# parser

def _finite_float(text: str) -> float:
    v = float(text)
    if not math.isfinite(v):
        raise argparse.ArgumentTypeError("must be finite")
    return v


def _common() -> argparse.ArgumentParser:
    # a fresh parent per subcommand: parents share Action objects, so set_defaults would leak
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--network", default="example", help="'example' or a network spec file")
    common.add_argument("--metric", default=None,
                        help="'paper', 'synth', 'identity' or a metric file (demo: 'synthesize')")
    common.add_argument("--box", default=None, help="'lo,hi' or 'lo,hi;lo,hi;...' (write --box=-1,1)")
    common.add_argument("--lambda", dest="lam", type=_finite_float, default=None)
    common.add_argument("--eps", type=_finite_float, default=1e-6)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out-dir", default="out")
    common.add_argument("--k-segments", type=int, default=16)
    common.add_argument("--dt", type=_finite_float, default=1e-3)
    common.add_argument("--hc", type=_finite_float, default=1e-2)
    common.add_argument("--horizon", type=_finite_float, default=20.0)
    common.add_argument("-v", "--verbose", action="store_true")
    return common


def build_parser() -> argparse.ArgumentParser:

    p = argparse.ArgumentParser(prog="sepccm", description="Sum-separable control contraction metrics")
    p.add_argument("--version", action="version", version=f"sepccm {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("verify", parents=[_common()], help="audit T(x) < 0 on a box")
    s.add_argument("--samples", type=int, default=4096)
    s.set_defaults(func=cmd_verify, metric="paper")

    s = sub.add_parser("synth", parents=[_common()], help="search for a metric")
    s.add_argument("--deg-w", type=int, default=2)
    s.add_argument("--deg-rho", type=int, default=2)
    s.add_argument("--rounds", type=int, default=6)
    s.add_argument("--max-iter", type=int, default=4000)
    s.add_argument("--method", choices=("smoothed", "subgradient"), default="smoothed")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("geodesic", parents=[_common()], help="minimum-energy curve of one node")
    s.add_argument("--node", type=int, default=0)
    s.add_argument("--x-star", default="0")
    s.add_argument("--x", required=True)
    s.set_defaults(func=cmd_geodesic, metric="paper")

    s = sub.add_parser("simulate", parents=[_common()], help="closed-loop simulation")
    s.add_argument("--x0-offset", default="0.1")
    s.set_defaults(func=cmd_simulate, metric="synth")

    s = sub.add_parser("demo", parents=[_common()], help="end-to-end run on the three-node example")
    s.add_argument("--samples", type=int, default=4096)
    s.add_argument("--x0-offset", default="0.1")
    s.set_defaults(func=cmd_demo)

    s = sub.add_parser("report", parents=[_common()], help="summarize an output directory")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) if exc.code in (0, None) else 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command != "report":
            os.makedirs(args.out_dir, exist_ok=True)
        return args.func(args)
    except StageError as exc:
        print(f"error [{exc.stage}]: {exc.__cause__}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error [io]: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - last-resort operational error
        print(f"error [internal]: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
