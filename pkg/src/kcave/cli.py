"""Command line: solve, hedge, verify, simulate and sweep.

Exit codes: 0 success, 2 invalid input, 3 solver failure, 4 a verification report failed.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from pathlib import Path

import numpy as np
from scipy.spatial.distance import directed_hausdorff

from . import __version__
from .barrier import KCaveBarrier, write_barrier_csv
from .errors import RuleMismatch, ShapeError, SolverError, ValidationError
from .hedge import hedge_json, write_gamma_csv
from .pipeline import (RunConfig, RunResult, hedge_run, load_run, read_config_file, run_json,
                       solve_run, verify_run)
from .simulate import dumps, run_paths, stats_json

log = logging.getLogger("kcave")

EXIT_OK, EXIT_INPUT, EXIT_SOLVER, EXIT_REPORT = 0, 2, 3, 4

_FLAGS = [
    ("--measure", dict(help="CSV of position,weight")),
    ("--calls", dict(help="CSV of strike,price")),
    ("--spot", dict(type=float, help="start value (default 0 for bm, 1 for letf)")),
    ("--model", dict(choices=["bm", "letf"])),
    ("--beta", dict(type=float)),
    ("--strike", dict(type=float)),
    ("--grid-n", dict(type=int)),
    ("--horizon", dict(type=int, help="fix T_max; required when the strike is 0")),
    ("--support", dict(type=float, nargs=2, metavar=("LO", "HI"))),
    ("--tol", dict(type=float)),
    ("--tol-p", dict(type=float)),
    ("--tol-gamma-c", dict(type=float)),
    ("--paths", dict(type=int)),
    ("--seed", dict(type=int)),
    ("--workers", dict(type=int)),
    ("--pivot", dict(choices=["bland", "dantzig", "steepest"])),
    ("--mapping", dict(choices=["price", "log"])),
    ("--out", dict(help="output directory")),
]


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="kcave", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"kcave {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="file of key = value lines; flags win")
    for flag, kw in _FLAGS:
        common.add_argument(flag, default=None, **kw)
    common.add_argument("--recenter", action="store_true", default=None)
    common.add_argument("--stdout", action="store_true", help="write the artifact to stdout")
    common.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)
    sub.add_parser("solve", parents=[common], help="solve the LP and export the barrier")
    for name, text in [("hedge", "build and check the superhedge"),
                       ("verify", "consolidated feasibility, slackness, shape and law audit"),
                       ("simulate", "Monte Carlo run of the walk against the barrier")]:
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--run", help="run.json from solve; solved afresh when omitted")
    p = sub.add_parser("sweep", parents=[common], help="solve over several grid sizes")
    p.add_argument("--grid-list", default="16,64,256")
    return ap


def make_config(ns: argparse.Namespace) -> RunConfig:
    values = read_config_file(ns.config) if ns.config else {}
    for flag, _ in _FLAGS:
        key = flag[2:].replace("-", "_")
        v = getattr(ns, key)
        if v is not None:
            values[key] = tuple(v) if key == "support" else v
    if ns.recenter:
        values["recenter"] = True
    cfg = RunConfig(**values)
    return cfg


class _Output:
    def __init__(self, cfg: RunConfig, to_stdout: bool):
        self.dir = Path(cfg.out)
        self.stdout = to_stdout
        self.dir.mkdir(parents=True, exist_ok=True)

    def json(self, name: str, obj: dict) -> None:
        text = dumps(obj)
        (self.dir / name).write_text(text)
        if self.stdout:
            sys.stdout.write(text)
        log.info("wrote %s", self.dir / name)

    def path(self, name: str) -> Path:
        return self.dir / name


def _envelope(cfg: RunConfig, body: dict) -> dict:
    return {"version": __version__, "config": cfg.to_json(), **body}


def _obtain(ns, cfg: RunConfig) -> RunResult:
    if getattr(ns, "run", None):
        res = load_run(ns.run)
        # simulation settings may be changed on the command line
        for key in ("paths", "seed", "workers", "out"):
            setattr(res.config, key, getattr(cfg, key))
        return res
    return solve_run(cfg)


def cmd_solve(ns, cfg: RunConfig, out: _Output) -> int:
    res = solve_run(cfg)
    if res.barrier is not None:
        write_barrier_csv(res.barrier, out.path("barrier.csv"))
    out.json("run.json", run_json(res))
    if res.problems:
        log.error("solve produced no valid barrier: %s", "; ".join(res.problems))
        return EXIT_SOLVER
    return EXIT_OK


def cmd_hedge(ns, cfg: RunConfig, out: _Output) -> int:
    res = _obtain(ns, cfg)
    hr = hedge_run(res)
    write_gamma_csv(res.lattice, hr.portfolio.Gamma, hr.dual.gamma_dual, out.path("gamma.csv"))
    out.json("hedge.json", _envelope(res.config, hedge_json(hr.portfolio, hr.to_json())))
    if not hr.ok:
        log.error("hedge reports failed: %s (see %s)", ", ".join(hr.failures()),
                  out.path("hedge.json"))
        return EXIT_REPORT
    return EXIT_OK


def cmd_verify(ns, cfg: RunConfig, out: _Output) -> int:
    res = _obtain(ns, cfg)
    rep = verify_run(res)
    body = rep.to_json()
    body["value_primal"] = res.value
    out.json("verify.json", _envelope(res.config, body))
    lo, hi = rep.bounds
    print(f"bounds: {lo:.12g} <= P = {res.value:.12g} <= {hi:.12g}", file=sys.stderr)
    if not rep.ok:
        log.error("verification failed (see %s)", out.path("verify.json"))
        return EXIT_REPORT
    return EXIT_OK


def cmd_simulate(ns, cfg: RunConfig, out: _Output) -> int:
    res = _obtain(ns, cfg)
    c = res.config
    rule = res.barrier if res.barrier is not None else res.law
    st = run_paths(res.lattice, rule, c.paths, c.seed, workers=c.workers)
    body = stats_json(st, res.target, {"value_primal": res.value})
    out.json("stats.json", _envelope(_stable_config(c), body))
    return EXIT_OK


def _stable_config(cfg: RunConfig) -> RunConfig:
    # the thread count must not change the artifact
    d = cfg.to_json()
    d["workers"] = None
    return RunConfig.from_json(d)


def barrier_points(b: KCaveBarrier, levels: np.ndarray) -> np.ndarray:
    lat = b.lattice
    cap = lat.T_max + 1
    pts = []
    for i in levels:
        x = float(lat.x[i])
        pts.append((x, max(int(b.l_idx[i]), 0) / lat.N))
        pts.append((x, min(int(b.r_idx[i]), cap) / lat.N))
    return np.array(pts) if pts else np.zeros((0, 2))


def hausdorff(a: np.ndarray, b: np.ndarray) -> float:
    if len(a) == 0 or len(b) == 0:
        return float("nan")
    return float(max(directed_hausdorff(a, b)[0], directed_hausdorff(b, a)[0]))


def cmd_sweep(ns, cfg: RunConfig, out: _Output) -> int:
    grid = [int(v) for v in ns.grid_list.split(",") if v.strip()]
    rows, prev = [], None
    for N in grid:
        cfg.grid_n = N
        res = solve_run(cfg)
        hr = hedge_run(res) if res.barrier is not None else None
        gl = hr.gamma.max_abs_gamma_left if hr is not None else float("nan")
        pts = barrier_points(res.regular or res.barrier, res.audit.supp()) \
            if res.barrier is not None else np.zeros((0, 2))
        drift = hausdorff(prev, pts) if prev is not None else float("nan")
        rows.append({"N": N, "P": res.value, "D": res.dual_value, "gap": res.gap,
                     "max_abs_gamma_left": gl, "barrier_hausdorff_drift": drift})
        prev = pts
        log.info("N=%d P=%.12g gap=%.2e", N, res.value, res.gap)
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]) if rows else ["N"], lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    out.path("sweep.csv").write_text(buf.getvalue())
    if ns.stdout:
        sys.stdout.write(buf.getvalue())
    return EXIT_OK


_COMMANDS = {"solve": cmd_solve, "hedge": cmd_hedge, "verify": cmd_verify,
             "simulate": cmd_simulate, "sweep": cmd_sweep}


def main(argv: list[str] | None = None) -> int:
    ns = _parser().parse_args(argv)
    level = [logging.WARNING, logging.INFO, logging.DEBUG][min(ns.verbose, 2)]
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = make_config(ns)
        out = _Output(cfg, ns.stdout)
        return _COMMANDS[ns.command](ns, cfg, out)
    except (ValidationError, RuleMismatch, ValueError, TypeError, OSError) as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_INPUT
    except (SolverError, ShapeError) as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
