"""End-to-end runs: configuration, the solve/extract/audit chain, the hedge, and artifacts."""

from __future__ import annotations

import configparser
import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .barrier import (EmbeddedLawAudit, KCaveBarrier, ShapeReport, barrier_distance,
                      barrier_law, barrier_mismatch, embedded_measure, extract_barrier,
                      regularize, right_support_gaps, verify_shape)
from .embed_lp import (DualCertificate, SlacknessReport, Solution, StoppingLaw, assemble,
                       check_complementary_slackness, duality_gap, solve, value_bounds)
from .errors import RegularizationChangedLaw, ShapeError, ValidationError
from .hedge import (GAMMA_TOL_C, DualHedge, GammaReport, HedgePortfolio, SuperhedgeReport,
                    build_hedge, dual_to_hedge, gamma_agreement, time_zero_split, tol_gamma,
                    verify_dual_hedge, verify_gamma_condition, verify_superhedge)
from .lattice import HorizonPolicy, Lattice, ModelKind, build_lattice
from .measures import (DiscreteMeasure, TargetMeasure, discretize, from_call_prices,
                       load_atomic_measure, load_call_quotes, make_measure, potential)

log = logging.getLogger(__name__)


@dataclass
class RunConfig:
    model: str = "bm"
    beta: float = 1.0
    strike: float = 1.0
    grid_n: int = 16
    support: tuple[float, float] | None = None
    horizon: int | None = None
    tol: float = 1e-9
    tol_p: float = 1e-10
    tol_gamma_c: float = GAMMA_TOL_C
    paths: int = 0
    seed: int = 0
    measure: str | None = None
    calls: str | None = None
    spot: float | None = None
    atoms: list | None = None  # inline (position, weight) pairs instead of a file
    out: str = "."
    recenter: bool = False
    pivot: str = "bland"
    mapping: str = "price"
    workers: int = 1

    def validate(self) -> None:
        errs = []
        if self.grid_n < 1:
            errs.append("grid N must be >= 1")
        for name in ("tol", "tol_p", "tol_gamma_c"):
            if not getattr(self, name) > 0:
                errs.append(f"{name} must be > 0")
        if self.paths < 0:
            errs.append("paths must be >= 0")
        sources = sum(x is not None for x in (self.measure, self.calls, self.atoms))
        if sources != 1:
            errs.append("give exactly one of a measure file, a call-quote file or inline atoms")
        if self.calls is not None and self.spot is None:
            errs.append("call quotes need a spot")
        ModelKind.parse(self.model)
        if errs:
            raise ValidationError("; ".join(errs))

    @property
    def start(self) -> float:
        if self.spot is not None:
            return float(self.spot)
        return 1.0 if ModelKind.parse(self.model) is ModelKind.GEOMETRIC else 0.0

    def to_json(self) -> dict:
        d = dataclasses.asdict(self)
        if d["support"] is not None:
            d["support"] = list(d["support"])
        if d["atoms"] is not None:
            d["atoms"] = [list(map(float, a)) for a in d["atoms"]]
        return d

    @classmethod
    def from_json(cls, d: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        d = {k: v for k, v in d.items() if k in known}
        if d.get("support") is not None:
            d["support"] = tuple(d["support"])
        return cls(**d)


_CASTS = {"beta": float, "strike": float, "grid_n": int, "horizon": int, "tol": float,
          "tol_p": float, "tol_gamma_c": float, "paths": int, "seed": int, "spot": float,
          "workers": int}


def read_config_file(path) -> dict:
    """`key = value` lines; keys match the long flags with '-' or '_'."""
    text = Path(path).read_text()
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    cp.read_string("[run]\n" + text)
    out = {}
    for key, raw in cp["run"].items():
        key = key.replace("-", "_")
        if key == "recenter":
            out[key] = cp["run"].getboolean(key)
        elif key == "support":
            lo, hi = (float(v) for v in raw.replace(",", " ").split())
            out[key] = (lo, hi)
        elif key in _CASTS:
            out[key] = _CASTS[key](raw)
        else:
            out[key] = raw
    return out


def load_target(cfg: RunConfig) -> TargetMeasure:
    model = ModelKind.parse(cfg.model)
    if cfg.atoms is not None:
        return make_measure(cfg.atoms, cfg.start, "inline", recenter=cfg.recenter, model=model)
    if cfg.measure is not None:
        return load_atomic_measure(cfg.measure, cfg.start, recenter=cfg.recenter, model=model)
    return from_call_prices(load_call_quotes(cfg.calls), cfg.start, recenter=cfg.recenter)


def build_inputs(cfg: RunConfig) -> tuple[TargetMeasure, Lattice, DiscreteMeasure, np.ndarray]:
    cfg.validate()
    m = load_target(cfg)
    support = cfg.support if cfg.support is not None else m.support
    horizon = HorizonPolicy(override=cfg.horizon) if cfg.horizon is not None else None
    lat = build_lattice(cfg.model, cfg.grid_n, support, m.start, cfg.beta, cfg.strike, horizon)
    dm = discretize(m, lat, cfg.mapping)
    return m, lat, dm, potential(dm)


@dataclass(eq=False)
class RunResult:
    config: RunConfig
    lattice: Lattice
    target: DiscreteMeasure
    U: np.ndarray
    law: StoppingLaw
    cert: DualCertificate
    value: float
    dual_value: float
    solution: Solution | None = None
    barrier: KCaveBarrier | None = None
    regular: KCaveBarrier | None = None
    shape: ShapeReport | None = None
    audit: EmbeddedLawAudit | None = None
    slackness: SlacknessReport | None = None
    problems: list = field(default_factory=list)
    notes: list = field(default_factory=list)

    @property
    def gap(self) -> float:
        return duality_gap(self.value, self.dual_value)

    @property
    def tol_gamma(self) -> float:
        return tol_gamma(self.lattice.N, self.config.tol_gamma_c)


def _analyse(res: RunResult) -> RunResult:
    cfg, lat = res.config, res.lattice
    res.shape = verify_shape(res.law, lat, cfg.tol_p)
    res.audit = embedded_measure(res.law, lat, res.target, cfg.tol_p)
    res.slackness = check_complementary_slackness(res.law, res.cert, lat, cfg.tol, res.U,
                                                  cfg.tol_p)
    if not lat.strike_vanishes:
        res.notes.append("strike 0: every embedding is optimal, barrier analysis not applicable")
        try:
            res.barrier = extract_barrier(res.law, lat, cfg.tol_p)
        except ShapeError as exc:
            res.notes.append(f"shape: {exc}")
        return res
    try:
        res.barrier = extract_barrier(res.law, lat, cfg.tol_p)
    except ShapeError as exc:
        res.problems.append(f"shape: {exc}")
        return res
    try:
        res.regular = regularize(res.barrier, res.audit)
    except RegularizationChangedLaw as exc:
        res.problems.append(f"regularize: {exc}")
    return res


def solve_run(cfg: RunConfig) -> RunResult:
    """Solve, extract and audit. A shape failure under another rule is retried with Bland's."""
    m, lat, dm, U = build_inputs(cfg)
    lp = assemble(lat, U, target=dm.weights)
    sol = solve(lp, cfg.tol, cfg.pivot)
    res = _analyse(RunResult(cfg, lat, dm, U, sol.law, sol.cert, sol.value, sol.dual_value, sol))
    if lat.strike_vanishes and (not res.shape.ok or res.barrier is None) and cfg.pivot != "bland":
        log.warning("shape check failed under %s; re-solving with Bland's rule", cfg.pivot)
        sol = solve(lp, cfg.tol, "bland")
        res = _analyse(RunResult(cfg, lat, dm, U, sol.law, sol.cert, sol.value, sol.dual_value,
                                 sol))
    if not res.shape.ok and lat.strike_vanishes:
        res.problems.append(f"shape: {res.shape.violations} violations")
    return res


@dataclass(eq=False)
class HedgeResult:
    portfolio: HedgePortfolio
    gamma: GammaReport
    superhedge: SuperhedgeReport
    dual: DualHedge
    dual_report: SuperhedgeReport
    agreement: float
    tol_gamma: float

    @property
    def ok(self) -> bool:
        sh = self.superhedge
        return (self.gamma.ok and sh.dominates and sh.boundary_ok and self.dual_report.ok
                and self.agreement <= self.tol_gamma)

    def failures(self) -> list[str]:
        out = []
        if not self.gamma.ok:
            out.append("gamma condition")
        if not self.superhedge.dominates:
            out.append("superhedge domination")
        if not self.superhedge.boundary_ok:
            out.append("superhedge boundary equalities")
        if not self.dual_report.ok:
            out.append("lattice certificate")
        if self.agreement > self.tol_gamma:
            out.append("dual/primal gamma agreement")
        return out

    def to_json(self) -> dict:
        return {"gamma": self.gamma.to_json(), "superhedge": self.superhedge.to_json(),
                "lattice_certificate": self.dual_report.to_json(),
                "gamma_agreement": self.agreement, "tol_gamma": self.tol_gamma,
                "ok": self.ok, "failures": self.failures()}


def hedge_run(res: RunResult, barrier: KCaveBarrier | None = None) -> HedgeResult:
    b = barrier if barrier is not None else res.barrier
    if b is None:
        raise ShapeError("no barrier: " + "; ".join(res.problems))
    audit = res.audit if barrier is None else embedded_measure(barrier_law(b), res.lattice,
                                                               res.target, res.config.tol_p)
    tg = res.tol_gamma
    hp = build_hedge(res.lattice, b)
    g = verify_gamma_condition(hp.Gamma, audit, tg)
    sh = verify_superhedge(hp, res.lattice, b, audit)
    dh = dual_to_hedge(res.cert, res.lattice, b, res.target)
    law = res.law if barrier is None else barrier_law(b)
    dr = verify_dual_hedge(dh, law, tol_p=res.config.tol_p)
    return HedgeResult(hp, g, sh, dh, dr, gamma_agreement(hp.Gamma, dh.gamma_dual, audit), tg)


def perturbed(res: RunResult) -> RunResult:
    """The same run with the law replaced by the time-0 split embedding of the target."""
    b = time_zero_split(res.lattice, res.target)
    law = barrier_law(b)
    value = float((law.q * res.lattice.F).sum())
    out = RunResult(res.config, res.lattice, res.target, res.U, law, res.cert, value,
                    res.dual_value)
    return _analyse(out)


@dataclass
class VerifyReport:
    gap: float
    gap_ok: bool
    slackness: dict
    shape: dict
    audit: dict
    right_support_gaps: list
    bounds: tuple[float, float]
    bounds_ok: bool
    barrier_mismatch: float | None
    problems: list

    @property
    def ok(self) -> bool:
        return (self.gap_ok and self.slackness["ok"] and self.shape.get("ok", True) and self.bounds_ok
                and self.audit["ok"] and not self.right_support_gaps and not self.problems)

    def to_json(self) -> dict:
        d = dataclasses.asdict(self)
        d["bounds"] = list(self.bounds)
        d["ok"] = self.ok
        return d


def verify_run(res: RunResult) -> VerifyReport:
    cfg, lat = res.config, res.lattice
    gap_ok = res.gap <= 1e-8 * max(1.0, abs(res.value))
    lo, hi = value_bounds(lat, res.target.weights)
    bounds_ok = lo - cfg.tol <= res.value <= hi + cfg.tol
    au = res.audit
    audit = au.to_json()
    audit["ok"] = bool(au.max_deviation <= 50 * cfg.tol and au.completion_defect <= 50 * cfg.tol)
    gaps = [int(lat.levels[i]) for i in right_support_gaps(au)]
    mism = barrier_mismatch(res.barrier, res.law) if res.barrier is not None else None
    shape = res.shape.to_json()
    if not lat.strike_vanishes:
        shape = {"applicable": False, "violations": res.shape.violations}
        gaps = []
    return VerifyReport(res.gap, gap_ok, res.slackness.to_json(), shape, audit,
                        gaps, (lo, hi), bounds_ok, mism, list(res.problems))


def pivot_uniqueness(res_a: RunResult, res_b: RunResult) -> int:
    """Largest l/r difference in steps between two regularised barriers on supp(mu-hat)."""
    if res_a.regular is None or res_b.regular is None:
        raise ShapeError("a run has no regular barrier")
    return barrier_distance(res_a.regular, res_b.regular, res_a.audit.supp())


def _arr(a) -> list | None:
    return None if a is None else np.asarray(a).tolist()


def run_json(res: RunResult) -> dict:
    lat = res.lattice
    sol = res.solution
    out = {
        "version": __version__,
        "config": res.config.to_json(),
        "lattice": lat.summary(),
        "value_primal": res.value,
        "value_dual": res.dual_value,
        "gap": res.gap,
        "target": res.target.weights.tolist(),
        "barrier": res.barrier.rows() if res.barrier is not None else None,
        "regular_barrier": res.regular.rows() if res.regular is not None else None,
        "handoff": res.barrier.handoff if res.barrier is not None else None,
        "shape": res.shape.to_json(),
        "audit": res.audit.to_json(),
        "slackness": res.slackness.to_json(),
        "problems": res.problems,
        "notes": res.notes,
        "law": {"p": _arr(res.law.p), "q": _arr(res.law.q), "handoff": _arr(res.law.handoff)},
        "certificate": {"nu": _arr(res.cert.nu), "eta": _arr(res.cert.eta)},
    }
    if sol is not None:
        out["solver"] = {"pivot": sol.pivot, "selection": sol.selection,
                         "iterations": sol.iterations, "seconds": sol.seconds}
    return out


def load_run(path) -> RunResult:
    """Rebuild a run from its artifact: the grid from the config, the law and duals from the file."""
    d = json.loads(Path(path).read_text())
    cfg = RunConfig.from_json(d["config"])
    _, lat, dm, U = build_inputs(cfg)
    p = np.asarray(d["law"]["p"], float)
    q = np.asarray(d["law"]["q"], float)
    if p.shape != (lat.L + 1, lat.T_max + 1):
        raise ValidationError("artifact law does not fit the grid rebuilt from its config")
    ho = d["law"].get("handoff")
    law = StoppingLaw(lat, p, q, None if ho is None else np.asarray(ho, float))
    cert = DualCertificate(lat, np.asarray(d["certificate"]["nu"], float),
                           np.asarray(d["certificate"]["eta"], float), d["value_dual"])
    value = float((lat.F * q).sum())
    res = RunResult(cfg, lat, dm, U, law, cert, value, float(d["value_dual"]))
    if abs(value - float(d["value_primal"])) > cfg.tol * max(1.0, abs(value)):
        res.problems.append(f"value_primal {d['value_primal']!r} does not match the stored "
                            f"law ({value!r})")
    return _analyse(res)
