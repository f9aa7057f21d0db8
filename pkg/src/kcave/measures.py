"""Target laws: loading, Breeden-Litzenberger inversion, validation, lattice discretisation
and the potential bound on expected occupation."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (ArbitrageError, CenteringError, CoverageError, ParseError,
                     ValidationError)
from .lattice import Lattice, ModelKind, index_coordinate, _apply_shift, _start_shift

log = logging.getLogger(__name__)

MASS_TOL = 1e-12
CENTER_TOL = 1e-8
ARB_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class TargetMeasure:
    positions: np.ndarray
    weights: np.ndarray
    start: float
    label: str = ""

    @property
    def mass(self) -> float:
        return float(self.weights.sum())

    @property
    def mean(self) -> float:
        return float(np.dot(self.positions, self.weights))

    @property
    def support(self) -> tuple[float, float]:
        return float(self.positions[0]), float(self.positions[-1])

    @property
    def is_trivial(self) -> bool:
        """Single atom at the start: the embedding is to stop at once."""
        return len(self.positions) == 1 and abs(self.positions[0] - self.start) <= CENTER_TOL

    def atoms(self) -> list[tuple[float, float]]:
        return [(float(x), float(w)) for x, w in zip(self.positions, self.weights)]


@dataclass(frozen=True, eq=False)
class CallQuoteSurface:
    strikes: np.ndarray
    prices: np.ndarray
    maturity: str = ""


@dataclass(frozen=True, eq=False)
class DiscreteMeasure:
    lattice: Lattice
    weights: np.ndarray  # indexed by level j - j0
    shift: float = 0.0
    mapping: str = "price"

    @property
    def mass(self) -> float:
        return float(self.weights.sum())

    @property
    def mean(self) -> float:
        return float(np.dot(self.lattice.x, self.weights))

    def support_rows(self, tol: float = 0.0) -> np.ndarray:
        return np.flatnonzero(self.weights > tol)


@dataclass
class ValidationReport:
    mass: float
    mean: float
    support: tuple[float, float]
    centering_error: float
    errors: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.errors

    def to_json(self) -> dict:
        return {"mass": self.mass, "mean": self.mean, "support": list(self.support),
                "centering_error": self.centering_error, "errors": list(self.errors)}


def make_measure(atoms, start: float, label: str = "", *, center_tol: float = CENTER_TOL,
                 recenter: bool = False, model: ModelKind = ModelKind.ARITHMETIC) -> TargetMeasure:
    """Build and validate a measure from (position, weight) pairs; atoms are merged and sorted."""
    pairs = sorted((float(x), float(w)) for x, w in atoms)
    if not pairs:
        raise ValidationError("empty measure")
    xs, ws = [], []
    for x, w in pairs:
        if xs and x == xs[-1]:
            ws[-1] += w
        else:
            xs.append(x)
            ws.append(w)
    m = TargetMeasure(np.array(xs), np.array(ws), float(start), label)
    if recenter:
        m = recentered(m, model)
    report = validate(m, model, center_tol=center_tol)
    if report.errors:
        cls = CenteringError if all(e.startswith("centering") for e in report.errors) else ValidationError
        raise cls("; ".join(report.errors))
    return m


def recentered(m: TargetMeasure, model: ModelKind = ModelKind.ARITHMETIC) -> TargetMeasure:
    """Affine move of the atoms so the mean equals the start (scaling for the geometric model)."""
    if model is ModelKind.GEOMETRIC:
        factor = m.start / m.mean
        log.info("recentering: positions scaled by %.12g", factor)
        pos = m.positions * factor
    else:
        delta = m.start - m.mean
        log.info("recentering: positions shifted by %.12g", delta)
        pos = m.positions + delta
    return TargetMeasure(pos, m.weights.copy(), m.start, (m.label + " [recentered]").strip())


def validate(m: TargetMeasure, model: "ModelKind | str" = ModelKind.ARITHMETIC,
             center_tol: float = CENTER_TOL) -> ValidationReport:
    model = ModelKind.parse(model)
    errors: list[str] = []
    if len(m.positions) == 0:
        return ValidationReport(0.0, float("nan"), (float("nan"), float("nan")), float("nan"),
                                ["empty measure"])
    if not np.all(np.isfinite(m.positions)) or not np.all(np.isfinite(m.weights)):
        errors.append("unbounded: non-finite position or weight")
    if np.any(m.weights <= 0):
        errors.append("weights must be positive")
    if np.any(np.diff(m.positions) <= 0):
        errors.append("positions must be strictly increasing")
    mass = m.mass
    if abs(mass - 1.0) > MASS_TOL:
        errors.append(f"mass {mass:.12g} != 1")
    mean = m.mean / mass if mass > 0 else float("nan")
    cerr = abs(mean - m.start)
    if not cerr <= center_tol:
        errors.append(f"centering: mean {mean:.12g} != start {m.start:.12g}")
    if model is ModelKind.GEOMETRIC and (m.positions[0] <= 0 or m.start <= 0):
        errors.append("nonpositive price in geometric model")
    return ValidationReport(mass, mean, m.support, cerr, errors)


def load_atomic_measure(path: "str | Path", start: float = 0.0, *, center_tol: float = CENTER_TOL,
                        recenter: bool = False,
                        model: "ModelKind | str" = ModelKind.ARITHMETIC) -> TargetMeasure:
    rows = _read_csv(path, ("position", "weight"))
    return make_measure(rows, start, label=str(path), center_tol=center_tol,
                        recenter=recenter, model=ModelKind.parse(model))


def load_call_quotes(path: "str | Path", maturity: str = "") -> CallQuoteSurface:
    rows = _read_csv(path, ("strike", "price"))
    k = np.array([r[0] for r in rows])
    c = np.array([r[1] for r in rows])
    return CallQuoteSurface(k, c, maturity)


def _read_csv(path: "str | Path", header: tuple[str, str]) -> list[tuple[float, float]]:
    path = Path(path)
    if not path.exists():
        raise ParseError(f"{path}: no such file")
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        rows = []
        for lineno, row in enumerate(reader, start=1):
            if not row or all(not c.strip() for c in row) or row[0].lstrip().startswith("#"):
                continue
            if lineno == 1 and [c.strip().lower() for c in row] == list(header):
                continue
            if len(row) != 2:
                raise ParseError(f"{path}:{lineno}: expected 2 fields, got {len(row)}")
            try:
                rows.append((float(row[0]), float(row[1])))
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from None
    if not rows:
        raise ValidationError(f"{path}: empty measure")
    return rows


def check_surface(s: CallQuoteSurface, tol: float = ARB_TOL) -> np.ndarray:
    """Return the slopes between consecutive strikes after the no-arbitrage checks."""
    k, c = np.asarray(s.strikes, float), np.asarray(s.prices, float)
    if len(k) < 2:
        raise ValidationError("need at least two quotes")
    if np.any(np.diff(k) <= 0):
        raise ValidationError("strikes must be strictly increasing")
    if np.any(k < 0) or np.any(c < -tol):
        raise ArbitrageError("negative strike or price")
    slopes = np.diff(c) / np.diff(k)
    if np.any(slopes > tol):
        raise ArbitrageError("call prices increase with strike")
    if np.any(slopes < -1 - tol):
        raise ArbitrageError("call prices fall faster than the strike rises")
    bad = np.flatnonzero(np.diff(slopes) < -tol)
    if len(bad):
        raise ArbitrageError(f"convexity violated at strike {k[bad[0] + 1]:.12g}")
    return slopes


def from_call_prices(s: CallQuoteSurface, start: float, *, center_tol: float = CENTER_TOL,
                     recenter: bool = False, tol: float = ARB_TOL) -> TargetMeasure:
    """Invert a call curve: atoms at strikes carry the jump of the slope; tails sit at the ends."""
    slopes = check_surface(s, tol)
    k = np.asarray(s.strikes, float)
    c = np.asarray(s.prices, float)
    n = len(k)
    w = np.zeros(n + 1)
    pos = np.zeros(n + 1)
    pos[:n] = k
    w[0] = 1.0 + slopes[0]
    w[1:n - 1] = np.diff(slopes)
    upper = -slopes[-1]
    w[n - 1] = 0.0
    if c[-1] > tol and upper > tol:
        # mass beyond the last strike goes to its barycentre so the mean stays exact
        w[n] = upper
        pos[n] = k[-1] + c[-1] / upper
    else:
        w[n - 1] = upper
    w[np.abs(w) <= tol] = 0.0
    implied_mean = k[0] + c[0]
    if abs(implied_mean - start) > center_tol and not recenter:
        raise CenteringError(f"implied mean {implied_mean:.12g} != start {start:.12g}")
    keep = w > 0
    w = w[keep] / w[keep].sum()
    return make_measure(zip(pos[keep], w), start, label="calls", center_tol=center_tol,
                        recenter=recenter)


def call_prices(m: TargetMeasure, strikes) -> np.ndarray:
    strikes = np.asarray(strikes, float)
    return np.maximum(m.positions[None, :] - strikes[:, None], 0.0) @ m.weights


def discretize(m: TargetMeasure, lat: Lattice, mapping: str = "price") -> DiscreteMeasure:
    """Split each atom between its two neighbouring levels.

    With mapping "price" the split preserves mass and mean in price coordinates (the
    walk is a martingale there). With "log" on the geometric grid the split is linear
    in log-price instead; the mean is then only approximately preserved.
    """
    if mapping not in ("price", "log"):
        raise ValueError("mapping must be 'price' or 'log'")
    shift = _start_shift(lat.model, lat.N, m.start, lat.j_star)
    pos = _apply_shift(lat.model, m.positions, shift)
    u = index_coordinate(lat.model, lat.N, pos)
    near = np.abs(u - np.round(u)) <= 1e-10 * np.maximum(1.0, np.abs(u))
    u = np.where(near, np.round(u), u)
    if u.min() < lat.j0 or u.max() > lat.jL:
        raise CoverageError("atom outside the lattice")
    x = lat.x
    out = np.zeros(lat.L + 1)
    for ui, xi, wi in zip(u, pos, m.weights):
        lo = int(np.floor(ui))
        if lo == ui or lo >= lat.jL:
            out[int(round(ui)) - lat.j0] += wi
            continue
        a, b = lo - lat.j0, lo + 1 - lat.j0
        if lat.model is ModelKind.ARITHMETIC or mapping == "log":
            theta = ui - lo
        else:
            theta = (xi - x[a]) / (x[b] - x[a])
        out[a] += wi * (1.0 - theta)
        out[b] += wi * theta
    return DiscreteMeasure(lat, out, shift=float(shift), mapping=mapping)


def potential(dm: DiscreteMeasure, j_star: int | None = None) -> np.ndarray:
    """Expected occupation bound U_j on the interior levels.

    U_j = (E|Y - x_j| - |x_{j*} - x_j|) / E|step at x_j|; on the arithmetic grid the
    denominator is 1/sqrt(N).
    """
    lat = dm.lattice
    j_star = lat.j_star if j_star is None else j_star
    x = lat.x
    xs = x[j_star - lat.j0]
    u_mu = np.abs(x[:, None] - x[None, :]) @ dm.weights
    U = (u_mu - np.abs(x - xs)) / lat.step_size()
    supp = dm.support_rows()
    lo, hi = x[supp[0]], x[supp[-1]]
    U[(x <= lo) | (x >= hi)] = 0.0
    U = np.maximum(U, 0.0)
    return U[1:-1]
