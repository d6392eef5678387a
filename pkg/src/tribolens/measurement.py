"""Incline tribometer trials to friction coefficients.

The counterface is a V-groove, so both the static and the kinetic
formulas carry a ``cos(beta)`` factor where ``beta`` is the sunken angle
of the groove side. With ``beta = 0`` they reduce to the planar incline
formulas.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DomainError, MeasurementWarning, SchemaError

GRAVITY = 9.81
DEFAULT_GATE_DISTANCE = 0.3
DEFAULT_GROOVE_BETA = 15.0

REGIMES = ("static", "kinetic")
ORIENTATIONS = ("ww", "wf", "fw", "ff", "none")

TRIAL_CSV_HEADER = (
    "block", "surface", "regime", "orientation", "theta_deg",
    "transit_time_s", "gate_distance_m", "beta_deg", "gravity",
)


def _check_angle(name, deg, *, open_low=False):
    if not math.isfinite(deg) or deg >= 90.0 or deg < 0.0 or (open_low and deg == 0.0):
        lo = "(0" if open_low else "[0"
        raise DomainError(f"{name}={deg} outside {lo}, 90) degrees")


def static_mu(theta_s_deg, beta_deg=0.0):
    """Static coefficient ``tan(theta_s) * cos(beta)`` from the slip angle."""
    _check_angle("theta_s_deg", theta_s_deg)
    _check_angle("beta_deg", beta_deg)
    return math.tan(math.radians(theta_s_deg)) * math.cos(math.radians(beta_deg))


def kinetic_mu(theta_k_deg, t, d=DEFAULT_GATE_DISTANCE, g=GRAVITY, beta_deg=0.0):
    """Kinetic coefficient from the transit time between two gates.

    The block starts at rest at the first gate and is assumed to accelerate
    uniformly over the separation ``d``. A negative value means the block
    moved faster than a frictionless slide would allow; it is returned as is
    and a ``MeasurementWarning`` is emitted.
    """
    _check_angle("theta_k_deg", theta_k_deg, open_low=True)
    _check_angle("beta_deg", beta_deg)
    for name, val in (("t", t), ("d", d), ("g", g)):
        if not (val > 0 and math.isfinite(val)):
            raise DomainError(f"{name} must be positive and finite, got {val}")
    th = math.radians(theta_k_deg)
    mu = (math.tan(th) - 2.0 * d / (g * t * t * math.cos(th))) * math.cos(math.radians(beta_deg))
    if mu < 0:
        warnings.warn(
            f"negative kinetic coefficient {mu:.6g} (theta={theta_k_deg}, t={t})",
            MeasurementWarning,
            stacklevel=2,
        )
    return mu


def free_slide_time(theta_k_deg, d=DEFAULT_GATE_DISTANCE, g=GRAVITY):
    """Transit time of a frictionless block, i.e. where ``kinetic_mu`` is 0."""
    th = math.radians(theta_k_deg)
    return math.sqrt(2.0 * d / (g * math.sin(th)))


@dataclass(frozen=True)
class TrialRecord:
    material_block: str
    material_surface: str
    regime: str
    orientation: str = "none"
    theta_deg: float = 0.0
    transit_time_s: float | None = None
    gate_distance_m: float | None = None
    groove_beta_deg: float = DEFAULT_GROOVE_BETA
    gravity_mps2: float = GRAVITY

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise SchemaError(f"unknown regime {self.regime!r}")
        if self.orientation not in ORIENTATIONS:
            raise SchemaError(f"unknown orientation {self.orientation!r}")
        _check_angle("theta_deg", self.theta_deg)
        _check_angle("groove_beta_deg", self.groove_beta_deg)
        if self.regime == "kinetic":
            if self.transit_time_s is None or not self.transit_time_s > 0:
                raise SchemaError("kinetic trial needs transit_time_s > 0")
            if self.gate_distance_m is not None and not self.gate_distance_m > 0:
                raise SchemaError("kinetic trial needs gate_distance_m > 0")

    @property
    def group(self):
        return (self.material_block, self.material_surface, self.regime, self.orientation)

    def coefficient(self):
        if self.regime == "static":
            return static_mu(self.theta_deg, self.groove_beta_deg)
        d = self.gate_distance_m if self.gate_distance_m is not None else DEFAULT_GATE_DISTANCE
        return kinetic_mu(self.theta_deg, self.transit_time_s, d, self.gravity_mps2,
                          self.groove_beta_deg)


def aggregate_trials(trials):
    """Mean, population std and count of the coefficients of repeated trials.

    ``trials`` may hold ``TrialRecord`` objects (all from one group) or
    plain coefficients.
    """
    trials = list(trials)
    if not trials:
        raise SchemaError("aggregate_trials needs at least one trial")
    if isinstance(trials[0], TrialRecord):
        groups = {t.group for t in trials}
        if len(groups) != 1:
            raise SchemaError(f"trials span {len(groups)} groups, expected one")
        values = np.array([t.coefficient() for t in trials])
    else:
        values = np.asarray(trials, dtype=np.float64)
    return float(values.mean()), float(values.std()), int(values.size)


def _opt_float(cell):
    cell = (cell or "").strip()
    return float(cell) if cell else None


def read_trials_csv(path):
    """Parse a trial CSV into ``TrialRecord`` objects."""
    records = []
    with open(Path(path), newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = set(TRIAL_CSV_HEADER) - set(reader.fieldnames or ())
        if missing:
            raise SchemaError(f"trial CSV missing columns: {sorted(missing)}")
        for lineno, row in enumerate(reader, start=2):
            try:
                beta = _opt_float(row["beta_deg"])
                grav = _opt_float(row["gravity"])
                records.append(TrialRecord(
                    material_block=row["block"].strip(),
                    material_surface=row["surface"].strip(),
                    regime=row["regime"].strip(),
                    orientation=(row["orientation"] or "none").strip() or "none",
                    theta_deg=float(row["theta_deg"]),
                    transit_time_s=_opt_float(row["transit_time_s"]),
                    gate_distance_m=_opt_float(row["gate_distance_m"]),
                    groove_beta_deg=DEFAULT_GROOVE_BETA if beta is None else beta,
                    gravity_mps2=GRAVITY if grav is None else grav,
                ))
            except (ValueError, DomainError) as exc:
                raise SchemaError(f"{path}:{lineno}: {exc}") from None
    return records


def write_trials_csv(path, trials):
    with open(Path(path), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(TRIAL_CSV_HEADER)
        for t in trials:
            w.writerow([
                t.material_block, t.material_surface, t.regime, t.orientation,
                repr(t.theta_deg),
                "" if t.transit_time_s is None else repr(t.transit_time_s),
                "" if t.gate_distance_m is None else repr(t.gate_distance_m),
                repr(t.groove_beta_deg), repr(t.gravity_mps2),
            ])


def summarize_trials(trials):
    """Group trials and aggregate each group.

    Returns ``{(block, surface, regime, orientation): (mean, std, count)}``
    in first-seen order.
    """
    groups = {}
    for t in trials:
        groups.setdefault(t.group, []).append(t)
    return {key: aggregate_trials(items) for key, items in groups.items()}
