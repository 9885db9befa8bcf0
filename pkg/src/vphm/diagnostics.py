"""Battery health-state diagnostics.

A battery is judged by how well the measured voltage stays inside the
forecast's total-uncertainty prediction interval: high coverage means the
battery behaves like the (healthy) fleet the model was trained on. The
report is binary: OK when the coverage score reaches the threshold, NOK
otherwise. Defaults: z = 1.96 (central 95% Gaussian interval) and a 0.9
coverage threshold; both are configuration knobs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import metrics
from .cnn import HybridForecast

DEFAULT_Z = 1.96
DEFAULT_THRESHOLD = 0.9


@dataclass
class HealthReport:
    flight_id: str
    picp_score: float
    verdict: str            # "OK" | "NOK"
    interval_z: float
    n_points: int
    model_kind: str = "cnn"
    duplicate: bool = False


def _verdict(score: float, threshold: float) -> str:
    return "OK" if score >= threshold else "NOK"


def diagnose_bounds(flight_id: str, lower, upper, measured,
                    z: float = DEFAULT_Z, threshold: float = DEFAULT_THRESHOLD,
                    model_kind: str = "cnn") -> HealthReport:
    """Health verdict from explicit per-timestep interval bounds."""
    lower = np.asarray(lower, dtype=np.float64)
    upper = np.asarray(upper, dtype=np.float64)
    measured = np.asarray(measured, dtype=np.float64)
    score = metrics.picp(lower, upper, measured)
    return HealthReport(flight_id=flight_id, picp_score=score,
                        verdict=_verdict(score, threshold), interval_z=z,
                        n_points=measured.size, model_kind=model_kind)


def diagnose(forecast: HybridForecast, measured, z: float = DEFAULT_Z,
             threshold: float = DEFAULT_THRESHOLD) -> HealthReport:
    """Score one flight: corrected voltage +/- z * total uncertainty vs the
    measurements, excluding the uncorrected warm-up prefix."""
    measured = np.asarray(measured, dtype=np.float64)
    if measured.shape != forecast.corrected_voltage.shape:
        raise metrics.LengthMismatch(
            f"{measured.size} measurements vs {forecast.corrected_voltage.size}"
            " forecast points")
    idx = forecast.scored_indices
    center = forecast.corrected_voltage[idx]
    half = z * forecast.sigma_tu[idx]
    report = diagnose_bounds(forecast.flight_id, center - half, center + half,
                             measured[idx], z=z, threshold=threshold)
    return report


def fleet_report(reports) -> list:
    """Rows for the fleet health table, sorted by flight id; repeated
    (flight, model) pairs are kept but flagged."""
    reports = list(reports)
    if not reports:
        raise ValueError("fleet_report needs at least one report")
    rows = sorted(reports, key=lambda r: (r.flight_id, r.model_kind))
    seen = set()
    for row in rows:
        key = (row.flight_id, row.model_kind)
        row.duplicate = key in seen
        seen.add(key)
    return rows


def format_fleet_table(rows) -> str:
    """Columnar text rendering of the fleet health table (coverage to three
    decimals)."""
    width = max([len("flight")] + [len(r.flight_id) for r in rows])
    lines = [f"{'flight':<{width}}  {'model':<5}  {'picp':>6}  verdict"]
    for r in rows:
        flag = "  (duplicate)" if r.duplicate else ""
        lines.append(f"{r.flight_id:<{width}}  {r.model_kind:<5}  "
                     f"{r.picp_score:>6.3f}  {r.verdict}{flag}")
    return "\n".join(lines) + "\n"
