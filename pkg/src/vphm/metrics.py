"""Probabilistic forecast scoring: CRPS, calibration, sharpness, PICP.

Two predictive-distribution kinds are supported: Gaussian (mu, sigma) and a
piecewise-linear CDF built from a quantile set. CRPS uses closed forms for
both kinds (the numerical quadrature of the defining integral is kept in
the test suite as the oracle).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np
from scipy.special import ndtr, ndtri

_INV_SQRT_PI = 1.0 / math.sqrt(math.pi)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class LengthMismatch(ValueError):
    """Paired sequences have different lengths."""


class InvertedInterval(ValueError):
    """Interval lower bound exceeds upper bound."""


@dataclass(frozen=True)
class GaussianDist:
    """Gaussian predictive distribution."""

    mu: float
    sigma: float

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")

    def cdf(self, x: float) -> float:
        return float(ndtr((x - self.mu) / self.sigma))

    def quantile(self, p: float) -> float:
        return float(self.mu + self.sigma * ndtri(p))

    def variance(self) -> float:
        return self.sigma ** 2

    def crps(self, y: float) -> float:
        z = (y - self.mu) / self.sigma
        phi = _INV_SQRT_2PI * math.exp(-0.5 * z * z)
        big_phi = float(ndtr(z))
        return self.sigma * (z * (2.0 * big_phi - 1.0) + 2.0 * phi - _INV_SQRT_PI)


class PiecewiseCdf:
    """Piecewise-linear CDF through (value, level) pairs.

    ``cdf`` queries interpolate linearly and clamp to the extreme levels
    outside the value range. For moment and CRPS computations the tail mass
    outside the quantile grid (levels[0] below, 1 - levels[-1] above) is
    treated as point mass sitting on the extreme values, which makes the
    object a proper probability distribution with finite CRPS.

    Crossing quantile inputs are repaired by sorting the values, so the CDF
    is monotone by construction.
    """

    def __init__(self, values, levels):
        levels = np.asarray(levels, dtype=np.float64)
        values = np.asarray(values, dtype=np.float64)
        if levels.size != values.size:
            raise LengthMismatch("values and levels must pair up")
        if levels.size < 2:
            raise ValueError("need at least 2 quantile levels")
        if np.any((levels <= 0.0) | (levels >= 1.0)):
            raise ValueError("levels must lie strictly inside (0, 1)")
        order = np.argsort(levels)
        self.levels = levels[order]
        self.values = np.sort(values)  # monotone repair

    def cdf(self, x: float) -> float:
        return float(np.interp(x, self.values, self.levels))

    def quantile(self, p: float) -> float:
        return float(np.interp(p, self.levels, self.values))

    def _segments(self):
        """(a, b, Fa, Fb) per linear piece of the proper CDF."""
        return zip(self.values[:-1], self.values[1:],
                   self.levels[:-1], self.levels[1:])

    def mean(self) -> float:
        v, p = self.values, self.levels
        m = p[0] * v[0] + (1.0 - p[-1]) * v[-1]
        masses = np.diff(p)
        m += float(np.sum(masses * 0.5 * (v[:-1] + v[1:])))
        return m

    def variance(self) -> float:
        v, p = self.values, self.levels
        ex2 = p[0] * v[0] ** 2 + (1.0 - p[-1]) * v[-1] ** 2
        masses = np.diff(p)
        # E[X^2] of a uniform piece on [a,b] is (a^2 + ab + b^2)/3
        ex2 += float(np.sum(masses * (v[:-1] ** 2 + v[:-1] * v[1:] + v[1:] ** 2) / 3.0))
        return ex2 - self.mean() ** 2

    def crps(self, y: float) -> float:
        """Exact integral of (F(x) - 1{x >= y})^2 over the linear pieces,
        plus the tail strips when y falls outside the value range."""
        v, p = self.values, self.levels
        total = 0.0
        if y < v[0]:
            total += v[0] - y          # F = 0, indicator = 1
        if y > v[-1]:
            total += y - v[-1]         # F = 1, indicator = 0

        def piece(a, b, fa, fb, h):
            # integral of (F - h)^2 on [a,b] with F linear from fa to fb
            da, db = fa - h, fb - h
            return (b - a) * (da * da + da * db + db * db) / 3.0

        for a, b, fa, fb in self._segments():
            if b == a:
                continue
            if y <= a:
                total += piece(a, b, fa, fb, 1.0)
            elif y >= b:
                total += piece(a, b, fa, fb, 0.0)
            else:
                fy = fa + (fb - fa) * (y - a) / (b - a)
                total += piece(a, y, fa, fy, 0.0)
                total += piece(y, b, fy, fb, 1.0)
        return total


PredictiveDistribution = Union[GaussianDist, PiecewiseCdf]


@dataclass
class ScoreReport:
    """The per-flight scoring row: CRPS mean/std, miscalibration area,
    sharpness and interval coverage."""

    crps_mean: float
    crps_std: float
    miscalibration_area: float
    sharpness: float
    picp: float

    def to_kv(self) -> dict:
        return {"crps_mean": self.crps_mean, "crps_std": self.crps_std,
                "miscalibration_area": self.miscalibration_area,
                "sharpness": self.sharpness, "picp": self.picp}


def crps(dist: PredictiveDistribution, y: float) -> float:
    """Continuous ranked probability score of one forecast/observation pair."""
    return dist.crps(float(y))


def crps_summary(dists: Sequence[PredictiveDistribution], ys) -> tuple:
    """Arithmetic mean and population standard deviation of per-point CRPS."""
    ys = np.asarray(ys, dtype=np.float64)
    if len(dists) != ys.size or ys.size == 0:
        raise LengthMismatch(f"{len(dists)} forecasts vs {ys.size} observations")
    scores = np.array([d.crps(float(y)) for d, y in zip(dists, ys)])
    return float(scores.mean()), float(scores.std())


def _quantile_matrix(dists, grid) -> np.ndarray:
    """(T, G) matrix of per-forecast quantiles; vectorized for the all-
    Gaussian case, which dominates scoring time."""
    if all(isinstance(d, GaussianDist) for d in dists):
        mus = np.array([d.mu for d in dists])
        sigmas = np.array([d.sigma for d in dists])
        with np.errstate(divide="ignore"):
            zs = ndtri(grid)
        return mus[:, None] + sigmas[:, None] * zs[None, :]
    return np.array([[d.quantile(float(p)) for p in grid] for d in dists])


def calibration_curve(dists: Sequence[PredictiveDistribution], ys,
                      grid_size: int = 101):
    """Observed coverage fraction per nominal probability level.

    Returns (levels, observed fractions, miscalibration area); the area is
    the trapezoidal integral of |observed - level| over the uniform grid.
    """
    ys = np.asarray(ys, dtype=np.float64)
    if len(dists) != ys.size or ys.size == 0:
        raise LengthMismatch(f"{len(dists)} forecasts vs {ys.size} observations")
    if grid_size < 2:
        raise ValueError("grid_size must be >= 2")
    grid = np.linspace(0.0, 1.0, grid_size)
    qmat = _quantile_matrix(dists, grid)
    observed = (ys[:, None] <= qmat).mean(axis=0)
    area = float(np.trapezoid(np.abs(observed - grid), grid))
    return grid, observed, area


def sharpness(dists: Sequence[PredictiveDistribution]) -> float:
    """Root mean predictive variance."""
    if len(dists) == 0:
        raise ValueError("sharpness needs at least one forecast")
    return float(np.sqrt(np.mean([d.variance() for d in dists])))


def picp(lower, upper, ys) -> float:
    """Fraction of observations inside [lower, upper], elementwise."""
    lower = np.asarray(lower, dtype=np.float64)
    upper = np.asarray(upper, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if not lower.shape == upper.shape == ys.shape or ys.size == 0:
        raise LengthMismatch("lower, upper and observations must align")
    if np.any(lower > upper):
        raise InvertedInterval("interval lower bound exceeds upper bound")
    return float(np.mean((lower <= ys) & (ys <= upper)))


def compute_report(dists: Sequence[PredictiveDistribution], ys,
                   lower, upper, grid_size: int = 101) -> ScoreReport:
    """All four paper metrics for one flight's forecasts."""
    mean, std = crps_summary(dists, ys)
    _, _, area = calibration_curve(dists, ys, grid_size)
    return ScoreReport(crps_mean=mean, crps_std=std, miscalibration_area=area,
                       sharpness=sharpness(dists), picp=picp(lower, upper, ys))
