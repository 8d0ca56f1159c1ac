"""Thresholding functions for truncated power penalties.

``threshold`` evaluates the scalar minimizer map

    H(lam) = argmin_t (t - lam)**2 + min(|t|**p, r**p)

together with the quantities that describe its single discontinuity
(``jump_location`` and ``jump_size``). Plain hard and soft shrinkage are
provided as well since they appear as limiting cases and as the total
variation baseline.

All functions accept scalars or numpy arrays and are pure.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

__all__ = [
    "NumericalError",
    "ThresholdSpec",
    "ThresholdCurve",
    "f_p",
    "f_p_inverse",
    "s_p",
    "scalar_objective",
    "jump_location",
    "jump_size",
    "lower_branch",
    "threshold",
    "hard_threshold",
    "soft_threshold",
    "build_curve",
]

BISECTION_TOL = 1e-12
NEWTON_TOL = 1e-12
NEWTON_MAX_ITERS = 100
CURVE_SAMPLES = 4096


class NumericalError(ArithmeticError):
    """Raised when an inner root finder fails to converge."""


@dataclass(frozen=True)
class ThresholdSpec:
    """Parameters of the penalty ``gamma * min(|t|**p, r**p)``.

    ``gamma != 1`` is only meaningful for ``p == 2``; other exponents are
    rejected rather than guessed.
    """

    p: float
    r: float
    gamma: float = 1.0

    def __post_init__(self):
        if not (math.isfinite(self.p) and self.p >= 1):
            raise ValueError(f"exponent p must be >= 1, got {self.p!r}")
        if not (math.isfinite(self.r) and self.r > 0):
            raise ValueError(f"scale r must be > 0, got {self.r!r}")
        if not (math.isfinite(self.gamma) and self.gamma > 0):
            raise ValueError(f"weight gamma must be > 0, got {self.gamma!r}")
        if self.gamma != 1.0 and self.p != 2.0:
            raise ValueError("gamma != 1 is only supported with p = 2")

    @property
    def hybrid(self) -> bool:
        """True for p = 1 with r >= 1/4 (soft part followed by a jump)."""
        return self.p == 1.0 and self.r >= 0.25


def _wrap(x, like):
    if np.ndim(like) == 0:
        return float(x)
    return x


def f_p(t, p: float):
    """Return ``t + p/2 * sgn(t) * |t|**(p-1)``."""
    if p < 1:
        raise ValueError(f"f_p requires p >= 1, got {p!r}")
    t_arr = np.asarray(t, dtype=float)
    out = t_arr + 0.5 * p * np.sign(t_arr) * np.abs(t_arr) ** (p - 1)
    return _wrap(out, t)


def _inverse_closed(lam: np.ndarray, p: float):
    a = np.abs(lam)
    if p == 2.0:
        t = a / 2.0
    elif p == 1.5:
        # x = sqrt(t) solves x**2 + 0.75 x - a = 0
        x = (-0.75 + np.sqrt(0.5625 + 4.0 * a)) / 2.0
        t = x * x
    else:
        return None
    return np.sign(lam) * t


def _inverse_newton(lam: np.ndarray, p: float, tol: float) -> np.ndarray:
    a = np.abs(lam)
    lo = np.zeros_like(a)
    hi = a.copy()
    t = a.copy()
    scale = np.maximum(1.0, a)
    half_p = 0.5 * p
    done = a == 0
    for _ in range(NEWTON_MAX_ITERS):
        if done.all():
            break
        with np.errstate(divide="ignore", invalid="ignore"):
            ft = t + half_p * t ** (p - 1) - a
            # bracket [lo, hi] always contains the root since F_p is increasing
            hi = np.where(ft > 0, t, hi)
            lo = np.where(ft < 0, t, lo)
            done = done | (np.abs(ft) <= tol * scale) | (hi - lo <= 4e-16 * scale)
            dfdt = 1.0 + half_p * (p - 1) * t ** (p - 2)
            step = t - ft / dfdt
        bad = ~np.isfinite(step) | (step <= lo) | (step >= hi)
        step = np.where(bad, 0.5 * (lo + hi), step)
        t = np.where(done, t, step)
    if not done.all():
        idx = int(np.flatnonzero(~done)[0])
        raise NumericalError(
            f"F_p inverse did not converge for lambda={float(lam.flat[idx])!r}, p={p!r}"
        )
    return np.sign(lam) * t


def f_p_inverse(lam, p: float, tol: float = NEWTON_TOL, method: str = "auto"):
    """Invert ``f_p`` for ``p > 1``.

    Parameters
    ----------
    lam : float or array
    p : float
        Exponent, strictly greater than one.
    tol : float
        Accepted residual ``|f_p(t) - lam|``, relative to ``max(1, |lam|)``.
    method : {"auto", "newton"}
        ``"auto"`` uses the closed forms for p = 2 and p = 3/2 and safeguarded
        Newton otherwise; ``"newton"`` forces the generic path.
    """
    if p <= 1:
        raise ValueError(f"f_p_inverse requires p > 1, got {p!r}")
    if tol <= 0:
        raise ValueError("tol must be positive")
    lam_arr = np.asarray(lam, dtype=float)
    out = None
    if method == "auto":
        out = _inverse_closed(lam_arr, p)
    elif method != "newton":
        raise ValueError(f"unknown method {method!r}")
    if out is None:
        out = _inverse_newton(np.atleast_1d(lam_arr), p, tol).reshape(lam_arr.shape)
    return _wrap(out, lam)


def s_p(lam, p: float, method: str = "auto"):
    """Value of ``(t - lam)**2 + |t|**p`` at ``t = f_p_inverse(lam)``."""
    t = np.asarray(f_p_inverse(lam, p, method=method))
    lam_arr = np.asarray(lam, dtype=float)
    return _wrap((t - lam_arr) ** 2 + np.abs(t) ** p, lam)


def scalar_objective(t, lam, p: float, r: float, gamma: float = 1.0):
    """``(t - lam)**2 + gamma * min(|t|**p, r**p)``, broadcasting."""
    t = np.asarray(t, dtype=float)
    return (t - lam) ** 2 + gamma * np.minimum(np.abs(t) ** p, r**p)


@lru_cache(maxsize=256)
def _jump_location(p: float, r: float, gamma: float) -> float:
    if p == 1.0:
        return r + 0.25 if r >= 0.25 else math.sqrt(r)
    if gamma != 1.0:
        g1 = 1.0 + gamma
        return r / math.sqrt(2.0 / g1**2 + 1.0 - 2.0 / g1)
    lo = r
    hi = r + 0.5 * p * r ** (p - 1)
    target = r**p
    while hi - lo > BISECTION_TOL * max(1.0, hi):
        mid = 0.5 * (lo + hi)
        if s_p(mid, p) < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def jump_location(spec: ThresholdSpec) -> float:
    """Abscissa of the jump of ``threshold``.

    Found by bisection on the bracket ``(r, r + p/2 r**(p-1))`` for p > 1.
    """
    return _jump_location(float(spec.p), float(spec.r), float(spec.gamma))


def lower_branch(lam, spec: ThresholdSpec):
    """Continuous branch of ``threshold`` used for ``|lam| <= jump_location``."""
    lam_arr = np.asarray(lam, dtype=float)
    p, r = spec.p, spec.r
    if p == 1.0:
        if r >= 0.25:
            out = np.sign(lam_arr) * np.maximum(np.abs(lam_arr) - 0.5, 0.0)
        else:
            out = np.zeros_like(lam_arr)
    elif p == 2.0:
        out = lam_arr / (1.0 + spec.gamma)
    else:
        out = np.asarray(f_p_inverse(lam_arr, p))
    return _wrap(out, lam)


def jump_size(spec: ThresholdSpec) -> float:
    """Size of the discontinuity, ``lam' - H(lam')``."""
    lam = jump_location(spec)
    return lam - lower_branch(lam, spec)


@dataclass(frozen=True)
class ThresholdCurve:
    """Tabulated lower branch on ``[0, jump_location]`` for fast evaluation."""

    spec: ThresholdSpec
    jump_location: float
    jump_size: float
    lambdas: np.ndarray = field(repr=False)
    values: np.ndarray = field(repr=False)

    def __call__(self, lam):
        lam_arr = np.asarray(lam, dtype=float)
        a = np.abs(lam_arr)
        low = np.interp(a, self.lambdas, self.values)
        out = np.where(a <= self.jump_location, np.sign(lam_arr) * low, lam_arr)
        return _wrap(out, lam)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["lambda", "H"])
            for lam, val in zip(self.lambdas, self.values):
                writer.writerow([repr(float(lam)), repr(float(val))])


def build_curve(spec: ThresholdSpec, samples: int = CURVE_SAMPLES) -> ThresholdCurve:
    """Precompute the lower branch on ``samples`` uniform points of ``(0, lam']``."""
    lam_jump = jump_location(spec)
    grid = np.linspace(0.0, lam_jump, samples + 1)
    values = np.asarray(lower_branch(grid, spec), dtype=float)
    values.setflags(write=False)
    grid.setflags(write=False)
    return ThresholdCurve(spec, lam_jump, jump_size(spec), grid, values)


def threshold(lam, spec: ThresholdSpec, curve: ThresholdCurve | None = None):
    """Evaluate the thresholding function.

    At ``|lam| == jump_location`` the lower branch is returned. With ``curve``
    the lower branch is interpolated from the precomputed table.
    """
    if curve is not None:
        if curve.spec != spec:
            raise ValueError("curve was built for a different spec")
        return curve(lam)
    lam_arr = np.asarray(lam, dtype=float)
    low = np.asarray(lower_branch(lam_arr, spec))
    out = np.where(np.abs(lam_arr) <= jump_location(spec), low, lam_arr)
    return _wrap(out, lam)


def hard_threshold(lam, cut: float):
    """0 where ``|lam| <= cut``, identity elsewhere."""
    if cut < 0:
        raise ValueError("cut must be >= 0")
    lam_arr = np.asarray(lam, dtype=float)
    return _wrap(np.where(np.abs(lam_arr) <= cut, 0.0, lam_arr), lam)


def soft_threshold(lam, cut: float):
    """Standard shrinkage ``sgn(lam) * max(|lam| - cut, 0)``."""
    if cut < 0:
        raise ValueError("cut must be >= 0")
    lam_arr = np.asarray(lam, dtype=float)
    return _wrap(np.sign(lam_arr) * np.maximum(np.abs(lam_arr) - cut, 0.0), lam)
