"""Iterative thresholding for truncated power penalties.

Unconstrained problems iterate ``u <- H(u + T*(g - T u))``. Problems carrying
a 2D gradient operator additionally project onto ``ker Q`` (discrete
gradient fields) after each thresholding step.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .operators import ForwardModel, GradientOperator2D, assemble_primal, matrix_model
from .thresholding import (
    ThresholdSpec,
    build_curve,
    f_p,
    jump_location,
    jump_size,
    lower_branch,
    soft_threshold,
    threshold,
)

__all__ = [
    "Problem",
    "IterationConfig",
    "IterationTrace",
    "FixedPointReport",
    "ProjectedReport",
    "objective",
    "iterate_unconstrained",
    "iterate_projected",
    "iterate_soft",
    "verify_fixed_point",
    "verify_projected",
    "verify_local_min",
    "local_min_radius",
    "assemble_primal",
]

STABLE_ITERS = 10


@dataclass(frozen=True, eq=False)
class Problem:
    """One instance of ``||T u - g||^2 + gamma * sum min(|u_i|^p, r^p)``."""

    model: ForwardModel
    spec: ThresholdSpec
    constrained: GradientOperator2D | None = None

    def __post_init__(self):
        if not self.model.norm_bound < 1.0:
            raise ValueError(
                f"forward operator norm {self.model.norm_bound:.6g} must be < 1; "
                "rescale the model first"
            )
        if self.constrained is not None:
            if self.spec.p != 2.0:
                raise ValueError("constrained problems require p = 2")
            if self.model.shape[1] != self.constrained.grad_size:
                raise ValueError("model columns must match the gradient size")

    @classmethod
    def from_matrix(cls, T, g, spec: ThresholdSpec) -> "Problem":
        return cls(matrix_model(T, g), spec)

    @property
    def size(self) -> int:
        return self.model.shape[1]

    @property
    def jump_location(self) -> float:
        return jump_location(self.spec)

    @property
    def jump_size(self) -> float:
        return jump_size(self.spec)

    def residual(self, u) -> np.ndarray:
        return self.model.apply(u) - self.model.data

    def gradient_step(self, u) -> np.ndarray:
        """``u + T*(g - T u)``."""
        return u - self.model.adjoint(self.residual(u))

    def correlation(self, u) -> np.ndarray:
        """``T*(g - T u)``."""
        return -self.model.adjoint(self.residual(u))


def _check_vector(u, problem: Problem) -> np.ndarray:
    u = np.array(u, dtype=float).ravel()
    if u.size != problem.size:
        raise ValueError(f"expected a vector of length {problem.size}, got {u.size}")
    return u


def objective(u, problem: Problem) -> float:
    """``||T u - g||^2 + gamma * sum_i min(|u_i|^p, r^p)``."""
    u = _check_vector(u, problem)
    spec = problem.spec
    res = problem.residual(u)
    pen = np.minimum(np.abs(u) ** spec.p, spec.r**spec.p).sum()
    return float(res @ res + spec.gamma * pen)


@dataclass(frozen=True)
class IterationConfig:
    max_iters: int = 10_000
    tol: float = 1e-10
    use_curve: bool = False
    record_iterates: bool = False

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not self.tol > 0:
            raise ValueError("tol must be > 0")


@dataclass
class IterationTrace:
    """History of one run.

    ``objective[n]`` and ``large_counts[n]`` refer to ``u^n`` (``u^0`` is the
    start); ``step_norms[n]`` is ``||u^(n+1) - u^n||``. Partitions are stored
    as change points ``(n, I1)``; ``partition(n)`` expands them.
    """

    objective: list = field(default_factory=list)
    step_norms: list = field(default_factory=list)
    large_counts: list = field(default_factory=list)
    margins: list = field(default_factory=list)
    q_norms: list = field(default_factory=list)
    partition_changes: list = field(default_factory=list)
    iterates: list | None = None
    iterate: np.ndarray | None = None
    converged: bool = False
    fixation_step: int | None = None

    @property
    def iterations(self) -> int:
        return len(self.step_norms)

    def partition(self, n: int):
        """``(I0, I1)`` of ``u^n`` as sorted index tuples."""
        if not 0 <= n <= self.iterations:
            raise IndexError(n)
        large = ()
        for step, idx in self.partition_changes:
            if step > n:
                break
            large = idx
        size = self.iterate.size
        mask = np.zeros(size, dtype=bool)
        mask[list(large)] = True
        return tuple(np.flatnonzero(~mask).tolist()), tuple(large)

    @property
    def partitions(self):
        return [self.partition(n) for n in range(self.iterations + 1)]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iteration", "objective", "step_norm", "large_count"])
            for n, obj in enumerate(self.objective):
                step = self.step_norms[n] if n < len(self.step_norms) else ""
                writer.writerow([n, repr(obj), repr(step) if step != "" else "",
                                 self.large_counts[n]])

    def summary(self) -> dict:
        out = {
            "iterations": self.iterations,
            "converged": self.converged,
            "fixation_step": self.fixation_step,
            "final_objective": self.objective[-1],
            "final_step_norm": self.step_norms[-1] if self.step_norms else 0.0,
            "large_count": self.large_counts[-1],
            "min_margin": _finite(min(self.margins[1:])) if len(self.margins) > 1 else None,
        }
        if self.q_norms:
            out["max_q_norm"] = max(self.q_norms)
        return out

    def to_json(self) -> str:
        return json.dumps(self.summary(), sort_keys=True, indent=2)


def _make_map(problem: Problem, config: IterationConfig):
    spec = problem.spec
    curve = build_curve(spec) if config.use_curve and spec.p not in (1.0, 2.0) else None
    model = problem.model
    if model.dense is not None:
        T = model.dense
        A = np.eye(T.shape[1]) - T.T @ T
        b = T.T @ model.data

        def grad(u):
            return A @ u + b
    else:
        grad = problem.gradient_step

    def apply(u):
        lam = grad(u)
        return threshold(lam, spec, curve), lam

    return apply


def _gap_margin(u, lam_jump, low_cap):
    a = np.abs(u)
    big = a > lam_jump
    lo = low_cap - a[~big].max() if (~big).any() else math.inf
    hi = a[big].min() - lam_jump if big.any() else math.inf
    return float(min(lo, hi))


def _run(problem: Problem, u0, config: IterationConfig, projected: bool,
         step_map=None, cut=None, low_cap=None, energy=None) -> IterationTrace:
    u = _check_vector(u0, problem)
    if not np.isfinite(u).all():
        raise ValueError("initial vector contains non-finite values")
    spec = problem.spec
    lam_jump = jump_location(spec) if cut is None else cut
    if low_cap is None:
        low_cap = lam_jump - jump_size(spec)
    step_map = step_map or _make_map(problem, config)
    energy = energy or objective
    op = problem.constrained

    trace = IterationTrace(iterates=[u.copy()] if config.record_iterates else None)
    trace.objective.append(energy(u, problem))
    large = tuple(np.flatnonzero(np.abs(u) > lam_jump).tolist())
    trace.partition_changes.append((0, large))
    trace.large_counts.append(len(large))
    trace.margins.append(_gap_margin(u, lam_jump, low_cap))
    if projected:
        trace.q_norms.append(float(np.abs(op.constraint(u)).max()))

    stable = 0
    for n in range(config.max_iters):
        new, lam = step_map(u)
        if projected:
            # the discontinuity set is read off before projecting
            new_large = tuple(np.flatnonzero(np.abs(lam) > lam_jump).tolist())
            new = op.project(new)
        else:
            new_large = tuple(np.flatnonzero(np.abs(new) > lam_jump).tolist())
        if not np.isfinite(new).all():
            trace.iterate = u
            raise FloatingPointError(f"iteration diverged at step {n + 1}")
        step = float(np.linalg.norm(new - u))
        u = new
        trace.step_norms.append(step)
        trace.objective.append(energy(u, problem))
        trace.large_counts.append(len(new_large))
        trace.margins.append(_gap_margin(u, lam_jump, low_cap))
        if projected:
            trace.q_norms.append(float(np.abs(op.constraint(u)).max()))
        if config.record_iterates:
            trace.iterates.append(u.copy())
        if new_large != large:
            trace.partition_changes.append((n + 1, new_large))
            large = new_large
            stable = 0
        else:
            stable += 1
        if step == 0.0 or (step <= config.tol and stable >= STABLE_ITERS):
            trace.converged = True
            break

    trace.iterate = u
    trace.fixation_step = trace.partition_changes[-1][0]
    return trace


def iterate_unconstrained(problem: Problem, u0=None, config: IterationConfig | None = None,
                          **kwargs) -> IterationTrace:
    """Run the thresholded Landweber iteration.

    Stops once the step norm is below ``tol`` and the partition has not
    changed for ten consecutive iterations (or immediately on an exact fixed
    point). Running out of iterations is reported via ``trace.converged``.
    """
    if problem.constrained is not None:
        raise ValueError("use iterate_projected for constrained problems")
    config = config or IterationConfig(**kwargs)
    if u0 is None:
        u0 = np.zeros(problem.size)
    return _run(problem, u0, config, projected=False)


def iterate_soft(problem: Problem, cut: float, u0=None,
                 config: IterationConfig | None = None, **kwargs) -> IterationTrace:
    """Iterative soft thresholding ``u <- S_cut(u + T*(g - T u))``.

    Minimizes ``||T u - g||^2 + 2 cut ||u||_1`` (a total variation penalty
    when ``u`` holds derivatives). The threshold spec of ``problem`` is not
    used; the recorded partition is the support of ``u``.
    """
    if problem.constrained is not None:
        raise ValueError("soft thresholding is provided for unconstrained problems")
    if not cut > 0:
        raise ValueError("cut must be > 0")
    config = config or IterationConfig(**kwargs)
    if u0 is None:
        u0 = np.zeros(problem.size)

    def step_map(u):
        lam = problem.gradient_step(u)
        return soft_threshold(lam, cut), lam

    def energy(u, pb):
        res = pb.residual(u)
        return float(res @ res + 2.0 * cut * np.abs(u).sum())

    return _run(problem, u0, config, projected=False, step_map=step_map, cut=0.0,
                low_cap=0.0, energy=energy)


def iterate_projected(problem: Problem, u0=None, config: IterationConfig | None = None,
                      **kwargs) -> IterationTrace:
    """Projected thresholding for derivative fields constrained to ``Q u = 0``.

    ``u0`` defaults to ``P D_h g_img`` where ``g_img`` is the observed image
    of the model. The recorded partition is the set of entries that took the
    identity branch before projection. Descent is not guaranteed here, so the
    objective is only recorded.
    """
    op = problem.constrained
    if op is None:
        raise ValueError("problem has no constraint operator")
    config = config or IterationConfig(**kwargs)
    if u0 is None:
        if problem.model.observed is None:
            raise ValueError("u0 is required when the model carries no observed image")
        u0 = op.forward(problem.model.observed)
    u0 = op.project(_check_vector(u0, problem))
    return _run(problem, u0, config, projected=True)


@dataclass(frozen=True)
class FixedPointReport:
    residual_large: float
    residual_small: float
    separation_low: float
    separation_high: float
    is_fixed_point: bool
    tol: float
    jump_location: float
    jump_size: float
    large_indices: tuple = ()
    # p = 1 only: residual with the alternative band bound r - 1/4 and the
    # number of entries that band leaves unclassified
    residual_small_alt: float | None = None
    unclassified_alt: int | None = None

    @property
    def margin_low(self) -> float:
        return (self.jump_location - self.jump_size) - self.separation_low

    @property
    def margin_high(self) -> float:
        return self.separation_high - self.jump_location

    def as_dict(self) -> dict:
        out = {
            "residual_large": self.residual_large,
            "residual_small": self.residual_small,
            "separation_low": _finite(self.separation_low),
            "separation_high": _finite(self.separation_high),
            "margin_low": _finite(self.margin_low),
            "margin_high": _finite(self.margin_high),
            "is_fixed_point": self.is_fixed_point,
            "tol": self.tol,
            "jump_location": self.jump_location,
            "jump_size": self.jump_size,
            "large_count": len(self.large_indices),
        }
        if self.residual_small_alt is not None:
            out["residual_small_alt"] = self.residual_small_alt
            out["unclassified_alt"] = self.unclassified_alt
        return out


def _finite(x):
    return x if math.isfinite(x) else None


def _small_residual_p1(u, w, spec: ThresholdSpec, tol: float) -> np.ndarray:
    zero = np.abs(u) <= tol
    if spec.hybrid:
        cut = 0.5
        moving = np.abs(w - 0.5 * np.sign(u))
    else:
        cut = math.sqrt(spec.r)
        # the hard branch only admits zeros
        moving = np.abs(u)
    return np.where(zero, np.maximum(np.abs(w) - cut, 0.0), moving)


def verify_fixed_point(u, problem: Problem, tol: float = 1e-6) -> FixedPointReport:
    """Check the stationarity and separation conditions of a thresholding limit.

    Entries are classified as large when ``|u_i|`` exceeds the midpoint of the
    gap ``(lam' - delta, lam']``; the separation fields then show whether the
    classification is unambiguous.
    """
    if problem.constrained is not None:
        raise ValueError("use verify_projected for constrained problems")
    u = _check_vector(u, problem)
    spec = problem.spec
    lam_jump, delta = jump_location(spec), jump_size(spec)
    w = problem.correlation(u)
    a = np.abs(u)
    big = a > lam_jump - 0.5 * delta
    small = ~big

    res_large = float(np.abs(w[big]).max()) if big.any() else 0.0
    alt = alt_count = None
    if spec.p == 1.0:
        r_small = _small_residual_p1(u[small], w[small], spec, tol)
        if spec.hybrid:
            us, ws = u[small], w[small]
            band_a = np.abs(us) <= 0.5
            band_b = (np.abs(us) > 0.5) & (np.abs(us) <= spec.r - 0.25)
            alt_res = np.concatenate([
                np.maximum(np.abs(ws[band_a]) - 0.5, 0.0),
                np.abs(ws[band_b] - 0.5 * np.sign(us[band_b])),
            ])
            alt = float(alt_res.max()) if alt_res.size else 0.0
            alt_count = int((~band_a & ~band_b).sum())
    else:
        target = spec.gamma * (np.asarray(f_p(u[small], spec.p)) - u[small])
        r_small = np.abs(w[small] - target)
    res_small = float(r_small.max()) if r_small.size else 0.0

    sep_low = float(a[small].max()) if small.any() else -math.inf
    sep_high = float(a[big].min()) if big.any() else math.inf
    ok = (
        res_large <= tol
        and res_small <= tol
        and sep_high >= lam_jump - tol
        and sep_low <= lam_jump - delta + tol
    )
    return FixedPointReport(res_large, res_small, sep_low, sep_high, bool(ok), tol,
                            lam_jump, delta, tuple(np.flatnonzero(big).tolist()),
                            alt, alt_count)


@dataclass(frozen=True)
class ProjectedReport:
    map_residual: float
    constraint_residual: float
    is_fixed_point: bool
    tol: float
    large_indices: tuple = ()

    def as_dict(self) -> dict:
        return {
            "map_residual": self.map_residual,
            "constraint_residual": self.constraint_residual,
            "is_fixed_point": self.is_fixed_point,
            "tol": self.tol,
            "large_count": len(self.large_indices),
        }


def verify_projected(u, problem: Problem, tol: float = 1e-6) -> ProjectedReport:
    """Fixed-point residual ``||u - P H(u + T*(g - T u))||_inf`` and ``||Q u||_inf``."""
    op = problem.constrained
    if op is None:
        raise ValueError("problem has no constraint operator")
    u = _check_vector(u, problem)
    lam = problem.gradient_step(u)
    image = op.project(threshold(lam, problem.spec))
    map_res = float(np.abs(image - u).max())
    q_res = float(np.abs(op.constraint(u)).max())
    large = tuple(np.flatnonzero(np.abs(lam) > jump_location(problem.spec)).tolist())
    return ProjectedReport(map_res, q_res, map_res <= tol and q_res <= tol, tol, large)


def local_min_radius(spec: ThresholdSpec) -> float:
    """``min(lam' - r, r - H(lam'))``: perturbations within it cannot change the partition."""
    lam_jump = jump_location(spec)
    return float(min(lam_jump - spec.r, spec.r - lower_branch(lam_jump, spec)))


def verify_local_min(u, problem: Problem, trials: int = 1000, radius: float | None = None,
                     seed: int = 0, slack: float = 1e-12) -> bool:
    """Probe ``J(u + h) >= J(u) - slack`` for random ``||h|| <= radius``.

    Half of the probes are uniform in the ball, the rest move a single
    coordinate. ``slack`` is scaled by ``max(1, J(u))``.
    """
    u = _check_vector(u, problem)
    if radius is None:
        radius = local_min_radius(problem.spec)
    if radius <= 0:
        raise ValueError("radius must be positive")
    rng = np.random.default_rng(seed)
    base = objective(u, problem)
    floor = base - slack * max(1.0, abs(base))
    n = u.size
    for k in range(trials):
        if k % 2 == 0:
            d = rng.standard_normal(n)
            d *= radius * rng.random() ** (1.0 / n) / np.linalg.norm(d)
        else:
            d = np.zeros(n)
            d[rng.integers(n)] = radius * rng.uniform(-1.0, 1.0)
        if objective(u + d, problem) < floor:
            return False
    return True
