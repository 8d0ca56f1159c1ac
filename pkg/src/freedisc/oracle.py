"""Brute-force ground truth for small instances.

The global minimizer is found through the identity

    min_u J(u) = min_S min_u ||T u - g||^2 + gamma * sum_{i not in S} |u_i|^p
                                          + gamma * |S| * r^p,

where every inner problem is convex. For p = 2 it is a ridge system; for
p in {1, 3/2} it is solved by a batched proximal iteration.
"""
from __future__ import annotations

import csv
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .operators import matrix_model
from .solver import (
    STABLE_ITERS,
    Problem,
    local_min_radius,
    objective,
    verify_fixed_point,
)
from .thresholding import ThresholdSpec, f_p_inverse, jump_location, threshold

__all__ = [
    "OracleResult",
    "BasinMap",
    "dense_operator",
    "global_min_enumerate",
    "grid_search_min",
    "check_global_is_fixed_point",
    "check_isolated",
    "basin_map",
    "thread_count",
    "iterate_batch",
]

MAX_N_QUADRATIC = 20
MAX_N_PROXIMAL = 12
CHUNK = 4096
INNER_TOL = 1e-12
INNER_MAX_ITERS = 200_000


def thread_count() -> int:
    """Worker cap from ``FREEDISC_THREADS`` (default 1)."""
    raw = os.environ.get("FREEDISC_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def dense_operator(problem: Problem) -> np.ndarray:
    model = problem.model
    if model.dense is not None:
        return np.asarray(model.dense)
    return np.column_stack([model.apply(e) for e in np.eye(model.shape[1])])


@dataclass(frozen=True)
class OracleResult:
    minimizer: np.ndarray
    value: float
    winning_subset: tuple
    subsets_evaluated: int
    singular_subsets: int = 0

    def as_dict(self) -> dict:
        return {
            "minimizer": [float(x) for x in self.minimizer],
            "value": self.value,
            "winning_subset": list(self.winning_subset),
            "subsets_evaluated": self.subsets_evaluated,
            "singular_subsets": self.singular_subsets,
        }

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), sort_keys=True, indent=2)


def _subset_masks(n: int, start: int, stop: int) -> np.ndarray:
    codes = np.arange(start, stop, dtype=np.int64)
    return ((codes[:, None] >> np.arange(n)) & 1).astype(bool)


def _solve_ridge(A, b, free, gamma):
    """Batch of ``(A + gamma * diag(free)) u = b``; least-norm where singular."""
    mats = A[None, :, :] + gamma * np.einsum("ki,ij->kij", free.astype(float), np.eye(A.shape[0]))
    singular = 0
    try:
        sol = np.linalg.solve(mats, np.broadcast_to(b, free.shape)[..., None])[..., 0]
    except np.linalg.LinAlgError:
        sol = np.empty(free.shape)
        for k, M in enumerate(mats):
            try:
                sol[k] = np.linalg.solve(M, b)
            except np.linalg.LinAlgError:
                sol[k] = np.linalg.lstsq(M, b, rcond=None)[0]
                singular += 1
    return sol, singular


def _prox_batch(lam, free, p):
    out = lam.copy()
    if p == 1.0:
        low = np.sign(lam) * np.maximum(np.abs(lam) - 0.5, 0.0)
    else:
        low = np.asarray(f_p_inverse(lam, p))
    out[free] = low[free]
    return out


def _solve_proximal(A, b, free, p):
    """Minimize ``||T u - g||^2 + sum_{free} |u_i|^p`` for a batch of masks."""
    u = np.zeros(free.shape)
    active = np.arange(free.shape[0])
    for _ in range(INNER_MAX_ITERS):
        new = _prox_batch(u[active] @ A.T + b, free[active], p)
        step = np.abs(new - u[active]).max(axis=1)
        u[active] = new
        active = active[step > INNER_TOL]
        if active.size == 0:
            return u, 0
    return u, int(active.size)


def _subset_values(T, g, sol, free, spec):
    res = sol @ T.T - g
    pen = np.where(free, np.abs(sol) ** spec.p, 0.0).sum(axis=1)
    fixed = (~free).sum(axis=1)
    return (res * res).sum(axis=1) + spec.gamma * (pen + fixed * spec.r**spec.p)


def _better(v, s, best_v, best_s):
    if best_v is None:
        return True
    if abs(v - best_v) <= 1e-12 * max(1.0, abs(best_v)):
        return s < best_s
    return v < best_v


def global_min_enumerate(problem: Problem, p: float | None = None) -> OracleResult:
    """Exact global minimizer by enumerating the set ``S`` of saturated entries.

    Ties (relative 1e-12) go to the lexicographically smallest subset.
    """
    if problem.constrained is not None:
        raise ValueError("the oracle handles unconstrained problems only")
    spec = problem.spec
    if p is not None and p != spec.p:
        raise ValueError(f"p={p} does not match the problem spec p={spec.p}")
    n = problem.size
    limit = MAX_N_QUADRATIC if spec.p == 2.0 else MAX_N_PROXIMAL
    if spec.p not in (1.0, 1.5, 2.0):
        raise ValueError("enumeration supports p in {1, 1.5, 2}")
    if n > limit:
        raise ValueError(f"enumeration over 2^{n} subsets exceeds the limit N <= {limit}")

    T = dense_operator(problem)
    g = np.asarray(problem.model.data, dtype=float)
    A = T.T @ T
    b = T.T @ g
    total = 1 << n
    best_v = best_s = best_u = None
    singular = 0
    for start in range(0, total, CHUNK):
        sat = _subset_masks(n, start, min(total, start + CHUNK))
        free = ~sat
        if spec.p == 2.0:
            sol, bad = _solve_ridge(A, b, free, spec.gamma)
        else:
            sol, bad = _solve_proximal(np.eye(n) - A, b, free, spec.p)
        singular += bad
        vals = _subset_values(T, g, sol, free, spec)
        order = np.argsort(vals, kind="stable")
        lead = vals[order[0]]
        for k in order:
            if vals[k] > lead + 1e-12 * max(1.0, abs(lead)):
                break
            subset = tuple(np.flatnonzero(sat[k]).tolist())
            if _better(float(vals[k]), subset, best_v, best_s):
                best_v, best_s, best_u = float(vals[k]), subset, sol[k].copy()
    best_u.setflags(write=False)
    return OracleResult(best_u, best_v, best_s, total, singular)


def grid_search_min(problem: Problem, bound: float = 20.0, step: float = 1e-3,
                    coarse: float | None = None) -> tuple:
    """Grid minimum of the objective over ``[-bound, bound]^N`` for N <= 3.

    N = 1 is swept directly at ``step``. Otherwise a sweep at ``coarse``
    spacing (0.01 for N = 2, 0.1 for N = 3) is refined tenfold per level in
    a box of half-width two spacings around the running winner.
    Returns ``(value, point)``.
    """
    n = problem.size
    if n > 3:
        raise ValueError("grid search is limited to N <= 3")
    T = dense_operator(problem)
    g = np.asarray(problem.model.data, dtype=float)
    spec = problem.spec

    def values(pts):
        res = pts @ T.T - g
        pen = np.minimum(np.abs(pts) ** spec.p, spec.r**spec.p).sum(axis=1)
        return (res * res).sum(axis=1) + spec.gamma * pen

    def sweep(axes):
        best_v, best_x = math.inf, None
        rest = None
        if n > 1:
            rest = np.stack(np.meshgrid(*axes[1:], indexing="ij"), -1).reshape(-1, n - 1)
        per = max(1, 2**22 // (1 if rest is None else rest.shape[0]))
        for x0 in np.array_split(axes[0], max(1, axes[0].size // per)):
            if rest is None:
                pts = x0[:, None]
            else:
                pts = np.concatenate([np.repeat(x0, rest.shape[0])[:, None],
                                      np.tile(rest, (x0.size, 1))], axis=1)
            v = values(pts)
            k = int(np.argmin(v))
            if v[k] < best_v:
                best_v, best_x = float(v[k]), pts[k].copy()
        return best_v, best_x

    def axis(lo, hi, h):
        return np.arange(lo, hi + h / 2, h)

    if n == 1:
        return sweep([axis(-bound, bound, step)])
    h = coarse if coarse is not None else (1e-2 if n == 2 else 1e-1)
    best = sweep([axis(-bound, bound, h)] * n)
    while h > step * (1 + 1e-9):
        prev, h = h, max(step, h / 10)
        best = sweep([axis(c - 2 * prev, c + 2 * prev, h) for c in best[1]])
    return best


def check_global_is_fixed_point(problem: Problem, tol: float = 1e-6,
                                result: OracleResult | None = None) -> bool:
    result = result or global_min_enumerate(problem)
    return verify_fixed_point(result.minimizer, problem, tol).is_fixed_point


def check_isolated(problem: Problem, radius: float | None = None, trials: int = 1000,
                   margin: float = 1e-12, seed: int = 0,
                   result: OracleResult | None = None, min_fraction: float = 1e-3) -> bool:
    """Objective rises by at least ``margin`` at random points of the shell
    ``min_fraction * radius <= ||d|| <= radius``.

    Near the minimizer the rise is quadratic in ``||d||``, so a fixed margin
    can only be resolved away from the center.
    """
    if not 0 < min_fraction <= 1:
        raise ValueError("min_fraction must be in (0, 1]")
    result = result or global_min_enumerate(problem)
    if radius is None:
        radius = local_min_radius(problem.spec)
    u = np.asarray(result.minimizer, dtype=float)
    base = objective(u, problem)
    rng = np.random.default_rng(seed)
    for _ in range(trials):
        d = rng.standard_normal(u.size)
        d *= radius * rng.uniform(min_fraction, 1.0) / np.linalg.norm(d)
        if objective(u + d, problem) < base + margin:
            return False
    return True


@dataclass
class BasinMap:
    xs: np.ndarray
    ys: np.ndarray
    labels: np.ndarray
    equilibria: np.ndarray
    values: np.ndarray
    is_fixed_point: list
    partitions: list
    counts: list
    kernel: np.ndarray | None = None
    families: list = field(default_factory=list)
    unconverged: int = 0

    @property
    def grid(self) -> np.ndarray:
        """Initial points, shape ``(res_y, res_x, 2)``."""
        gx, gy = np.meshgrid(self.xs, self.ys)
        return np.stack([gx, gy], axis=-1)

    @property
    def best(self) -> int:
        return int(np.argmin(self.values)) if len(self.values) else -1

    def family_report(self, tol: float = 1e-4) -> dict:
        """Collinearity of equilibria sharing a partition, along ``ker T``.

        Only meaningful for rank-deficient ``T``; ``best_isolated`` says that
        the best equilibrium is the only one with its partition.
        """
        if self.kernel is None:
            return {"rank_deficient": False}
        perp = np.array([-self.kernel[1], self.kernel[0]])
        spreads = []
        for members in self.families:
            pts = self.equilibria[members]
            spreads.append(float(np.abs((pts - pts[0]) @ perp).max()))
        best = self.best
        best_family = next((m for m in self.families if best in m), [best])
        return {
            "rank_deficient": True,
            "families": len(self.families),
            "family_sizes": [len(m) for m in self.families],
            "max_spread": max(spreads) if spreads else 0.0,
            "collinear": all(s <= tol for s in spreads),
            "best_isolated": len(best_family) == 1,
        }

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["x", "y", "label"])
            for j, y in enumerate(self.ys):
                for i, x in enumerate(self.xs):
                    writer.writerow([repr(float(x)), repr(float(y)), int(self.labels[j, i])])

    def equilibria_list(self) -> list:
        return [
            {
                "index": k,
                "point": [float(v) for v in self.equilibria[k]],
                "value": float(self.values[k]),
                "large": list(self.partitions[k]),
                "is_fixed_point": bool(self.is_fixed_point[k]),
                "basin_size": int(self.counts[k]),
            }
            for k in range(len(self.equilibria))
        ]

    def to_json(self) -> str:
        return json.dumps({"equilibria": self.equilibria_list(),
                           "families": self.family_report(),
                           "unconverged": self.unconverged},
                          sort_keys=True, indent=2)


def iterate_batch(A, b, spec, starts, max_iters: int = 20_000, tol: float = 1e-10):
    """Run the thresholded map ``u <- H(A u + b)`` from many starts at once.

    ``A = I - T*T`` and ``b = T*g``. Uses the same stopping rule as
    ``iterate_unconstrained``; returns ``(limits, converged)``.
    """
    lam_jump = jump_location(spec)
    u = starts.copy()
    large = np.abs(u) > lam_jump
    stable = np.zeros(len(u), dtype=int)
    done = np.zeros(len(u), dtype=bool)
    active = np.arange(len(u))
    for _ in range(max_iters):
        if active.size == 0:
            break
        cur = u[active]
        new = threshold(cur @ A.T + b, spec)
        step = np.sqrt(((new - cur) ** 2).sum(axis=1))
        new_large = np.abs(new) > lam_jump
        same = (new_large == large[active]).all(axis=1)
        stable[active] = np.where(same, stable[active] + 1, 0)
        large[active] = new_large
        u[active] = new
        fin = (step == 0.0) | ((step <= tol) & (stable[active] >= STABLE_ITERS))
        done[active[fin]] = True
        active = active[~fin]
    return u, done


def _leader_labels(points, tol):
    """Greedy clustering: each unassigned point in order becomes a leader and
    absorbs the unassigned points within ``tol`` of it (no chaining)."""
    near = cKDTree(points).query_ball_point(points, tol, p=np.inf)
    labels = np.full(len(points), -1, dtype=int)
    for i in range(len(points)):
        if labels[i] < 0:
            idx = np.asarray(near[i], dtype=int)
            labels[idx[labels[idx] < 0]] = i
    return labels


def basin_map(T, g, spec: ThresholdSpec, rect=(-3.0, 3.0, -3.0, 3.0), res: int = 400,
              max_iters: int = 20_000, tol: float = 1e-10, dedupe_tol: float = 1e-6,
              fp_tol: float = 1e-6) -> BasinMap:
    """Label every start of a ``res x res`` grid by the equilibrium it reaches.

    Equilibria are numbered in raster order of first appearance; cells that
    do not converge get label -1.
    """
    T = np.array(T, dtype=float)
    g = np.array(g, dtype=float).ravel()
    if T.shape != (2, 2) or g.size != 2:
        raise ValueError("basin maps need a 2x2 matrix and a 2-vector")
    problem = Problem(matrix_model(T, g), spec)
    x0, x1, y0, y1 = map(float, rect)
    if not (x1 > x0 and y1 > y0) or res < 1:
        raise ValueError("invalid rectangle or resolution")
    xs = np.linspace(x0, x1, res)
    ys = np.linspace(y0, y1, res)
    gx, gy = np.meshgrid(xs, ys)
    starts = np.stack([gx.ravel(), gy.ravel()], axis=1)

    A = np.eye(2) - T.T @ T
    b = T.T @ g
    chunks = np.array_split(np.arange(len(starts)), max(1, min(thread_count(), len(starts))))
    with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
        parts = list(pool.map(
            lambda idx: iterate_batch(A, b, spec, starts[idx], max_iters, tol), chunks))
    limits = np.concatenate([p[0] for p in parts])
    done = np.concatenate([p[1] for p in parts])

    labels = np.full(len(starts), -1, dtype=int)
    conv = np.flatnonzero(done)
    if conv.size:
        # exact duplicates first, then merge near-duplicates
        uniq, first_pos, inverse = np.unique(np.round(limits[conv], 9), axis=0,
                                             return_index=True, return_inverse=True)
        inverse = inverse.ravel()
        # leaders are taken in raster order of first appearance
        by_first = np.argsort(first_pos, kind="stable")
        rank = np.empty_like(by_first)
        rank[by_first] = np.arange(len(by_first))
        reps = conv[first_pos[by_first]]
        roots = _leader_labels(limits[reps], dedupe_tol)
        cls = roots[rank[inverse]]
        order = {}
        for c in cls:
            if c not in order:
                order[c] = len(order)
        labels[conv] = [order[c] for c in cls]

    n_eq = int(labels.max()) + 1 if conv.size else 0
    first = np.array([np.flatnonzero(labels == k)[0] for k in range(n_eq)], dtype=int)
    equilibria = limits[first] if n_eq else np.empty((0, 2))
    values = np.array([objective(e, problem) for e in equilibria])
    reports = [verify_fixed_point(e, problem, fp_tol) for e in equilibria]
    counts = np.bincount(labels[labels >= 0], minlength=n_eq).tolist()

    kernel = None
    families = []
    sv = np.linalg.svd(T, compute_uv=False)
    if sv[-1] <= 1e-12 * max(1.0, sv[0]):
        kernel = np.linalg.svd(T)[2][-1]
        groups = {}
        for k, rep in enumerate(reports):
            groups.setdefault(rep.large_indices, []).append(k)
        families = [m for m in groups.values() if len(m) > 1]

    return BasinMap(xs, ys, labels.reshape(res, res), equilibria, values,
                    [r.is_fixed_point for r in reports], [r.large_indices for r in reports],
                    counts, kernel, families, int((~done).sum()))
