"""Desk-scale invariant suite behind ``freedisc --cmd selftest``.

Every check is a pure function of the seed; verdict lines contain no
timings so reports are reproducible byte for byte.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import operators
from .oracle import basin_map, check_isolated, global_min_enumerate
from .solver import (
    IterationConfig,
    Problem,
    iterate_projected,
    iterate_unconstrained,
    objective,
    verify_fixed_point,
    verify_local_min,
)
from .synthetic import random_instance
from .thresholding import ThresholdSpec, f_p_inverse, jump_location, threshold

__all__ = ["Check", "run_selftest", "format_checks"]


@dataclass(frozen=True)
class Check:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {self.detail}"


def _e(x) -> str:
    return f"{x:.3e}"


def check_threshold_anchors(rng) -> Check:
    errs = [
        abs(threshold(1.0, ThresholdSpec(2, 1)) - 0.5),
        abs(threshold(1.5, ThresholdSpec(2, 1)) - 1.5),
        abs(jump_location(ThresholdSpec(2, 1)) - math.sqrt(2)),
        abs(threshold(1.0, ThresholdSpec(1, 1)) - 0.5),
        abs(threshold(0.4, ThresholdSpec(1, 1))),
        abs(jump_location(ThresholdSpec(1, 1)) - 1.25),
        abs(jump_location(ThresholdSpec(1, 0.16)) - 0.4),
    ]
    lam = rng.uniform(-10, 10, 2000)
    for p in (1.5, 2.0):
        errs.append(float(np.abs(f_p_inverse(lam, p) - f_p_inverse(lam, p, method="newton")).max()))
    worst = max(errs)
    return Check("threshold_anchors", worst <= 1e-10, f"max error {_e(worst)}")


def check_threshold_argmin(rng, samples: int = 200) -> Check:
    bad = 0
    for _ in range(samples):
        p = float(rng.choice([1.0, 1.5, 2.0, rng.uniform(1.1, 3.0)]))
        r = float(rng.uniform(0.1, 3.0))
        lam = float(rng.uniform(-2 * r - 2, 2 * r + 2))
        spec = ThresholdSpec(p, r)
        t = np.arange(-abs(lam) - 1, abs(lam) + 1, 1e-4)
        vals = (t - lam) ** 2 + np.minimum(np.abs(t) ** p, r**p)
        k = int(np.argmin(vals))
        h = threshold(lam, spec)
        hv = (h - lam) ** 2 + min(abs(h) ** p, r**p)
        if abs(h - t[k]) > 2e-4 and hv > vals[k] + 1e-7:
            bad += 1
    return Check("threshold_argmin", bad == 0, f"{bad}/{samples} mismatches")


def check_gradient_1d(rng) -> Check:
    worst = 0.0
    for n in range(2, 65):
        op = operators.build_gradient_1d(n)
        ident = np.abs(op.dense_forward @ op.dense_pinv - np.eye(n - 1)).max()
        ref = np.abs(op.dense_pinv - np.linalg.pinv(op.dense_forward)).max()
        fro = abs((op.dense_pinv**2).sum() - (1 / 6 - 1 / (6 * n * n)))
        worst = max(worst, ident, ref, fro)
        if np.linalg.norm(op.dense_pinv, 2) > 1 / math.sqrt(6) + 1e-12:
            worst = math.inf
    return Check("gradient_1d", worst <= 1e-12, f"max deviation {_e(worst)}")


def check_gradient_2d(rng) -> Check:
    worst = 0.0
    for n in range(2, 7):
        op = operators.build_gradient_2d(n)
        z = rng.standard_normal(op.grad_size)
        worst = max(worst, np.abs(op.dense_pinv @ z - op.pinv(z)).max())
        u = rng.standard_normal(op.size)
        worst = max(worst, np.abs(operators.schwartz_residual(op.forward(u), op)).max() / n)
    op = operators.build_gradient_2d(16)
    a, b = rng.standard_normal((2, op.grad_size))
    pa = op.project(a)
    worst = max(worst, np.abs(op.project(pa) - pa).max(), abs(op.project(a) @ b - a @ op.project(b)))
    return Check("gradient_2d", worst <= 1e-10, f"max deviation {_e(worst)}")


def check_mean_value(rng) -> Check:
    worst = 0.0
    for _ in range(5):
        n = int(rng.integers(4, 12))
        op = operators.build_gradient_1d(n)
        K = rng.standard_normal((n + 2, n))
        g = rng.standard_normal(n + 2)
        z = rng.standard_normal(n - 1)
        model = operators.derivative_model(op, g, K)
        c = model.mean_value(z)
        base = K @ op.pinv(z)
        grid = np.linspace(c - 1, c + 1, 20001)
        vals = ((g[None, :] - base[None, :] - grid[:, None] * K.sum(axis=1)) ** 2).sum(axis=1)
        worst = max(worst, abs(grid[int(np.argmin(vals))] - c))
    return Check("mean_value", worst <= 1e-4, f"max offset error {_e(worst)}")


def _random_problem(rng, n, p):
    T, g = random_instance(rng, int(rng.integers(n, n + 4)), n, norm=float(rng.uniform(0.5, 0.95)))
    return Problem.from_matrix(T, g, ThresholdSpec(p, float(rng.uniform(0.3, 2.0))))


def check_descent(rng) -> Check:
    worst = 0.0
    for k in range(12):
        p = (1.0, 1.5, 2.0)[k % 3]
        pb = _random_problem(rng, int(rng.integers(2, 13)), p)
        tr = iterate_unconstrained(pb, rng.standard_normal(pb.size), max_iters=3000)
        obj = np.array(tr.objective)
        worst = max(worst, float(np.diff(obj).max(initial=-math.inf)))
        c = 1 - pb.model.norm_bound**2
        steps = np.array(tr.step_norms) ** 2
        excess = steps - (obj[:-1] - obj[1:]) / c
        worst = max(worst, float(excess.max()) - 1e-12 * max(1.0, obj[0]))
    return Check("descent", worst <= 1e-12, f"max violation {_e(worst)}")


def check_fixed_points(rng) -> Check:
    failures = 0
    runs = 0
    for k in range(9):
        p = (1.0, 1.5, 2.0)[k % 3]
        pb = _random_problem(rng, int(rng.integers(2, 9)), p)
        tr = iterate_unconstrained(pb, rng.standard_normal(pb.size), max_iters=20000)
        if not tr.converged:
            continue
        runs += 1
        rep = verify_fixed_point(tr.iterate, pb, 1e-6)
        if not rep.is_fixed_point or not verify_local_min(tr.iterate, pb, trials=200, seed=k):
            failures += 1
    return Check("fixed_points", failures == 0 and runs > 0, f"{failures} failures in {runs} converged runs")


def check_oracle(rng) -> Check:
    failures = 0
    gap = -math.inf
    for k in range(10):
        pb = _random_problem(rng, int(rng.integers(2, 7)), 2.0)
        res = global_min_enumerate(pb)
        if abs(res.value - objective(res.minimizer, pb)) > 1e-10:
            failures += 1
        if not verify_fixed_point(res.minimizer, pb, 1e-6).is_fixed_point:
            failures += 1
        if not check_isolated(pb, trials=200, seed=k, result=res):
            failures += 1
        for _ in range(5):
            tr = iterate_unconstrained(pb, rng.uniform(-3, 3, pb.size), max_iters=20000)
            gap = max(gap, res.value - tr.objective[-1])
    ok = failures == 0 and gap <= 1e-8
    return Check("oracle", ok, f"{failures} failures, max iterate advantage {_e(gap)}")


def check_scalar_anchor(rng) -> Check:
    pb = Problem.from_matrix([[0.5]], [4.0], ThresholdSpec(2, 1))
    res = global_min_enumerate(pb)
    tr = iterate_unconstrained(pb, [8.0])
    err = max(abs(res.value - 1.0), abs(res.minimizer[0] - 8.0), abs(tr.iterate[0] - 8.0))
    return Check("scalar_anchor", err <= 1e-12, f"max error {_e(err)}")


def check_contraction(rng) -> Check:
    worst = -math.inf
    for _ in range(3):
        d = rng.uniform(0.6, 0.9, 6)
        pb = Problem.from_matrix(np.diag(d), 3 * rng.standard_normal(6), ThresholdSpec(2, 1.0))
        cfg = IterationConfig(max_iters=400, tol=1e-300, record_iterates=True)
        tr = iterate_unconstrained(pb, rng.standard_normal(6), cfg)
        ref = tr.iterates[-1]
        start = tr.fixation_step
        e0 = np.linalg.norm(tr.iterates[start] - ref)
        for m in range(1, min(60, len(tr.iterates) - start)):
            e = np.linalg.norm(tr.iterates[start + m] - ref)
            worst = max(worst, e - (0.64**m * e0 + 1e-13))
    return Check("contraction", worst <= 0, f"max excess {_e(worst)}")


def check_basin(rng) -> Check:
    q, _ = np.linalg.qr(rng.standard_normal((2, 2)))
    T = q @ np.diag(rng.uniform(0.4, 0.95, 2))
    bm = basin_map(T, rng.standard_normal(2), ThresholdSpec(2, 1.0), res=30)
    ok = 0 < len(bm.equilibria) <= 9 and all(bm.is_fixed_point) and bm.unconverged == 0
    return Check("basin", ok, f"{len(bm.equilibria)} equilibria, {bm.unconverged} unconverged")


def check_projected(rng) -> Check:
    n = 12
    op = operators.build_gradient_2d(n)
    img = (np.arange(n)[None, :] >= n // 2) * 1.0 + 0.02 * rng.standard_normal((n, n))
    model = operators.derivative_model(op, img.ravel())
    pb = Problem(model, ThresholdSpec(2, 3.0, 0.01), constrained=op)
    tr = iterate_projected(pb, max_iters=500)
    worst = max(tr.q_norms)
    return Check("projected", worst <= 1e-10, f"max |Q u| {_e(worst)}")


CHECKS = [
    check_threshold_anchors,
    check_threshold_argmin,
    check_gradient_1d,
    check_gradient_2d,
    check_mean_value,
    check_descent,
    check_fixed_points,
    check_oracle,
    check_scalar_anchor,
    check_contraction,
    check_basin,
    check_projected,
]


def run_selftest(seed: int = 0) -> list:
    out = []
    for k, fn in enumerate(CHECKS):
        rng = np.random.default_rng([seed, k])
        try:
            out.append(fn(rng))
        except Exception as exc:  # a crash is a failed invariant, not a crash of the suite
            out.append(Check(fn.__name__.removeprefix("check_"), False,
                             f"raised {type(exc).__name__}: {exc}"))
    return out


def format_checks(checks) -> str:
    return "\n".join(c.line() for c in checks) + "\n"
