"""``freedisc`` command-line entry point.

Each command writes data files plus a JSON report into ``--output`` and
echoes the resolved configuration in the report. Exit codes: 0 ok, 1 usage,
2 input error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import math
import sys
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import synthetic
from .io import InputError, read_pgm, read_signal_csv, write_columns_csv, write_pgm
from .operators import DegenerateKernelError, build_gradient_1d, build_gradient_2d, derivative_model
from .oracle import basin_map
from .selftest import format_checks, run_selftest
from .solver import (
    IterationConfig,
    Problem,
    iterate_projected,
    iterate_soft,
    iterate_unconstrained,
    verify_fixed_point,
    verify_local_min,
    verify_projected,
)
from .thresholding import NumericalError, ThresholdSpec, jump_location

__all__ = ["RunConfig", "UsageError", "main", "build_parser", "resolve_config"]

EXIT_OK, EXIT_USAGE, EXIT_INPUT, EXIT_NUMERIC = 0, 1, 2, 3
MAX_IMAGE_SIDE = 128
FLAT_TOL = 1e-9

COMMANDS = ("denoise1d", "denoise2d", "interpolate1d", "inpaint2d", "compare", "basin", "selftest")

# parameter values of the reference experiments
DEFAULTS = {
    "denoise1d": dict(p=2.0, r=2.2, gamma=0.002, size=256, noise=0.02),
    "compare": dict(p=2.0, r=2.2, gamma=0.002, size=256, noise=0.02),
    "interpolate1d": dict(p=2.0, r=2.2, gamma=0.002, size=256, noise=0.0, mask_range=(100, 150)),
    "denoise2d": dict(p=2.0, r=5.0, gamma=0.005, size=80, noise=0.05),
    "inpaint2d": dict(p=2.0, r=8.0, gamma=1e-4, size=40, noise=0.0),
    "basin": dict(p=2.0, r=1.0, gamma=1.0, grid=(-3.0, 3.0, -3.0, 3.0, 400)),
    "selftest": dict(p=2.0, r=1.0, gamma=1.0),
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


@dataclass(frozen=True)
class RunConfig:
    command: str
    p: float
    r: float
    gamma: float
    input: str | None = None
    output: str | None = None
    mask: str | None = None
    mask_range: tuple | None = None
    seed: int = 0
    max_iters: int = 10_000
    tol: float = 1e-10
    grid: tuple | None = None
    size: int | None = None
    noise: float | None = None
    matrix: tuple | None = None
    data: tuple | None = None
    rank: int = 2
    init: str = "data"

    @property
    def spec(self) -> ThresholdSpec:
        return ThresholdSpec(self.p, self.r, self.gamma)

    def echo(self) -> dict:
        out = asdict(self)
        for key in ("mask_range", "grid", "matrix", "data"):
            if out[key] is not None:
                out[key] = [list(x) if isinstance(x, tuple) else x for x in out[key]]
        return out


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="freedisc", description="Free-discontinuity reconstruction by iterative thresholding.")
    ap.add_argument("--cmd", required=True, choices=COMMANDS)
    ap.add_argument("--p", type=float)
    ap.add_argument("--r", type=float)
    ap.add_argument("--gamma", type=float)
    ap.add_argument("--input", help="signal CSV (1D) or PGM image (2D); synthetic data if omitted")
    ap.add_argument("--output", help="output directory")
    ap.add_argument("--mask", help="PGM mask, nonzero pixels are to be inpainted")
    ap.add_argument("--mask-range", help="a:b, samples a..b-1 are unobserved")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--max-iters", type=int, default=10_000)
    ap.add_argument("--tol", type=float, default=1e-10)
    ap.add_argument("--grid", help="x0:x1:y0:y1:res for basin maps")
    ap.add_argument("--size", type=int, help="length or side of synthetic data")
    ap.add_argument("--noise", type=float, help="noise level of synthetic data")
    ap.add_argument("--matrix", help="basin matrix as 'a,b;c,d' (seeded random if omitted)")
    ap.add_argument("--data", help="basin data as 'x,y'")
    ap.add_argument("--rank", type=int, default=2, choices=(1, 2), help="rank of the random basin matrix")
    ap.add_argument("--init", default="data", choices=("data", "zero"),
                    help="2D start: projected gradient of the input image, or zero")
    return ap


def _floats(text: str, sep: str, count: int, what: str) -> tuple:
    parts = text.split(sep)
    if len(parts) != count:
        raise UsageError(f"{what} needs {count} '{sep}'-separated values")
    try:
        return tuple(float(x) for x in parts)
    except ValueError:
        raise UsageError(f"{what}: non-numeric value in {text!r}") from None


def resolve_config(argv=None) -> RunConfig:
    args = build_parser().parse_args(argv)
    d = DEFAULTS[args.cmd]
    grid = d.get("grid")
    if args.grid is not None:
        vals = _floats(args.grid, ":", 5, "--grid")
        if vals[4] != int(vals[4]) or vals[4] < 1:
            raise UsageError("--grid resolution must be a positive integer")
        grid = (*vals[:4], int(vals[4]))
    mask_range = d.get("mask_range")
    if args.mask_range is not None:
        a, b = _floats(args.mask_range, ":", 2, "--mask-range")
        if a != int(a) or b != int(b):
            raise UsageError("--mask-range bounds must be integers")
        mask_range = (int(a), int(b))
    matrix = None
    if args.matrix is not None:
        rows = args.matrix.split(";")
        if len(rows) != 2:
            raise UsageError("--matrix needs two ';'-separated rows")
        matrix = tuple(_floats(row, ",", 2, "--matrix") for row in rows)
    data = _floats(args.data, ",", 2, "--data") if args.data is not None else None
    if args.max_iters < 1 or not args.tol > 0:
        raise UsageError("--max-iters must be >= 1 and --tol > 0")
    if args.size is not None and args.size < 2:
        raise UsageError("--size must be >= 2")
    if args.noise is not None and not args.noise >= 0:
        raise UsageError("--noise must be >= 0")
    if args.cmd != "selftest" and args.output is None:
        raise UsageError(f"--output is required for {args.cmd}")
    cfg = RunConfig(
        command=args.cmd,
        p=args.p if args.p is not None else d["p"],
        r=args.r if args.r is not None else d["r"],
        gamma=args.gamma if args.gamma is not None else d["gamma"],
        input=args.input,
        output=args.output,
        mask=args.mask,
        mask_range=mask_range,
        seed=args.seed,
        max_iters=args.max_iters,
        tol=args.tol,
        grid=grid,
        size=args.size if args.size is not None else d.get("size"),
        noise=args.noise if args.noise is not None else d.get("noise"),
        matrix=matrix,
        data=data,
        rank=args.rank,
        init=args.init,
    )
    try:
        cfg.spec
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if cfg.command in ("denoise2d", "inpaint2d") and cfg.p != 2.0:
        raise UsageError("2D commands require p = 2")
    return cfg


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else None
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(_clean(payload), sort_keys=True, indent=2) + "\n")


def _outdir(cfg: RunConfig) -> Path:
    out = Path(cfg.output)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise InputError(f"cannot create output directory {out}: {exc.strerror}") from exc
    return out


def _iter_config(cfg: RunConfig) -> IterationConfig:
    return IterationConfig(max_iters=cfg.max_iters, tol=cfg.tol)


def _signal(cfg: RunConfig):
    if cfg.input is not None:
        return read_signal_csv(cfg.input), None, None
    noisy, clean, cuts = synthetic.piecewise_smooth_signal(cfg.size, noise=cfg.noise, seed=cfg.seed)
    return noisy, clean, cuts


def _flat_runs(z) -> int:
    """Number of maximal runs of (numerically) zero derivative entries."""
    flat = np.abs(np.asarray(z)) <= FLAT_TOL
    return int(np.count_nonzero(flat[1:] & ~flat[:-1]) + (1 if flat.size and flat[0] else 0))


def _solve_1d(cfg: RunConfig, g, observed=None):
    op = build_gradient_1d(g.size)
    model = derivative_model(op, g, observed)
    problem = Problem(model, cfg.spec)
    trace = iterate_unconstrained(problem, np.zeros(op.grad_size), _iter_config(cfg))
    return op, model, problem, trace


def _report_1d(cfg, problem, trace, truth, cuts):
    z = trace.iterate
    jumps = np.flatnonzero(np.abs(z) > jump_location(cfg.spec)).tolist()
    report = {
        "config": cfg.echo(),
        "trace": trace.summary(),
        "fixed_point": verify_fixed_point(z, problem).as_dict(),
        "local_min": verify_local_min(z, problem, trials=1000, seed=cfg.seed),
        "jumps": jumps,
    }
    if cuts is not None:
        report["true_jumps"] = list(cuts)
    return report, jumps


def cmd_denoise1d(cfg: RunConfig) -> int:
    g, truth, cuts = _signal(cfg)
    out = _outdir(cfg)
    op, model, problem, trace = _solve_1d(cfg, g)
    u = model.primal(trace.iterate)
    report, jumps = _report_1d(cfg, problem, trace, truth, cuts)
    if truth is not None:
        report["l2_error"] = float(np.linalg.norm(u - truth))
    flag = np.zeros(g.size, dtype=int)
    flag[jumps] = 1
    write_columns_csv(out / "denoise1d.csv", {"index": np.arange(g.size), "input": g,
                                               "output": u, "jump": flag})
    trace.to_csv(out / "trace.csv")
    _write_json(out / "denoise1d.json", report)
    return EXIT_OK


def cmd_compare(cfg: RunConfig) -> int:
    g, truth, cuts = _signal(cfg)
    out = _outdir(cfg)
    op, model, problem, trace = _solve_1d(cfg, g)
    soft = iterate_soft(problem, cfg.gamma, np.zeros(op.grad_size), _iter_config(cfg))
    ms, tv = model.primal(trace.iterate), model.primal(soft.iterate)
    report, jumps = _report_1d(cfg, problem, trace, truth, cuts)
    report["ms"] = {"jump_count": len(jumps), "flat_runs": _flat_runs(trace.iterate)}
    report["tv"] = {
        "trace": soft.summary(),
        "nonzero_derivatives": int(np.count_nonzero(soft.iterate)),
        "flat_runs": _flat_runs(soft.iterate),
    }
    if truth is not None:
        report["ms"]["l2_error"] = float(np.linalg.norm(ms - truth))
        report["tv"]["l2_error"] = float(np.linalg.norm(tv - truth))
    write_columns_csv(out / "compare.csv", {"index": np.arange(g.size), "input": g, "ms": ms, "tv": tv})
    _write_json(out / "compare.json", report)
    return EXIT_OK


def cmd_interpolate1d(cfg: RunConfig) -> int:
    if cfg.mask is not None:
        raise UsageError("interpolate1d takes --mask-range, not --mask")
    g, truth, cuts = _signal(cfg)
    a, b = cfg.mask_range
    if not 0 <= a <= b <= g.size:
        raise InputError(f"mask range {a}:{b} is not within a signal of length {g.size}")
    observed = np.ones(g.size, dtype=bool)
    observed[a:b] = False
    out = _outdir(cfg)
    op, model, problem, trace = _solve_1d(cfg, g, observed)
    u = model.primal(trace.iterate)
    report, jumps = _report_1d(cfg, problem, trace, truth, cuts)
    report["missing"] = [a, b]
    if truth is not None:
        report["l2_error"] = float(np.linalg.norm(u - truth))
    flag = np.zeros(g.size, dtype=int)
    flag[jumps] = 1
    write_columns_csv(out / "interpolate1d.csv", {"index": np.arange(g.size), "input": g,
                                                   "observed": observed, "output": u, "jump": flag})
    trace.to_csv(out / "trace.csv")
    _write_json(out / "interpolate1d.json", report)
    return EXIT_OK


def _image(cfg: RunConfig, synth):
    if cfg.input is not None:
        img = read_pgm(cfg.input)
    else:
        img = synth()
    if img.shape[0] != img.shape[1]:
        raise InputError(f"image must be square, got {img.shape[1]}x{img.shape[0]}")
    if img.shape[0] > MAX_IMAGE_SIDE:
        raise InputError(f"image side {img.shape[0]} exceeds {MAX_IMAGE_SIDE}")
    if img.shape[0] < 2:
        raise InputError("image side must be >= 2")
    return img


def _jump_image(op, large) -> np.ndarray:
    n = op.n
    marks = np.zeros(op.grad_size, dtype=bool)
    marks[list(large)] = True
    mx, my = op.split(marks.astype(float))
    img = np.zeros((n, n))
    img[:-1, :] = np.maximum(img[:-1, :], mx)
    img[:, :-1] = np.maximum(img[:, :-1], my)
    return img


def _solve_2d(cfg: RunConfig, img, mask=None):
    n = img.shape[0]
    op = build_gradient_2d(n)
    model = derivative_model(op, img.ravel(), None if mask is None else mask.ravel())
    problem = Problem(model, cfg.spec, constrained=op)
    u0 = np.zeros(op.grad_size) if cfg.init == "zero" else op.forward(img.ravel())
    trace = iterate_projected(problem, u0, _iter_config(cfg))
    rep = verify_projected(trace.iterate, problem)
    u = model.primal(trace.iterate).reshape(n, n)
    return op, problem, trace, rep, u


def _report_2d(cfg, trace, rep):
    return {
        "config": cfg.echo(),
        "trace": trace.summary(),
        "fixed_point": rep.as_dict(),
        "max_q_norm": max(trace.q_norms),
    }


def cmd_denoise2d(cfg: RunConfig) -> int:
    if cfg.mask is not None:
        raise UsageError("denoise2d does not take a mask")
    img = _image(cfg, lambda: synthetic.shapes_image(cfg.size, cfg.noise, cfg.seed)[0])
    out = _outdir(cfg)
    op, problem, trace, rep, u = _solve_2d(cfg, img)
    write_pgm(out / "input.pgm", img)
    write_pgm(out / "output.pgm", u)
    write_pgm(out / "jumps.pgm", _jump_image(op, rep.large_indices))
    trace.to_csv(out / "trace.csv")
    _write_json(out / "denoise2d.json", _report_2d(cfg, trace, rep))
    return EXIT_OK


def cmd_inpaint2d(cfg: RunConfig) -> int:
    if cfg.input is not None:
        img = _image(cfg, None)
        if cfg.mask is None:
            raise UsageError("inpaint2d with --input also needs --mask")
        hole = read_pgm(cfg.mask) > 0
        if hole.shape != img.shape:
            raise InputError("mask and image sizes differ")
    else:
        if cfg.mask is not None:
            raise UsageError("--mask requires --input")
        n = cfg.size
        hole = ~synthetic.square_hole_mask(n)
        img = synthetic.edge_image(n)
        if cfg.noise:
            img = img + cfg.noise * np.random.default_rng(cfg.seed).standard_normal(img.shape)
        # the occluded region is shown mid-gray
        img[hole] = 0.5
        img = _image(cfg, lambda: img)
    if hole.all():
        raise InputError("mask leaves no observed pixels")
    out = _outdir(cfg)
    op, problem, trace, rep, u = _solve_2d(cfg, img, ~hole)
    jumps = _jump_image(op, rep.large_indices)
    report = _report_2d(cfg, trace, rep)
    _, my = op.split(np.isin(np.arange(op.grad_size), rep.large_indices).astype(float))
    inside = my * hole[:, :-1] * hole[:, 1:]
    report["hole"] = {
        "pixels": int(hole.sum()),
        "vertical_edge_jumps": int(inside.sum()),
        "edge_columns": sorted({int(c) for c in np.flatnonzero(inside.any(axis=0))}),
    }
    write_pgm(out / "input.pgm", img)
    write_pgm(out / "output.pgm", u)
    write_pgm(out / "jumps.pgm", jumps)
    trace.to_csv(out / "trace.csv")
    _write_json(out / "inpaint2d.json", report)
    return EXIT_OK


def _basin_instance(cfg: RunConfig):
    rng = np.random.default_rng(cfg.seed)
    if cfg.matrix is not None:
        T = np.array(cfg.matrix)
    elif cfg.rank == 1:
        T = np.outer(rng.standard_normal(2), rng.standard_normal(2))
        T *= rng.uniform(0.5, 0.95) / np.linalg.norm(T, 2)
    else:
        q1, _ = np.linalg.qr(rng.standard_normal((2, 2)))
        q2, _ = np.linalg.qr(rng.standard_normal((2, 2)))
        T = q1 @ np.diag(rng.uniform(0.3, 0.95, 2)) @ q2
    g = np.array(cfg.data) if cfg.data is not None else 1.5 * rng.standard_normal(2)
    return T, g


def cmd_basin(cfg: RunConfig) -> int:
    T, g = _basin_instance(cfg)
    norm = float(np.linalg.norm(T, 2))
    if not norm < 1:
        raise InputError(f"||T|| = {norm:.6g} must be < 1")
    x0, x1, y0, y1, res = cfg.grid
    if not (x1 > x0 and y1 > y0):
        raise UsageError("--grid needs x0 < x1 and y0 < y1")
    out = _outdir(cfg)
    bm = basin_map(T, g, cfg.spec, (x0, x1, y0, y1), int(res), max_iters=cfg.max_iters, tol=cfg.tol)
    bm.to_csv(out / "basin.csv")
    (out / "equilibria.json").write_text(bm.to_json() + "\n")
    _write_json(out / "basin.json", {
        "config": cfg.echo(),
        "T": T.tolist(),
        "g": g.tolist(),
        "equilibria": len(bm.equilibria),
        "all_fixed_points": all(bm.is_fixed_point),
        "unconverged": bm.unconverged,
        "families": bm.family_report(),
    })
    return EXIT_OK


def cmd_selftest(cfg: RunConfig) -> int:
    checks = run_selftest(cfg.seed)
    text = format_checks(checks)
    sys.stdout.write(text)
    ok = all(c.passed for c in checks)
    if cfg.output is not None:
        out = _outdir(cfg)
        (out / "selftest.txt").write_text(text)
        _write_json(out / "selftest.json", {
            "config": cfg.echo(),
            "checks": [{"name": c.name, "passed": c.passed, "detail": c.detail} for c in checks],
            "passed": ok,
        })
    return EXIT_OK if ok else EXIT_NUMERIC


HANDLERS = {
    "denoise1d": cmd_denoise1d,
    "compare": cmd_compare,
    "interpolate1d": cmd_interpolate1d,
    "denoise2d": cmd_denoise2d,
    "inpaint2d": cmd_inpaint2d,
    "basin": cmd_basin,
    "selftest": cmd_selftest,
}


def main(argv=None) -> int:
    try:
        cfg = resolve_config(argv)
        return HANDLERS[cfg.command](cfg)
    except UsageError as exc:
        print(f"freedisc: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (InputError, DegenerateKernelError) as exc:
        print(f"freedisc: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (NumericalError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"freedisc: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
