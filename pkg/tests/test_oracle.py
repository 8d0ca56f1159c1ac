import itertools
import json

import numpy as np
import pytest

from freedisc.oracle import (
    basin_map,
    check_global_is_fixed_point,
    check_isolated,
    global_min_enumerate,
    grid_search_min,
    iterate_batch,
    thread_count,
)
from freedisc.solver import Problem, iterate_unconstrained, objective
from freedisc.synthetic import random_instance
from freedisc.thresholding import ThresholdSpec


def _problem(seed, rows, cols, p=2.0, r=1.0, norm=0.9, scale=2.0):
    rng = np.random.default_rng(seed)
    T, g = random_instance(rng, rows, cols, norm=norm, data_scale=scale)
    return Problem.from_matrix(T, g, ThresholdSpec(p, r))


def test_scalar_anchor():
    pb = Problem.from_matrix([[0.5]], [4.0], ThresholdSpec(2, 1))
    res = global_min_enumerate(pb)
    assert res.value == pytest.approx(1.0, abs=1e-12)
    assert res.minimizer[0] == pytest.approx(8.0, abs=1e-12)
    assert res.winning_subset == (0,)
    assert res.subsets_evaluated == 2
    assert json.loads(res.to_json())["value"] == pytest.approx(1.0)
    v, x = grid_search_min(pb)
    assert v == pytest.approx(1.0, abs=1e-9)
    assert x[0] == pytest.approx(8.0, abs=1e-3)


def _brute_force_p2(pb):
    T = pb.model.dense
    g = pb.model.data
    n = pb.size
    gamma, r = pb.spec.gamma, pb.spec.r
    best = np.inf
    for sat in itertools.product([False, True], repeat=n):
        free = ~np.array(sat)
        A = T.T @ T + gamma * np.diag(free.astype(float))
        u = np.linalg.solve(A, T.T @ g)
        res = T @ u - g
        v = res @ res + gamma * ((u[free] ** 2).sum() + r * r * sum(sat))
        best = min(best, v)
    return best


@pytest.mark.parametrize("seed", range(5))
def test_enumeration_matches_brute_force(seed):
    pb = _problem(seed, 6, 5)
    res = global_min_enumerate(pb)
    assert res.value == pytest.approx(_brute_force_p2(pb), rel=1e-10)
    assert objective(res.minimizer, pb) == pytest.approx(res.value, rel=1e-10)
    assert check_global_is_fixed_point(pb, result=res)
    assert check_isolated(pb, trials=300, result=res)


@pytest.mark.parametrize("p", [1.0, 1.5, 2.0])
def test_enumeration_agrees_with_grid(p):
    for seed in range(3):
        pb = _problem(100 + seed, 2, 2, p=p, r=0.8, scale=1.0)
        res = global_min_enumerate(pb)
        assert np.abs(res.minimizer).max() < 19
        v, _ = grid_search_min(pb, bound=20)
        assert res.value <= v + 1e-9
        assert v - res.value <= 1e-4


@pytest.mark.parametrize("p", [1.0, 1.5, 2.0])
def test_iteration_never_beats_oracle(p):
    rng = np.random.default_rng(7)
    for seed in range(4):
        pb = _problem(200 + seed, 5, 4, p=p)
        res = global_min_enumerate(pb)
        for _ in range(5):
            tr = iterate_unconstrained(pb, rng.uniform(-3, 3, pb.size), max_iters=20000)
            assert tr.objective[-1] >= res.value - 1e-8


def test_oracle_limits():
    pb = _problem(0, 2, 2, p=2.7)
    with pytest.raises(ValueError):
        global_min_enumerate(pb)
    with pytest.raises(ValueError):
        global_min_enumerate(_problem(0, 2, 2), p=1.5)
    with pytest.raises(ValueError):
        global_min_enumerate(_problem(0, 14, 13, p=1.5))
    with pytest.raises(ValueError):
        grid_search_min(_problem(0, 5, 4))


def test_rank_deficient_reports_singular_subsets():
    T = np.array([[0.5, 0.5], [0.0, 0.0]])
    pb = Problem.from_matrix(T, [2.0, 0.0], ThresholdSpec(2, 1))
    res = global_min_enumerate(pb)
    assert res.singular_subsets >= 1
    assert objective(res.minimizer, pb) == pytest.approx(res.value, abs=1e-10)


def test_thread_count(monkeypatch):
    monkeypatch.setenv("FREEDISC_THREADS", "3")
    assert thread_count() == 3
    monkeypatch.setenv("FREEDISC_THREADS", "0")
    assert thread_count() >= 1


def test_iterate_batch_matches_single_runs():
    rng = np.random.default_rng(9)
    q, _ = np.linalg.qr(rng.standard_normal((2, 2)))
    T = q @ np.diag([0.9, 0.4])
    pb = Problem.from_matrix(T, 2 * rng.standard_normal(2), ThresholdSpec(2, 1.0))
    A = np.eye(2) - T.T @ T
    b = T.T @ pb.model.data
    starts = np.random.default_rng(0).uniform(-3, 3, (20, 2))
    limits, done = iterate_batch(A, b, pb.spec, starts)
    assert done.all()
    for s, lim in zip(starts, limits):
        tr = iterate_unconstrained(pb, s, max_iters=20000)
        assert np.abs(tr.iterate - lim).max() < 1e-8


def test_basin_invertible(tmp_path):
    rng = np.random.default_rng(11)
    q, _ = np.linalg.qr(rng.standard_normal((2, 2)))
    T = q @ np.diag([0.8, 0.5])
    bm = basin_map(T, rng.standard_normal(2) * 2, ThresholdSpec(2, 1.0), res=40)
    assert 1 <= len(bm.equilibria) <= 9
    assert all(bm.is_fixed_point)
    assert bm.unconverged == 0
    assert bm.labels.shape == (40, 40)
    assert sum(bm.counts) == 1600
    assert bm.family_report() == {"rank_deficient": False}
    bm.to_csv(tmp_path / "b.csv")
    assert (tmp_path / "b.csv").read_text().splitlines()[0] == "x,y,label"
    data = json.loads(bm.to_json())
    assert len(data["equilibria"]) == len(bm.equilibria)
    # raster order of first appearance
    first = [int(np.flatnonzero(bm.labels.ravel() == k)[0]) for k in range(len(bm.equilibria))]
    assert first == sorted(first)


def test_basin_rank_one():
    rng = np.random.default_rng(12)
    u = rng.standard_normal(2)
    v = rng.standard_normal(2)
    T = 0.8 * np.outer(u / np.linalg.norm(u), v / np.linalg.norm(v))
    bm = basin_map(T, rng.standard_normal(2) * 2, ThresholdSpec(2, 1.0), res=60)
    rep = bm.family_report()
    assert rep["rank_deficient"]
    assert rep["collinear"]
    assert rep["best_isolated"]


def test_basin_input_validation():
    with pytest.raises(ValueError):
        basin_map(np.eye(3) * 0.5, np.zeros(3), ThresholdSpec(2, 1))
    with pytest.raises(ValueError):
        basin_map(np.eye(2) * 0.5, np.zeros(2), ThresholdSpec(2, 1), rect=(1, 0, 0, 1))


def test_check_isolated_detects_flat_directions():
    # with T = 0 every saturated point has the same value, so u = 5 is a non-isolated minimizer
    from freedisc.oracle import OracleResult

    pb = Problem.from_matrix([[0.0]], [0.0], ThresholdSpec(2, 1))
    flat = OracleResult(np.array([5.0]), 1.0, (0,), 2, 0)
    assert not check_isolated(pb, result=flat, trials=50)
    assert check_isolated(pb, trials=50)
    with pytest.raises(ValueError):
        check_isolated(pb, result=flat, min_fraction=0.0)
