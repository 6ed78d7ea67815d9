import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from krgen import bounds as B
from krgen.errors import DegenerateNoise, InsufficientSamples, InvalidInput, InvalidPartition
from krgen.matrixcore import SymMatrix

WORKED = np.array([[1.0, 0.9], [0.9, 1.0]])


def random_partition(rng, d):
    perm = rng.permutation(d)
    k = int(rng.integers(1, d + 1))
    cuts = np.sort(rng.choice(np.arange(1, d), size=k - 1, replace=False)) if k > 1 else []
    return [np.sort(b) for b in np.split(perm, cuts)]


def test_grad_stats_examples():
    s = B.grad_stats([[1.0, 0.0], [0.0, 1.0]], batch_size=2)
    assert np.allclose(s.cov.data, [[0.25, -0.25], [-0.25, 0.25]])
    assert s.scalar_var == pytest.approx(0.5) and s.max_sq_norm == 1.0
    z = B.grad_stats(np.ones((4, 3)))
    assert np.array_equal(z.cov.data, np.zeros((3, 3))) and z.scalar_var == 0.0
    with pytest.raises(InsufficientSamples):
        B.grad_stats([[1.0, 2.0]])


def test_grad_stats_invariants_and_running_L():
    rng = np.random.default_rng(0)
    L = 0.0
    for t in range(20):
        g = rng.standard_normal((8, 5)) * rng.uniform(0.1, 3)
        s = B.grad_stats(g, prev_L=L, step=t)
        assert s.max_sq_norm >= L
        assert abs(s.scalar_var - s.cov.trace()) <= 1e-9 * max(1.0, s.scalar_var)
        assert s.max_sq_norm >= float(s.mean_grad @ s.mean_grad) - 1e-12
        assert np.allclose(s.factor.T @ s.factor, s.cov.data)
        L = s.max_sq_norm


def test_theta_examples():
    assert B.theta_c(np.zeros((3, 3)), 1.0, 1.0) == 0.0
    # 0.5 * log(4 - 0.81); often quoted as 0.579961, the exact value is 0.5800105
    assert B.theta_c(WORKED, 1.0, 1.0) == pytest.approx(0.5 * math.log(3.19), rel=1e-14)
    assert B.theta_c(WORKED, 1.0, 1.0) == pytest.approx(0.579961, abs=1e-4)
    lam = np.array([0.3, 2.0, 5.0])
    assert B.theta_c(np.diag(lam), 0.5, 0.1) == pytest.approx(0.5 * np.sum(np.log1p(2.5 * lam)), rel=1e-13)
    assert B.theta_v(0.0, 1.0, 1.0, 4) == 0.0
    assert B.theta_v(2.0, 1.0, 1.0, 2) == pytest.approx(math.log(2), abs=1e-12)
    assert B.theta_v(2.0, 1.0, 1.0, 2) >= B.theta_c(WORKED, 1.0, 1.0)
    with pytest.raises(DegenerateNoise):
        B.theta_c(WORKED, 1.0, 0.0)
    with pytest.raises(DegenerateNoise):
        B.theta_v(1.0, 1.0, 0.0, 2)


@settings(max_examples=200, deadline=None, derandomize=True)
@given(st.floats(0, 1e6), st.floats(1e-4, 10), st.floats(1e-6, 10))
def test_theta_v_d1_matches_theta_c(v, eta, s2):
    assert B.theta_v(v, eta, s2, 1) == B.theta_c(SymMatrix([[v]]), eta, s2)


def test_partitioned_examples():
    assert B.theta_c_partitioned(WORKED, [[0, 1]], 1.0, 1.0) == B.theta_c(WORKED, 1.0, 1.0)
    assert B.theta_c_partitioned(WORKED, [[0], [1]], 1.0, 1.0) == pytest.approx(math.log(2), abs=1e-12)
    c = np.diag([1.0, 4.0, 9.0])
    assert B.theta_c_partitioned(c, [[0], [1], [2]], 1.0, 2.0) == pytest.approx(
        0.5 * sum(math.log1p(v / 2.0) for v in (1, 4, 9))
    )
    for bad in ([[0]], [[0, 1], [1]], [[0, 2]], [[], [0, 1]]):
        with pytest.raises(InvalidPartition):
            B.theta_c_partitioned(WORKED, bad, 1.0, 1.0)


def test_theta_chain_random():
    rng = np.random.default_rng(1)
    for _ in range(500):
        d = int(rng.integers(1, 17))
        a = rng.standard_normal((d, int(rng.integers(1, 2 * d + 1))))
        v = a @ a.T * 10 ** rng.uniform(-3, 2)
        c = rng.uniform(1e-6, 1e3)
        eta, s2 = math.sqrt(c), 1.0
        part = random_partition(rng, d)
        L = np.trace(v) * (1 + rng.exponential())
        chain = [
            B.theta_c(v, eta, s2),
            B.theta_c_partitioned(v, part, eta, s2),
            B.theta_v(np.trace(v), eta, s2, d),
            B.theta_v(L, eta, s2, d),
        ]
        for lo, hi in zip(chain, chain[1:]):
            assert lo <= hi + 1e-9


def test_refinement_monotone():
    rng = np.random.default_rng(2)
    for _ in range(100):
        d = int(rng.integers(2, 13))
        a = rng.standard_normal((d, d))
        v = a @ a.T
        coarse = random_partition(rng, d)
        fine = [np.sort(blk[sub]) for blk in coarse for sub in random_partition(rng, blk.size)]
        assert B.theta_c_partitioned(v, coarse, 0.7, 0.3) <= B.theta_c_partitioned(v, fine, 0.7, 0.3) + 1e-9


def test_info_bound_examples():
    stats = [B.GradientStats(1, np.zeros(2), SymMatrix(np.zeros((2, 2))), 0.0, 0.0)]
    for mode in B.MODES:
        assert B.sgld_info_bound(stats, 1.0, 1.0, mode, partition=[[0], [1]]) == 0.0
    s = B.GradientStats(1, np.zeros(2), SymMatrix(WORKED), 2.0, 4.0)
    assert B.sgld_info_bound([s], 1.0, 1.0, "thm2_cov") == pytest.approx(0.5 * math.log(3.19), rel=1e-14)
    assert B.sgld_info_bound([s], 1.0, 1.0, "lemma1_L") == pytest.approx(math.log(3), abs=1e-12)
    assert B.sgld_info_bound([s], 1.0, 1.0, "lemma2_var") == 1.0
    info, h = B.sgd_info_bound([s], 1.0, 1.0, 0.0, "thm2_cov")
    assert info == B.sgld_info_bound([s], 1.0, 1.0, "thm2_cov") and h == 0.0
    with pytest.raises(InvalidInput):
        B.sgld_info_bound([s], 1.0, 1.0, "nope")
    with pytest.raises(InvalidInput):
        B.sgld_info_bound([s], 1.0, 1.0, "thm2_partitioned")
    with pytest.raises(InvalidInput):
        B.sgld_info_bound([], 1.0, 1.0, "thm2_cov")


def test_mode_chain_and_cumulative_monotone():
    rng = np.random.default_rng(3)
    stats, L = [], 0.0
    for t in range(30):
        s = B.grad_stats(rng.standard_normal((6, 8)), prev_L=L, step=t)
        L = s.max_sq_norm
        stats.append(s)
    part = [np.arange(4), np.arange(4, 8)]
    vals = {m: B.sgld_info_bound(stats, 0.3, 0.01, m, part) for m in B.MODES}
    assert vals["thm2_cov"] <= vals["thm2_partitioned"] + 1e-9
    assert vals["thm2_partitioned"] <= vals["theta_v_var"] + 1e-9
    assert vals["theta_v_var"] <= vals["lemma1_L"] + 1e-9
    cum = np.cumsum([B.step_term(s, 0.3, 0.01, "thm2_cov") for s in stats])
    assert np.all(np.diff(cum) >= 0)


def test_factor_route_matches_dense():
    rng = np.random.default_rng(4)
    stats = [B.grad_stats(rng.standard_normal((5, 12))) for _ in range(4)]
    acc = B.average_stats(stats, include_between=True)
    f = B.StepAccumulator()
    for s in stats:
        f.add(B.GradientStats(s.step, s.mean_grad, None, s.scalar_var, s.max_sq_norm, s.factor))
    fr = f.result(include_between=True)
    assert fr.cov is None
    assert np.allclose(fr.factor.T @ fr.factor, acc.cov.data)
    part = [np.arange(6), np.arange(6, 12)]
    for mode in ("thm2_cov", "thm2_partitioned", "theta_v_var"):
        assert B.step_term(fr, 0.5, 0.1, mode, part) == pytest.approx(B.step_term(acc, 0.5, 0.1, mode, part), rel=1e-10)


def test_between_run_term():
    rng = np.random.default_rng(5)
    stats = [B.grad_stats(rng.standard_normal((4, 3)) + k) for k in range(3)]
    within = B.average_stats(stats)
    total = B.average_stats(stats, include_between=True)
    means = np.array([s.mean_grad for s in stats])
    assert np.allclose(total.cov.data - within.cov.data, np.cov(means.T))
    assert np.allclose(within.cov.data, sum(s.cov.data for s in stats) / 3)


def test_hessian_term():
    assert B.sgd_hessian_term(500, 1e-3, 0.0) == 0.0
    assert B.sgd_hessian_term(500, 1e-3, 4.0) == pytest.approx(1.0)


def test_subgaussian_R():
    assert B.subgaussian_R([0.2, 1.0, 0.6]) == pytest.approx(0.4)
    assert B.subgaussian_R([0.3, 0.3]) == 0.0
    with pytest.raises(InvalidInput):
        B.subgaussian_R([])


def test_thm1_bounds():
    mean, sq = B.thm1_bounds(2.0, 0.5, 100)
    assert mean == pytest.approx(0.1, abs=1e-15)
    assert sq == pytest.approx(0.030986, abs=1e-6)
    m0, s0 = B.thm1_bounds(0.0, 0.5, 100)
    assert m0 == 0.0 and s0 == pytest.approx(math.log(3) / 100)
    assert B.thm1_bounds(-0.3, 0.5, 100) == (m0, s0)


def test_report_csv_json_roundtrip():
    rep = B.BoundReport(meta={"task": "synthetic", "effective_runs": 3})
    rng = np.random.default_rng(6)
    for e in range(1, 4):
        rep.add_row(epoch=e, step=10 * e, **{c: float(rng.standard_normal()) for c in B.REPORT_COLUMNS[2:-3]})
    csv_text = rep.to_csv()
    assert csv_text.splitlines()[0] == ",".join(B.REPORT_COLUMNS)
    back = B.BoundReport.from_csv(csv_text)
    assert back.to_csv() == csv_text
    for c in B.REPORT_COLUMNS:
        assert np.array_equal(back.column(c), rep.column(c), equal_nan=True)
    j = B.BoundReport.from_json(rep.to_json())
    assert j.meta == rep.meta and j.to_csv() == csv_text
    empty = B.BoundReport()
    assert empty.to_csv() == ",".join(B.REPORT_COLUMNS) + "\n"
