from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import expit
from scipy.stats import norm

from fairthresh.analysis import (
    LOG_COLUMNS,
    CellSummary,
    RunLog,
    SettingResult,
    TradeoffCurve,
    TuningResult,
    aggregate_cells,
    aggregate_seeds,
    cumulative_violation,
    oracle_sweep,
    paired_bootstrap_ci,
    pd_tuning_select,
    steady_state_gap,
    stress_winner,
    stress_winrate,
    summarize_log,
    tail_mean,
    write_json,
)
from fairthresh.envs import MVESConfig, MVESEnv, frozen_env
from fairthresh.policy import ConstraintSpec, Observation

finite = st.floats(-1e3, 1e3, allow_nan=False)
SPEC = ConstraintSpec(0.05, True, 0.3, 0.9)


# ---------------------------------------------------------------- tail mean and violation


def test_tail_mean_examples():
    assert tail_mean([1, 2, 3, 4], 2) == 3.5
    assert tail_mean([7.0] * 9, 4) == 7.0
    assert tail_mean([1, 2, 3, 6], 4) == 3.0


def test_tail_mean_errors():
    with pytest.raises(ValueError):
        tail_mean([1, 2], 3)
    with pytest.raises(ValueError):
        tail_mean([1, 2], 0)


@given(st.lists(finite, min_size=1, max_size=50), st.data(), finite)
def test_tail_mean_shift_equivariant(x, data, c):
    k = data.draw(st.integers(1, len(x)))
    assert tail_mean(np.add(x, c), k) == pytest.approx(tail_mean(x, k) + c, abs=1e-9)


def test_cumulative_violation_examples():
    total, curve = cumulative_violation([[0.1], [-0.5], [0.2]])
    assert total == pytest.approx(0.3, abs=1e-12)
    assert curve == pytest.approx([0.1, 0.1, 0.3], abs=1e-12)
    assert cumulative_violation([[-1.0], [-0.1]])[0] == 0.0
    assert cumulative_violation([[0.1, 0.2]])[0] == pytest.approx(0.3, abs=1e-12)


@given(st.lists(st.lists(st.floats(-5, 5), min_size=3, max_size=3), min_size=1, max_size=40), st.permutations([0, 1, 2]))
def test_cumulative_violation_monotone_and_order_free(rows, perm):
    g = np.asarray(rows)
    total, curve = cumulative_violation(g)
    assert np.all(np.diff(curve) >= 0)
    assert cumulative_violation(g[:, perm])[0] == pytest.approx(total, abs=1e-9)


# ---------------------------------------------------------------- seed statistics


def test_aggregate_seeds_examples():
    s = aggregate_seeds([1, 3])
    assert s.mean == 2 and s.std == pytest.approx(2**0.5, abs=1e-12)
    assert aggregate_seeds([0.4] * 5).std == 0
    single = aggregate_seeds([5.0])
    assert single.mean == 5.0 and single.std is None and single.n == 1


def test_bootstrap_constant_difference():
    ci = paired_bootstrap_ci([1.0, 2.0, 3.0], [0.5, 1.5, 2.5])
    assert (ci.point, ci.lo, ci.hi) == pytest.approx((0.5, 0.5, 0.5), abs=1e-12)


def test_bootstrap_identical_samples():
    a = [0.1, 0.4, 0.2]
    ci = paired_bootstrap_ci(a, a)
    assert ci.point == 0 and ci.lo <= 0 <= ci.hi and not ci.excludes_zero()


def test_bootstrap_length_mismatch():
    with pytest.raises(ValueError):
        paired_bootstrap_ci([1, 2], [1, 2, 3])


def test_bootstrap_matches_high_resample_reference():
    rng = np.random.default_rng(3)
    a, b = rng.normal(1.0, 1.0, 10), rng.normal(0.0, 1.0, 10)
    ci = paired_bootstrap_ci(a, b)
    # reference: independent generator, 10^5 resamples
    d = a - b
    ref = np.random.default_rng(12345).choice(d, size=(100_000, d.size)).mean(axis=1)
    lo, hi = np.quantile(ref, [0.025, 0.975])
    sd = d.std() / np.sqrt(d.size)
    assert abs(ci.lo - lo) < 0.05 * sd * 4 and abs(ci.hi - hi) < 0.05 * sd * 4
    assert ci == paired_bootstrap_ci(a, b)


@settings(max_examples=40)
@given(st.lists(st.tuples(finite, finite), min_size=2, max_size=15))
def test_bootstrap_contains_point(pairs):
    a, b = zip(*pairs)
    ci = paired_bootstrap_ci(a, b, resamples=500)
    assert ci.lo <= ci.point <= ci.hi


# ---------------------------------------------------------------- oracle sweep


def _curve(reward, dp, acc, spec=SPEC):
    n = len(reward)
    z = np.zeros(n)
    feas = np.array([spec.is_feasible(d, a) for d, a in zip(dp, acc)])
    return TradeoffCurve(np.linspace(0, 1, n), np.asarray(reward, float), z, np.asarray(dp, float), z,
                         np.asarray(acc, float), z, feas, spec)


def test_single_feasible_point_is_oracle():
    c = _curve([0.9, 0.5, 0.8], [0.2, 0.01, 0.3], [0.5, 0.5, 0.5])
    assert c.oracle()["index"] == 1
    assert c.unconstrained_best_index() == 0


def test_no_feasible_point_flags_oracle():
    c = _curve([0.9], [0.2], [0.5])
    assert not c.has_oracle and c.oracle() is None
    assert steady_state_gap(c, [0.0]) is None


def test_curve_roundtrip():
    c = _curve([0.9, 0.5, 0.8], [0.2, 0.01, 0.03], [0.5, 0.5, 0.95])
    back = TradeoffCurve.from_dict(json.loads(json.dumps(c.to_dict())))
    assert back.rows() == c.rows()


def test_frozen_sweep_matches_gaussian_oracle():
    cfg = MVESConfig(constraints=ConstraintSpec(0.06))
    spec = cfg.constraints
    base = frozen_env(MVESEnv(cfg))
    thetas = [-1.0, 0.0, 1.0]
    curve = oracle_sweep(lambda: frozen_env(base), thetas, spec, horizon=600, burn_in=100, seeds=range(5))
    for i, th in enumerate(thetas):
        acc = [norm.sf(th - m) for m in cfg.base_means]
        assert abs(curve.accept_rate[i] - np.mean(acc)) <= 3 * curve.accept_rate_se[i] + 1e-3
    # feasibility flags agree with the ConstraintSpec on the curve's own estimates
    assert curve.feasible.tolist() == [spec.is_feasible(d, a) for d, a in zip(curve.dp_gap, curve.accept_rate)]


def test_sweep_rejects_short_horizon():
    with pytest.raises(ValueError):
        oracle_sweep(MVESEnv, [0.0], SPEC, horizon=10, burn_in=10)


def test_steady_state_gap_interpolates():
    c = _curve([0.2, 0.4, 0.6], [0.0, 0.0, 0.5], [0.5, 0.5, 0.5])
    # oracle is index 1 (reward 0.4); finals at theta 0 and 0.75 -> steady 0.2 and 0.5
    assert steady_state_gap(c, [0.0, 0.75]) == pytest.approx(0.4 - 0.35, abs=1e-12)


# ---------------------------------------------------------------- selection rules


def _tr(eta, mu, r, dp, v):
    return TuningResult(eta, mu, r, dp, 0.5, v)


def test_pd_tuning_single_feasible_wins():
    res = [_tr(0.01, 0.1, 0.9, 0.5, 1), _tr(0.03, 0.1, 0.1, 0.0, 50), _tr(0.1, 0.1, 0.8, 0.4, 2)]
    assert pd_tuning_select(res, SPEC) == (0.03, 0.1)


def test_pd_tuning_min_violation_when_none_feasible():
    res = [_tr(0.01, 0.1, 0.9, 0.5, 100), _tr(0.03, 0.4, 0.1, 0.5, 80), _tr(0.1, 1.0, 0.8, 0.4, 120)]
    assert pd_tuning_select(res, SPEC) == (0.03, 0.4)


def test_pd_tuning_feasible_max_reward():
    res = [_tr(0.01, 0.1, 0.3, 0.0, 1), _tr(0.03, 0.4, 0.4, 0.0, 9)]
    assert pd_tuning_select(res, SPEC) == (0.03, 0.4)


def _sr(name, r, dp, v, acc=0.5):
    return SettingResult(name, r, dp, acc, v)


def test_stress_eight_of_nine():
    win = [_sr("ofs", 0.5, 0.0, 1), _sr("primal_dual", 0.4, 0.0, 2)]
    lose = [_sr("ofs", 0.3, 0.0, 1), _sr("primal_dual", 0.4, 0.0, 2)]
    rates = stress_winrate([(SPEC, win)] * 8 + [(SPEC, lose)])
    assert round(rates["ofs"], 1) == 88.9 and round(rates["primal_dual"], 1) == 11.1


def test_stress_all_infeasible_min_violation():
    rs = [_sr("a", 0.9, 0.3, 30), _sr("b", 0.1, 0.3, 10), _sr("c", 0.5, 0.3, 20)]
    assert stress_winner(rs, SPEC) == "b"


def test_stress_single_algorithm():
    assert stress_winrate([(SPEC, [_sr("ofs", 0.1, 0.9, 9)])]) == {"ofs": 100.0}


def test_stress_service_window_counts_for_feasibility():
    rs = [_sr("a", 0.9, 0.0, 30, acc=0.95), _sr("b", 0.1, 0.0, 10, acc=0.5)]
    assert stress_winner(rs, SPEC) == "b"


@given(st.lists(st.lists(st.tuples(st.floats(0, 1), st.floats(0, 0.1), st.floats(0, 100)), min_size=3, max_size=3), min_size=1, max_size=12))
def test_stress_rates_sum_to_100(settings_):
    rows = [(SPEC, [_sr(n, r, d, v) for n, (r, d, v) in zip("abc", s)]) for s in settings_]
    rates = stress_winrate(rows)
    assert sum(rates.values()) == pytest.approx(100.0)
    assert set(rates) == {"a", "b", "c"}


# ---------------------------------------------------------------- run logs


def _obs(t, service=True, absent=False):
    spec = SPEC if service else ConstraintSpec(0.05)
    acc = 0.3 + 0.01 * t
    groups = (None, acc) if absent else (acc - 0.05, acc + 0.05)
    dp = 0.0 if absent else 0.1
    return Observation(expit(t) - 0.5, spec.residuals(dp, acc), dp, acc, groups)


def test_runlog_csv_roundtrip_and_schema():
    log = RunLog("ofs", 0, 3)
    for t in range(1, 6):
        log.append(t, 0.1 * t, _obs(t, absent=t == 3))
    text = log.to_csv()
    assert text.splitlines()[0] == ",".join(LOG_COLUMNS)
    back = RunLog.from_csv(text, "ofs", 0)
    assert back.to_csv() == text
    assert back.absent_group_rounds == 1
    assert back.acc0[2] is None


def test_runlog_without_service_keeps_columns():
    log = RunLog("ofs", 0, 1)
    log.append(1, 0.0, _obs(1, service=False))
    row = log.to_csv().splitlines()[1].split(",")
    assert len(row) == len(LOG_COLUMNS) and row[4] == "" and row[5] == ""


def test_runlog_requires_increasing_t():
    log = RunLog("ofs", 0, 3)
    log.append(1, 0.0, _obs(1))
    with pytest.raises(ValueError):
        log.append(1, 0.0, _obs(1))


def test_summaries_and_aggregation(tmp_path):
    cells = []
    for seed in range(3):
        log = RunLog("ofs", seed, 3)
        for t in range(1, 11):
            log.append(t, 0.0, _obs(t))
        cells.append(summarize_log(log, 4, 0.5))
    s = cells[0]
    assert s.tail_reward == pytest.approx(np.mean([expit(t) - 0.5 for t in range(7, 11)]))
    assert s.violation == pytest.approx(cumulative_violation(log.residual_matrix)[0])
    agg = aggregate_cells(cells, SPEC)
    assert agg.reward.std == 0 and agg.reward.n == 3
    row = agg.row("mves")
    assert row["task"] == "mves" and row["algorithm"] == "ofs"
    write_json(tmp_path / "x.json", {"a": np.float64(1.5), "b": np.arange(2), "c": s})
    assert json.loads((tmp_path / "x.json").read_text())["b"] == [0, 1]


def test_cell_tail_feasible():
    c = CellSummary("ofs", 0, 0.1, 0.01, 0.5, 0.0, 0.0, 0)
    assert c.tail_feasible(SPEC)
    assert not CellSummary("ofs", 0, 0.1, 0.01, 0.95, 0.0, 0.0, 0).tail_feasible(SPEC)
