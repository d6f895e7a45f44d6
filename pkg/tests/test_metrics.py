import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from arrowlab.metrics import (BaselineSet, DegenerateBaselineError, EvalLog, MissingCheckpointError,
                              NormalizedMatrix, acc, active_task, forgetting, forward_transfer,
                              min_acc, normalize, run_metrics, sample_efficiency, summarize,
                              two_cycle_metrics, wc_acc, wc_acc_curve)

import oracles


def nm_from(q, N, interval):
    T = len(q)
    frames = np.arange(0, T * N + 1, interval)
    return NormalizedMatrix(frames, np.asarray(q, dtype=float), N)


def test_normalize_hand_example():
    log = EvalLog([0, 10], [[5.0, 9.0]], 10)
    base = BaselineSet([0, 10], [[1.0, 9.0]])
    nm = normalize(log, base)
    assert nm.q[0, 0] == pytest.approx(0.5)
    assert nm.q[0, 1] == pytest.approx(1.0)


def test_normalize_random_level_maps_to_zero():
    log = EvalLog([0, 5, 10], [[2.0, 2.0, 7.0]], 10)
    base = BaselineSet([0, 5, 10], [[2.0, 4.0, 7.0]])
    assert normalize(log, base).q[0].tolist() == [0.0, 0.0, 1.0]


def test_flat_baseline_is_degenerate_and_names_task():
    log = EvalLog([0, 10], [[1.0, 2.0]], 10, task_names=["maze-x"])
    base = BaselineSet([0, 10], [[3.0, 3.0 + 1e-12]])
    with pytest.raises(DegenerateBaselineError, match="maze-x"):
        normalize(log, base)


def test_missing_boundary_checkpoint():
    nm = NormalizedMatrix(np.array([0, 5, 15, 20]), np.ones((2, 4)), 10)
    with pytest.raises(MissingCheckpointError):
        forgetting(nm)


@given(a=st.floats(0.1, 10), b=st.floats(-5, 5), seed=st.integers(0, 1000))
def test_normalize_affine_invariant(a, b, seed):
    rng = np.random.default_rng(seed)
    frames = np.arange(0, 21, 5)
    p = rng.normal(size=(2, frames.size))
    st_curve = rng.normal(size=(2, frames.size))
    st_curve[:, -1] = st_curve[:, 0] + 1.0 + rng.random(2)
    q1 = normalize(EvalLog(frames, p, 10), BaselineSet(frames, st_curve)).q
    q2 = normalize(EvalLog(frames, a * p + b, 10), BaselineSet(frames, a * st_curve + b)).q
    np.testing.assert_allclose(q1, q2, atol=1e-9)


def test_forgetting_examples():
    N = 10
    flat = nm_from(np.full((3, 7), 0.7), N, 5)
    assert forgetting(flat) == 0.0
    q = np.zeros((2, 5))  # frames 0,5,10,15,20
    q[0] = [0, 0.5, 1.0, 0.7, 0.4]
    q[1] = [0, 0, 0, 0.5, 0.9]
    assert forgetting(nm_from(q, N, 5)) == pytest.approx(0.3)
    q[0, 4] = 1.2
    assert forgetting(nm_from(q, N, 5)) < 0


def test_forward_transfer_examples():
    N = 10
    frames = np.arange(0, 21, 5)
    nm_st = NormalizedMatrix(np.arange(0, 11, 5), np.array([[0, 0.4, 0.4], [0, 0.4, 0.4]]), N)
    q = np.array([[0, 0.6, 0.6, 0, 0], [0, 0, 0, 0.6, 0.6]])
    assert forward_transfer(NormalizedMatrix(frames, q, N), nm_st).ft == pytest.approx(0.5)
    zero = NormalizedMatrix(frames, np.zeros((2, 5)), N)
    assert forward_transfer(zero, nm_st).ft == pytest.approx(-1.0)


def test_forward_transfer_zero_baseline_warns_and_excludes():
    N = 10
    nm_st = NormalizedMatrix(np.arange(0, 11, 5), np.array([[0, 0.0, 0.0], [0, 0.5, 0.5]]), N)
    q = np.array([[0, 0.6, 0.6, 0, 0], [0, 0, 0, 1.0, 1.0]])
    with pytest.warns(UserWarning, match="undefined"):
        ft = forward_transfer(NormalizedMatrix(np.arange(0, 21, 5), q, N), nm_st)
    assert ft.per_task[0] is None
    assert ft.ft == pytest.approx(1.0)


def test_min_acc_dip_then_recover():
    N = 10
    q = np.array([[0, 0.5, 1.0, 0.2, 0.8], [0, 0, 0, 0.5, 1.0]])
    nm = nm_from(q, N, 5)
    assert min_acc(nm, 2) == pytest.approx(0.2)
    assert acc(nm, 2) == pytest.approx(0.9)
    assert min_acc(nm, 1) is None


def test_all_ones_gives_unit_accuracies():
    nm = nm_from(np.ones((3, 7)), 10, 5)
    assert acc(nm, 3) == min_acc(nm, 3) == wc_acc(nm, 30) == 1.0


def test_wc_acc_first_task_is_current_score():
    q = np.random.default_rng(0).random((3, 7))
    nm = nm_from(q, 10, 5)
    for n in (0, 5, 10):
        assert wc_acc(nm, n) == nm.at(0, n)


def test_active_task_boundaries():
    assert [active_task(n, 10, 3) for n in (0, 1, 10, 11, 20, 21, 30)] == [1, 1, 1, 2, 2, 3, 3]


@given(seed=st.integers(0, 10_000), T=st.integers(2, 4))
@settings(max_examples=30)
def test_wc_acc_boundary_identity(seed, T):
    rng = np.random.default_rng(seed)
    N = 4
    nm = nm_from(rng.normal(size=(T, T * 2 + 1)), N, 2)
    for k in range(2, T + 1):
        want = nm.at(k - 1, k * N) / k + (1 - 1 / k) * min_acc(nm, k)
        assert wc_acc(nm, k * N) == pytest.approx(want, abs=1e-12)


@given(seed=st.integers(0, 10_000), T=st.integers(2, 4))
@settings(max_examples=30)
def test_min_acc_not_above_acc_of_previous_tasks(seed, T):
    rng = np.random.default_rng(seed)
    N = 6
    nm = nm_from(rng.random((T, 3 * T + 1)), N, 2)
    for k in range(2, T + 1):
        prev = np.mean([nm.at(i, k * N) for i in range(k - 1)])
        assert min_acc(nm, k) <= prev + 1e-12


def test_two_cycle_examples():
    T, N = 2, 10  # exposures of 5; boundaries 5, 10, 15, 20
    frames = np.arange(0, 21)
    q = np.zeros((2, 21))
    q[0, 5:] = 0.8
    q[0, 9] = 0.9  # last checkpoint before task 1 returns at frame 10
    q[1, 10:] = 0.5
    tc = two_cycle_metrics(NormalizedMatrix(frames, q, N))
    assert tc.t1 == [5, 10] and tc.t2 == [10, 15] and tc.t3 == [15, 20]
    assert tc.max_f[0] == pytest.approx(-0.1)
    assert tc.recovery[0] == pytest.approx(1.0)
    assert tc.max_f[1] == pytest.approx(0.0)


def test_two_cycle_recovery_undefined_at_zero():
    frames = np.arange(0, 21, 5)
    q = np.array([[0, 0.0, 0.3, 0.5, 0.5], [0, 0, 0.5, 0.5, 0.5]])
    assert two_cycle_metrics(NormalizedMatrix(frames, q, 10)).recovery[0] is None


def test_sample_efficiency_examples():
    frames = [0, 10, 20]
    se = sample_efficiency(frames, {"a": np.full((3, 3), 0.5), "b": np.ones((3, 3))})
    assert se.p_star == 1.0
    assert se.frame == {"a": None, "b": 0}
    assert se.runs_reaching == {"a": 0, "b": 3}


def test_summarize():
    assert summarize([2.0]) == {"median": 2.0, "q25": 2.0, "q75": 2.0, "n": 1}
    assert summarize([None, None])["median"] is None
    s = summarize([1, 2, 3, 4, 5])
    assert (s["q25"], s["median"], s["q75"]) == (2.0, 3.0, 4.0)


def test_run_metrics_nulls_for_one_cycle():
    nm = nm_from(np.ones((2, 5)), 10, 5)
    m = run_metrics(nm, None, "default")
    assert m["max_f"] is None and m["recovery"] is None and m["forward_transfer"] is None
    json.dumps(m)


def test_eval_log_from_records_requires_all_checkpoints():
    recs = [{"kind": "eval", "frame": f, "task": "a", "task_index": 0, "mean_return": 1.0} for f in (0, 5)]
    recs.append({"kind": "eval", "frame": 0, "task": "b", "task_index": 1, "mean_return": 1.0})
    with pytest.raises(MissingCheckpointError, match="'b'"):
        EvalLog.from_records(recs, [0, 1], 5)


@given(seed=st.integers(0, 10_000), T=st.integers(1, 4), per=st.integers(1, 4))
@settings(max_examples=40, deadline=None)
def test_metrics_match_brute_force(seed, T, per):
    rng = np.random.default_rng(seed)
    N = 2 * per
    frames = np.arange(0, T * N + 1)
    q = rng.normal(size=(T, frames.size))
    nm = NormalizedMatrix(frames, q, N)
    tab = oracles.table(frames, q)
    assert forgetting(nm) == pytest.approx(oracles.bf_forgetting(tab, T, N), abs=1e-9)
    for k in range(1, T + 1):
        assert acc(nm, k) == pytest.approx(oracles.bf_acc(tab, k, N), abs=1e-9)
        bf = oracles.bf_min_acc(tab, frames, k, N)
        assert (min_acc(nm, k) is None) == (bf is None)
        if bf is not None:
            assert min_acc(nm, k) == pytest.approx(bf, abs=1e-9)
    for n, v in zip(frames, wc_acc_curve(nm)):
        assert v == pytest.approx(oracles.bf_wc_acc(tab, frames, int(n), N, T), abs=1e-9)
