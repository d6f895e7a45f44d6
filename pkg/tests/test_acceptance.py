"""End-to-end acceptance checks, one test per criterion.

The continual-learning criteria share session-scoped runs so each
(suite, schedule, buffer mode) combination is trained once.
"""

import json
import time
from collections import Counter

import numpy as np
import pytest
from scipy import stats

from arrowlab.config import ExperimentConfig
from arrowlab.harness import build_curriculum, compute_report, run_baselines, run_continual, write_report
from arrowlab.metrics import (BaselineSet, EvalLog, NormalizedMatrix, acc, forgetting, forward_transfer,
                              min_acc, normalize, sample_efficiency, two_cycle_metrics, wc_acc_curve)
from arrowlab.replay import Chunk, ReservoirBuffer

import oracles

# the disjoint suite needs the wider feature space; see README
DISJOINT = ExperimentConfig(suite="disjoint")
SHARED = ExperimentConfig(suite="shared", obs_dim=128)


class Study:
    def __init__(self):
        self.baselines, self.baseline_seconds, self.runs, self.seconds = {}, {}, {}, {}

    def base(self, cfg):
        if cfg.suite not in self.baselines:
            t0 = time.perf_counter()
            self.baselines[cfg.suite] = run_baselines(cfg)
            self.baseline_seconds[cfg.suite] = time.perf_counter() - t0
        return self.baselines[cfg.suite]

    def report(self, cfg, schedule, mode):
        key = (cfg.suite, schedule, mode)
        if key not in self.runs:
            t0 = time.perf_counter()
            self.runs[key] = run_continual(cfg.replace(schedule=schedule, buffer_mode=mode))
            self.seconds[key] = time.perf_counter() - t0
        return compute_report(self.runs[key], self.base(cfg))


@pytest.fixture(scope="module")
def study():
    return Study()


def med(report, key):
    return report["summary"][key]["median"]


# 1 -------------------------------------------------------------------------

def test_metrics_match_brute_force_oracle(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst, cases = 0.0, 0

    def close(a, b):
        nonlocal worst
        if a is None or b is None:
            assert a is None and b is None
            return
        worst = max(worst, abs(a - b))

    for _ in range(120):
        T = int(rng.integers(1, 5))
        N = 2 * int(rng.integers(1, 4))
        frames = np.arange(0, T * N + 1)
        lo, hi = rng.normal(size=T), rng.normal(size=T)
        hi = lo + np.sign(hi - lo + 1e-12) * (0.1 + np.abs(hi - lo))
        st_curve = np.linspace(lo, hi, N + 1).T + np.c_[np.zeros(T), rng.normal(0, 0.1, (T, N - 1)), np.zeros(T)]
        p = rng.normal(size=(T, frames.size)) * np.abs(hi - lo)[:, None] + lo[:, None]
        nm = normalize(EvalLog(frames, p, N), BaselineSet(np.arange(N + 1), st_curve))
        q_bf = oracles.bf_normalize(p, lo, hi)
        for i in range(T):
            for j in range(frames.size):
                close(nm.q[i, j], q_bf[i][j])
        tab = oracles.table(frames, q_bf)
        close(forgetting(nm), oracles.bf_forgetting(tab, T, N))
        for k in range(1, T + 1):
            close(acc(nm, k), oracles.bf_acc(tab, k, N))
            close(min_acc(nm, k), oracles.bf_min_acc(tab, frames, k, N))
        for n, v in zip(frames, wc_acc_curve(nm)):
            close(v, oracles.bf_wc_acc(tab, frames, int(n), N, T))
        st_q = oracles.bf_normalize(st_curve, lo, hi)
        nm_st = NormalizedMatrix(np.arange(N + 1), np.asarray(st_q), N)
        with np.errstate(all="ignore"):
            ft = forward_transfer(nm, nm_st).ft
        close(ft, oracles.bf_forward_transfer(tab, oracles.table(range(N + 1), st_q), frames, range(N + 1), T, N))
        tc = two_cycle_metrics(nm)
        maxf, rec = oracles.bf_two_cycle(tab, frames, T, N)
        for a, b in zip(tc.max_f, maxf):
            close(a, b)
        for a, b in zip(tc.recovery, rec):
            close(a, b)
        curves = {"a": rng.random((3, frames.size)), "b": rng.random((3, frames.size))}
        se = sample_efficiency(frames, curves)
        p_star, hit = oracles.bf_sample_efficiency(frames, curves)
        close(se.p_star, p_star)
        assert se.frame == hit
        cases += 1
    elapsed = time.perf_counter() - t0
    ok = criterion(1, cases >= 100 and worst <= 1e-9 and elapsed < 10,
                   f"{cases} matrices, max abs diff {worst:.1e}, {elapsed:.2f}s")
    assert ok


# 2 -------------------------------------------------------------------------

def test_budget_parity(criterion):
    aug = ExperimentConfig(fifo_capacity=512, reservoir_capacity=512, chunk_length=512)
    fifo = ExperimentConfig(fifo_capacity=1024, reservoir_capacity=0, chunk_length=512, buffer_mode="fifo_only")
    folded = aug.replace(buffer_mode="fifo_only")
    values = (aug.capacity_observations, fifo.capacity_observations, folded.capacity_observations)
    ok = criterion(2, values == (524_288, 524_288, 524_288) and folded.capacities() == (1024, 0),
                   f"augmented {values[0]}, fifo_only {values[1]} (folded {values[2]})")
    assert ok


# 3 -------------------------------------------------------------------------

def test_reservoir_uniformity(criterion):
    C2, M, trials = 16, 200, 2000
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    obs = np.zeros((1, 1))
    chunks = [Chunk(obs, np.zeros(1, int), np.zeros(1), np.ones(1, bool), np.zeros(1, bool), np.ones(1), i, 0)
              for i in range(M)]
    counts = Counter()
    for _ in range(trials):
        r = ReservoirBuffer(C2)
        for c in chunks:
            r.offer(c, rng)
        counts.update(c.chunk_id for c in r)
    freq = np.array([counts[i] for i in range(M)]) / trials
    p = C2 / M
    se = np.sqrt(p * (1 - p) / trials)
    within = bool(np.all(np.abs(freq - p) <= 3 * se))
    pvalue = stats.chisquare(freq * trials).pvalue
    elapsed = time.perf_counter() - t0
    ok = criterion(3, within and pvalue > 0.01 and elapsed < 30,
                   f"max |freq - p| = {np.max(np.abs(freq - p)) / se:.2f} SE, chi-square p = {pvalue:.3f}, "
                   f"{elapsed:.1f}s")
    assert ok


# 4 -------------------------------------------------------------------------

def test_gradient_checks(criterion):
    from arrowlab.agent import critic_gradient, critic_loss, policy_gradient, policy_surrogate
    from arrowlab.envs import NUM_ACTIONS
    from arrowlab.worldmodel import LinearWorldModel, Transitions, model_gradients, model_loss

    rng = np.random.default_rng(11)
    wm, ac = 0.0, 0.0
    for _ in range(50):
        d, n = 5, 16
        model = LinearWorldModel(d)
        model.W, model.v, model.c = (rng.normal(size=model.W.shape), rng.normal(size=model.v.shape),
                                     rng.normal(size=model.c.shape))
        tr = Transitions(rng.normal(size=(n, d)), rng.integers(NUM_ACTIONS, size=n), rng.normal(size=(n, d)),
                         rng.normal(size=n), (rng.random(n) < 0.8).astype(float))
        for key, name, g in zip(("W", "v", "c"), ("next", "reward", "cont"), model_gradients(model, tr)):
            fd = oracles.finite_difference(lambda: model_loss(model, tr)[name], model.params()[key], h=1e-5)
            wm = max(wm, oracles.rel_error(g, fd))
    for _ in range(50):
        m, d = 12, 5
        feats, acts = rng.normal(size=(m, d)), rng.integers(NUM_ACTIONS, size=m)
        adv, w, eta = rng.normal(size=m), rng.random(m), float(rng.random())
        theta = rng.normal(size=(NUM_ACTIONS, d))
        fd = oracles.finite_difference(lambda: policy_surrogate(theta, feats, acts, adv, w, eta), theta, h=1e-5)
        ac = max(ac, oracles.rel_error(policy_gradient(theta, feats, acts, adv, w, eta), fd))
        u, ret = rng.normal(size=d), rng.normal(size=m)
        fd = oracles.finite_difference(lambda: critic_loss(u, feats, ret, w), u, h=1e-5)
        ac = max(ac, oracles.rel_error(critic_gradient(u, feats, ret, w), fd))
    ok = criterion(4, wm < 1e-4 and ac < 1e-4, f"world model {wm:.1e}, actor-critic {ac:.1e}")
    assert ok


# 5 -------------------------------------------------------------------------

def test_single_task_competence(study, criterion):
    base = study.base(DISJOINT)
    cur = build_curriculum(DISJOINT)
    ratios = {}
    for task in cur.tasks:
        g = task.grid
        opt = oracles.value_iteration(g.width, g.height, g.walls, g.start, g.goal, g.goal_reward,
                                      g.step_penalty, g.horizon)
        finals = [[r["mean_return"] for r in log.eval_records() if r["frame"] == DISJOINT.steps_per_task][0]
                  for log in base[task.task_index]]
        ratios[task.name] = float(np.median(finals)) / opt
    elapsed = study.baseline_seconds["disjoint"]
    worst = min(ratios, key=ratios.get)
    ok = criterion(5, min(ratios.values()) >= 0.9 and elapsed < 300,
                   f"worst median final/optimum {ratios[worst]:.3f} ({worst}), {elapsed:.0f}s")
    assert ok


# 6, 7 --------------------------------------------------------------------

@pytest.mark.parametrize("number,schedule", [(6, "default"), (7, "reversed")])
def test_disjoint_orderings(study, criterion, number, schedule):
    t0 = time.perf_counter()
    aug = study.report(DISJOINT, schedule, "augmented")
    fifo = study.report(DISJOINT, schedule, "fifo_only")
    elapsed = time.perf_counter() - t0 + (study.baseline_seconds["disjoint"] if number == 6 else 0.0)
    f_ok = med(aug, "forgetting") < med(fifo, "forgetting")
    wc_ok = med(aug, "wc_acc") > med(fifo, "wc_acc")
    ok = criterion(number, f_ok and wc_ok and (number != 6 or elapsed < 1200),
                   f"F {med(aug, 'forgetting'):.3f} vs {med(fifo, 'forgetting'):.3f}, "
                   f"WC-ACC {med(aug, 'wc_acc'):.3f} vs {med(fifo, 'wc_acc'):.3f} (aug vs fifo), {elapsed:.0f}s")
    assert ok


# 8 -------------------------------------------------------------------------

def test_shared_forward_transfer(study, criterion):
    aug = study.report(SHARED, "default", "augmented")
    ft = med(aug, "forward_transfer")
    ok = criterion(8, ft is not None and ft > 0, f"median FT(aug) {ft:.3f}")
    assert ok


# 9 -------------------------------------------------------------------------

def test_two_cycle_recovery(study, criterion):
    parts, ok = [], True
    for cfg in (DISJOINT, SHARED):
        aug = study.report(cfg, "two_cycle", "augmented")
        fifo = study.report(cfg, "two_cycle", "fifo_only")
        rec, mf_a, mf_f = med(aug, "recovery"), med(aug, "max_f"), med(fifo, "max_f")
        ok = ok and rec is not None and rec >= 0.9 and mf_a <= mf_f
        parts.append(f"{cfg.suite}: Recovery {rec:.3f}, Max-F {mf_a:.3f} vs {mf_f:.3f}")
    ok = criterion(9, ok, "; ".join(parts))
    assert ok


# 10 ------------------------------------------------------------------------

def _strip_created(path):
    doc = json.loads(path.read_text())
    doc.pop("created", None)
    return json.dumps(doc, sort_keys=True)


def test_determinism(criterion, tmp_path):
    cfg = DISJOINT.replace(steps_per_task=1000, eval_interval=500, seeds=[0, 1])
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        out.mkdir()
        base = run_baselines(cfg, out)
        reports = [compute_report(run_continual(cfg.replace(buffer_mode=m), out), base)
                   for m in ("augmented", "fifo_only")]
        write_report(reports, out / "report.json", out / "report.csv")
        outs.append(out)
    names = sorted(p.name for p in outs[0].iterdir())
    assert names == sorted(p.name for p in outs[1].iterdir())
    same = []
    for n in names:
        a, b = outs[0] / n, outs[1] / n
        same.append(_strip_created(a) == _strip_created(b) if n.endswith("manifest.json")
                    else a.read_bytes() == b.read_bytes())
    ok = criterion(10, all(same), f"{sum(same)}/{len(same)} output files byte-identical")
    assert ok
