import json
import math

from hypothesis import given, settings, strategies as st
import numpy as np
import pytest

from stochmargin import montecarlo as mc
from stochmargin.integrator import System, TrialResult
from stochmargin.io import load_scenario


def rec(i, m, status="collapse"):
    return TrialResult(i, 1000 + i, status, margin_mw=m if status == "collapse" else math.nan,
                       cause="jacobian-sign-change" if status == "collapse" else "")


# -- histogram ------------------------------------------------------------------------

def test_histogram_examples():
    assert mc.histogram([rec(0, 100.0)], 10.0) == [(100.0, 1)]
    assert mc.histogram([rec(0, 95.0), rec(1, 105.0), rec(2, 106.0)], 10.0) == [(90.0, 1), (100.0, 2)]
    assert mc.histogram([], 10.0) == []


def test_histogram_keeps_interior_empty_bins_and_skips_no_collapse():
    h = mc.histogram([rec(0, 1.0), rec(1, 35.0), rec(2, 0.0, "no-collapse")], 10.0)
    assert h == [(0.0, 1), (10.0, 0), (20.0, 0), (30.0, 1)]


def test_histogram_rejects_bad_width():
    with pytest.raises(ValueError):
        mc.histogram([rec(0, 1.0)], 0.0)


@settings(max_examples=100)
@given(st.lists(st.integers(-2000, 6000), min_size=1, max_size=60), st.integers(1, 50))
def test_histogram_conserves_counts(quarters, width):
    # quarter-MW margins and integer widths keep bin membership exact
    margins = [q / 4 for q in quarters]
    h = mc.histogram([rec(i, m) for i, m in enumerate(margins)], float(width))
    assert sum(c for _, c in h) == len(margins)
    for left, c in h:
        assert c == sum(left <= m < left + width for m in margins)


# -- statistics ---------------------------------------------------------------------

@settings(max_examples=100)
@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=50), st.integers(0, 50))
def test_running_stats_merge_matches_batch(xs, cut):
    cut = min(cut, len(xs))
    a, b, whole = mc.RunningStats(), mc.RunningStats(), mc.RunningStats()
    for x in xs[:cut]:
        a.push(x)
    for x in xs[cut:]:
        b.push(x)
    for x in xs:
        whole.push(x)
    a.merge(b)
    assert a.n == len(xs)
    assert a.mean == pytest.approx(np.mean(xs), abs=1e-9)
    ref = np.std(xs, ddof=1) if len(xs) > 1 else 0.0
    assert a.std == pytest.approx(ref, rel=1e-7, abs=1e-7)
    assert whole.std == pytest.approx(ref, rel=1e-7, abs=1e-7)


@settings(max_examples=100)
@given(st.lists(st.floats(0, 1000), min_size=1, max_size=80))
def test_margin_stats_orderings(margins):
    s = mc.margin_stats([rec(i, m) for i, m in enumerate(margins)], 500.0)
    pct = [s.percentiles_mw[str(p)] for p in mc.PERCENTILES]
    assert all(a <= b for a, b in zip(pct, pct[1:]))
    assert s.d90_mw <= s.percentiles_mw["50"] <= s.mean_mw + s.std_mw + 1e-9
    assert s.n_trials == s.n_collapsed + s.n_no_collapse


def test_margin_stats_counts_and_causes():
    records = [rec(0, 10.0), rec(1, 0.0, "no-collapse"), rec(2, 30.0),
               TrialResult(3, 0, "fault", message="boom")]
    s = mc.margin_stats(records)
    assert (s.n_trials, s.n_collapsed, s.n_no_collapse, s.n_faults) == (3, 2, 1, 1)
    assert s.mean_mw == 20.0 and s.causes == {"jacobian-sign-change": 2}
    assert s.d90_normal_mw == pytest.approx(20.0 - mc.Z_90 * math.sqrt(200.0))


def test_margin_stats_independent_of_record_order():
    records = [rec(i, float(m)) for i, m in enumerate(np.random.default_rng(1).normal(400, 30, 50))]
    a = mc.margin_stats(records).to_json()
    b = mc.margin_stats(records[::-1]).to_json()
    assert a == b


def test_trial_seed_is_stable_and_distinct():
    assert mc.trial_seed(7, 3) == mc.trial_seed(7, 3)
    seeds = {mc.trial_seed(7, i) for i in range(1000)}
    assert len(seeds) == 1000
    assert mc.trial_seed(7, 0) != mc.trial_seed(8, 0)
    assert 0 <= mc.trial_seed(7, 0) < 2 ** 64


# -- studies --------------------------------------------------------------------------

def _nine_bus_noise(sigma):
    sc = load_scenario("nine_bus_load_noise.json")
    from dataclasses import replace
    return replace(sc, load_noise=replace(sc.load_noise, sigma=sigma))


def test_single_noiseless_trial_equals_deterministic():
    res = mc.run_study(_nine_bus_noise(0.0), 1, 0, 1)
    assert res.stats.n_trials == 1
    assert res.stats.mean_mw == res.stats.deterministic_margin_mw
    assert res.stats.std_mw == 0.0


def test_parallel_matches_serial():
    sc = _nine_bus_noise(0.05)
    a = mc.run_trials(sc, 3, 5, parallelism=1)
    b = mc.run_trials(sc, 3, 5, parallelism=2)
    assert [(r.trial_id, r.seed, r.margin_mw) for r in a] == [(r.trial_id, r.seed, r.margin_mw) for r in b]


def _faulty_run(bad):
    orig = System.run

    def run(self, seed, trial_id=0, record=False, detect=True):
        if trial_id in bad:
            raise FloatingPointError("injected")
        return orig(self, seed, trial_id, record, detect)
    return run


def test_faults_are_excluded_with_warning(monkeypatch):
    sc = load_scenario("nine_bus_load_noise.json")
    monkeypatch.setattr(System, "run", _faulty_run({1}))
    with pytest.warns(RuntimeWarning, match="trial 1"):
        res = mc.run_study(sc.with_integration(max_time=1.0), 20, 0, 1)
    assert res.stats.n_faults == 1 and res.stats.n_trials == 19


def test_too_many_faults_is_study_error(monkeypatch):
    sc = load_scenario("nine_bus_load_noise.json")
    monkeypatch.setattr(System, "run", _faulty_run({0, 1}))
    with pytest.raises(mc.StudyError):
        mc.run_study(sc.with_integration(max_time=1.0), 20, 0, 1)


def test_no_collapse_within_max_time_is_counted():
    res = mc.run_study(load_scenario("nine_bus_load_noise.json").with_integration(max_time=5.0), 2, 0, 1)
    assert res.stats.n_no_collapse == 2 and res.stats.n_collapsed == 0
    assert math.isnan(res.stats.mean_mw)


@pytest.mark.slow
def test_std_shrinks_with_noise_intensity():
    stds, means = [], []
    for sigma in (0.01, 0.005):
        res = mc.run_study(_nine_bus_noise(sigma), 8, 0, 1)
        stds.append(res.stats.std_mw)
        means.append(res.stats.mean_mw)
        det = res.stats.deterministic_margin_mw
    assert stds[1] < stds[0]
    assert abs(means[1] - det) < abs(means[0] - det) or abs(means[1] - det) < 0.5


# -- output files ----------------------------------------------------------------------

def test_margins_round_trip(tmp_path):
    records = [rec(0, 412.5), rec(1, 0.0, "no-collapse"), rec(2, 399.25)]
    mc.write_margins(tmp_path / "margins.csv", records)
    back = mc.read_margins(tmp_path / "margins.csv")
    assert [(r.trial_id, r.seed, r.status) for r in back] == [(r.trial_id, r.seed, r.status) for r in records]
    assert back[0].margin_mw == 412.5 and math.isnan(back[1].margin_mw)
    assert mc.margin_stats(back).to_json() == mc.margin_stats(records).to_json()


def test_read_margins_reports_bad_line(tmp_path):
    p = tmp_path / "m.csv"
    p.write_text("trial_id,seed,margin_mw\n0,1,12.0\n1,2,abc\n")
    with pytest.raises(ValueError, match="line 3"):
        mc.read_margins(p)


def test_write_outputs(tmp_path):
    res = mc.StudyResult(mc.margin_stats([rec(0, 101.0), rec(1, 119.0)], 130.0),
                         [rec(0, 101.0), rec(1, 119.0)], None)
    mc.write_outputs(tmp_path, res, 10.0)
    stats = json.loads((tmp_path / "stats.json").read_text())
    assert stats["deterministic_margin_mw"] == 130.0 and stats["n_trials"] == 2
    assert (tmp_path / "histogram.csv").read_text().splitlines() == [
        "bin_left_mw,count", "100.0,1", "110.0,1"]
    header = (tmp_path / "margins.csv").read_text().splitlines()[0]
    assert header == "trial_id,seed,margin_mw,cause,t_collapse,status"
