"""Monte Carlo studies: many independent trials, margin statistics and output files."""
from concurrent.futures import ProcessPoolExecutor
import csv
from dataclasses import asdict, dataclass, field
import json
import math
from pathlib import Path
import warnings

import numpy as np

from .integrator import System, TrialResult

PERCENTILES = (1, 5, 10, 50, 90, 95, 99)
MAX_FAULT_FRACTION = 0.05
Z_90 = 1.2815515655446004  # standard normal 0.9 quantile


class StudyError(RuntimeError):
    """Too many trials faulted for the statistics to mean anything."""


def trial_seed(base_seed, trial_id):
    """64-bit seed of trial ``trial_id``; depends only on the pair, never on scheduling."""
    words = np.random.SeedSequence(base_seed, spawn_key=(trial_id,)).generate_state(2, np.uint32)
    return int(words[0]) | (int(words[1]) << 32)


class RunningStats:
    """Welford accumulator; ``merge`` combines partial results (Chan et al.)."""

    def __init__(self):
        self.n = 0
        self.mean = 0.0
        self.m2 = 0.0

    def push(self, x):
        self.n += 1
        d = x - self.mean
        self.mean += d / self.n
        self.m2 += d * (x - self.mean)

    def merge(self, other):
        if other.n == 0:
            return self
        if self.n == 0:
            self.n, self.mean, self.m2 = other.n, other.mean, other.m2
            return self
        n = self.n + other.n
        d = other.mean - self.mean
        self.mean += d * other.n / n
        self.m2 += other.m2 + d * d * self.n * other.n / n
        self.n = n
        return self

    @property
    def std(self):
        # sample std; a single observation has no spread
        return math.sqrt(self.m2 / (self.n - 1)) if self.n > 1 else 0.0


@dataclass
class MarginStats:
    n_trials: int  # collapsed + no-collapse; faulted trials are excluded
    n_collapsed: int
    n_no_collapse: int
    n_faults: int
    mean_mw: float
    std_mw: float
    percentiles_mw: dict
    d90_mw: float  # empirical 10th percentile
    d90_normal_mw: float  # mean - z_0.9 * std, the other reading of the 90% figure
    deterministic_margin_mw: float
    causes: dict = field(default_factory=dict)

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True, allow_nan=True) + "\n"


@dataclass
class StudyResult:
    stats: MarginStats
    records: list
    deterministic: TrialResult


def margin_stats(records, deterministic_margin=math.nan):
    """Statistics over trial records, folded in trial-id order so the result is
    independent of how the trials were scheduled."""
    records = sorted(records, key=lambda r: r.trial_id)
    rs = RunningStats()
    margins = []
    causes = {}
    n_nc = n_fault = 0
    for r in records:
        if r.status == "collapse":
            rs.push(r.margin_mw)
            margins.append(r.margin_mw)
            causes[r.cause] = causes.get(r.cause, 0) + 1
        elif r.status == "no-collapse":
            n_nc += 1
        else:
            n_fault += 1
    if margins:
        pct = np.percentile(np.array(margins), PERCENTILES)
        pct = {str(p): float(v) for p, v in zip(PERCENTILES, pct)}
        mean, std = rs.mean, rs.std
    else:
        pct = {str(p): math.nan for p in PERCENTILES}
        mean = std = math.nan
    return MarginStats(
        n_trials=len(margins) + n_nc, n_collapsed=len(margins), n_no_collapse=n_nc,
        n_faults=n_fault, mean_mw=mean, std_mw=std, percentiles_mw=pct, d90_mw=pct["10"],
        d90_normal_mw=mean - Z_90 * std, deterministic_margin_mw=float(deterministic_margin),
        causes=dict(sorted(causes.items())))


def histogram(records, bin_width_mw):
    """Left-closed bins of ``bin_width_mw`` covering the collapsed margins.

    Returns a list of ``(bin_left_mw, count)``; bins are anchored at multiples
    of the width, and empty bins inside the range are kept.
    """
    if not bin_width_mw > 0:
        raise ValueError(f"bin width must be > 0, got {bin_width_mw}")
    m = np.array([r.margin_mw for r in records if r.status == "collapse"], dtype=float)
    if m.size == 0:
        return []
    k = np.floor(m / bin_width_mw).astype(np.int64)
    lo = int(k.min())
    counts = np.bincount(k - lo)
    return [((lo + i) * bin_width_mw, int(c)) for i, c in enumerate(counts)]


# -- trial execution -----------------------------------------------------------

_worker_system = None


def _init_worker(scenario):
    global _worker_system
    _worker_system = System(scenario)


def _run_one(system, base_seed, trial_id, record):
    seed = trial_seed(base_seed, trial_id)
    try:
        return system.run(seed, trial_id=trial_id, record=record)
    except Exception as exc:  # a faulted trial must not take the study down
        return TrialResult(trial_id, seed, "fault", message=f"{type(exc).__name__}: {exc}")


def _run_chunk(args):
    base_seed, ids, record_ids = args
    return [_run_one(_worker_system, base_seed, i, i in record_ids) for i in ids]


def run_trials(scenario, n_trials, base_seed=0, parallelism=1, record=(), system=None,
               progress=None):
    """Run trials ``0 .. n_trials-1``; returns records sorted by trial id.

    ``record`` is a collection of trial ids whose trajectories are kept.
    """
    if n_trials < 1:
        raise ValueError(f"n_trials must be >= 1, got {n_trials}")
    if parallelism < 1:
        raise ValueError(f"parallelism must be >= 1, got {parallelism}")
    record = frozenset(record)
    if parallelism == 1:
        system = system or System(scenario)
        out = []
        for i in range(n_trials):
            out.append(_run_one(system, base_seed, i, i in record))
            if progress:
                progress(i + 1, n_trials)
        return out
    chunk = max(1, math.ceil(n_trials / (4 * parallelism)))
    jobs = [(base_seed, list(range(s, min(s + chunk, n_trials))), record)
            for s in range(0, n_trials, chunk)]
    out = []
    with ProcessPoolExecutor(parallelism, initializer=_init_worker, initargs=(scenario,)) as ex:
        for part in ex.map(_run_chunk, jobs):
            out.extend(part)
            if progress:
                progress(len(out), n_trials)
    return sorted(out, key=lambda r: r.trial_id)


def run_deterministic(scenario, record=False):
    return System(scenario.deterministic()).run(0, trial_id=-1, record=record)


def run_study(scenario, n_trials=None, base_seed=None, parallelism=None, record=(),
              progress=None):
    """Monte Carlo study plus the noise-free companion run.

    Unset arguments fall back to the scenario's study block. Faulted trials
    are excluded from the statistics with a warning; more than 5% faults
    raises :class:`StudyError`.
    """
    st = scenario.study
    n_trials = st.n_trials if n_trials is None else n_trials
    base_seed = st.base_seed if base_seed is None else base_seed
    parallelism = st.parallelism if parallelism is None else parallelism
    det = run_deterministic(scenario)
    records = run_trials(scenario, n_trials, base_seed, parallelism, record, progress=progress)
    faults = [r for r in records if r.status == "fault"]
    if faults:
        msg = "; ".join(f"trial {r.trial_id}: {r.message}" for r in faults[:5])
        if len(faults) > MAX_FAULT_FRACTION * n_trials:
            raise StudyError(f"{len(faults)} of {n_trials} trials faulted ({msg})")
        warnings.warn(f"{len(faults)} trial(s) faulted and were excluded: {msg}", RuntimeWarning)
    det_margin = det.margin_mw if det.collapsed else math.nan
    return StudyResult(margin_stats(records, det_margin), records, det)


# -- output files ------------------------------------------------------------------

def _fmt(x):
    return repr(float(x))


def write_margins(path, records):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["trial_id", "seed", "margin_mw", "cause", "t_collapse", "status"])
        for r in sorted(records, key=lambda r: r.trial_id):
            w.writerow([r.trial_id, r.seed, _fmt(r.margin_mw), r.cause, _fmt(r.t_collapse), r.status])


def read_margins(path):
    """Records back from ``margins.csv`` (enough for statistics and histograms)."""
    out = []
    with open(path, newline="") as fh:
        rd = csv.DictReader(fh)
        missing = {"trial_id", "seed", "margin_mw"} - set(rd.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: missing column(s) {sorted(missing)}")
        for line, row in enumerate(rd, start=2):
            try:
                margin = float(row["margin_mw"])
                status = row.get("status") or ("collapse" if math.isfinite(margin) else "no-collapse")
                out.append(TrialResult(int(row["trial_id"]), int(row["seed"]), status,
                                       margin_mw=margin, cause=row.get("cause", ""),
                                       t_collapse=float(row.get("t_collapse") or "nan")))
            except ValueError as exc:
                raise ValueError(f"{path}, line {line}: {exc}") from None
    return out


def write_stats(path, stats):
    Path(path).write_text(stats.to_json())


def write_histogram(path, bins):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_left_mw", "count"])
        for left, c in bins:
            w.writerow([_fmt(left), c])


def write_trajectory(path, trajectory):
    data = trajectory["data"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(trajectory["columns"])
        for row in data:
            w.writerow([_fmt(v) for v in row])


def write_outputs(out_dir, result, bin_width_mw):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_margins(out / "margins.csv", result.records)
    write_stats(out / "stats.json", result.stats)
    write_histogram(out / "histogram.csv", histogram(result.records, bin_width_mw))
    for r in result.records:
        if r.trajectory is not None:
            write_trajectory(out / f"trajectory_{r.trial_id}.csv", r.trajectory)
    return out
