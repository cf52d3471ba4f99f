"""The three benchmark experiments and their report format."""

from __future__ import annotations

import csv
import io
from dataclasses import astuple, dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from ..market import BatchTrace
from ..training import ProblemSet, evaluate
from .datasets import SimulatedMarket, shocked_problem

REPORT_FIELDS = ("experiment", "cell", "mean_cost", "std_cost", "shortfall_prob", "mean_spend",
                 "mean_penalty", "n")
COMPARISON_FIELDS = ("experiment", "comparison", "estimate", "ci_low", "ci_high", "n_boot")


@dataclass(frozen=True)
class ReportRow:
    experiment: str
    cell: str
    mean_cost: float
    std_cost: float
    shortfall_prob: float
    mean_spend: float
    mean_penalty: float
    n: int


@dataclass(frozen=True)
class Comparison:
    """A bootstrap estimate with its 95% percentile interval."""

    experiment: str
    comparison: str
    estimate: float
    ci_low: float
    ci_high: float
    n_boot: int
    # value the interval is tested against (0 for differences, 1 for ratios)
    null: float = field(default=0.0, compare=False, repr=False)

    @property
    def excludes_null(self) -> bool:
        return not (self.ci_low <= self.null <= self.ci_high)


def metrics(trace: BatchTrace, experiment: str = "", cell: str = "") -> ReportRow:
    """Mean/std of final cost, shortfall frequency and the spend/penalty split."""
    n = len(trace)
    if n == 0:
        raise ValueError("need at least one trace")
    cost = trace.final_cost
    return ReportRow(experiment, cell, float(cost.mean()), float(cost.std(ddof=1)) if n > 1 else 0.0,
                     float(np.mean(trace.total_volume < trace.goals)), float(trace.total_spend.mean()),
                     float(trace.penalty_paid.mean()), n)


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def _table(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in astuple(r)[: len(header)]])
    return buf.getvalue()


@dataclass
class ExperimentReport:
    rows: list[ReportRow] = field(default_factory=list)
    comparisons: list[Comparison] = field(default_factory=list)
    # named trajectories (episode CSV text) for figure-ready output
    trajectories: dict[str, str] = field(default_factory=dict)

    def row(self, cell: str) -> ReportRow:
        for r in self.rows:
            if r.cell == cell:
                return r
        raise KeyError(cell)

    def comparison(self, name: str) -> Comparison:
        for c in self.comparisons:
            if c.comparison == name:
                return c
        raise KeyError(name)

    def to_csv(self, path: str | Path | None = None) -> str:
        text = _table(REPORT_FIELDS, self.rows)
        if path is not None:
            Path(path).write_text(text)
        return text

    def comparisons_csv(self, path: str | Path | None = None) -> str:
        text = _table(COMPARISON_FIELDS, self.comparisons)
        if path is not None:
            Path(path).write_text(text)
        return text

    def write(self, out_dir: str | Path, name: str) -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = [out / f"{name}_report.csv"]
        self.to_csv(paths[0])
        if self.comparisons:
            paths.append(out / f"{name}_comparisons.csv")
            self.comparisons_csv(paths[-1])
        if self.trajectories:
            (out / "trajectories").mkdir(exist_ok=True)
            for key, text in sorted(self.trajectories.items()):
                p = out / "trajectories" / f"{key}.csv"
                p.write_text(text)
                paths.append(p)
        return paths

    @classmethod
    def from_csv(cls, path: str | Path) -> "ExperimentReport":
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if tuple(reader.fieldnames or ()) != REPORT_FIELDS:
                raise ValueError(f"{path}: not a report CSV")
            rows = [ReportRow(r["experiment"], r["cell"], *(float(r[k]) for k in REPORT_FIELDS[2:7]), int(r["n"]))
                    for r in reader]
        return cls(rows)


def _interval(statistic, samples, paired: bool, n_boot: int, seed: int) -> tuple[float, float, float]:
    est = float(statistic(*samples))
    if len(samples[0]) < 2:
        return est, est, est
    res = stats.bootstrap(samples, statistic, paired=paired, vectorized=True, n_resamples=n_boot,
                          confidence_level=0.95, method="percentile", rng=np.random.default_rng(seed))
    return est, float(res.confidence_interval.low), float(res.confidence_interval.high)


def paired_difference(experiment: str, name: str, a: np.ndarray, b: np.ndarray, n_boot: int,
                      seed: int) -> Comparison:
    """Mean of ``a - b`` over the same episodes."""
    est, lo, hi = _interval(lambda x, y, axis=-1: np.mean(x - y, axis=axis), (a, b), True, n_boot, seed)
    return Comparison(experiment, name, est, lo, hi, n_boot, null=0.0)


def mean_difference(experiment: str, name: str, a: np.ndarray, b: np.ndarray, n_boot: int,
                    seed: int) -> Comparison:
    """``mean(a) - mean(b)`` for independent samples."""
    est, lo, hi = _interval(lambda x, y, axis=-1: np.mean(x, axis=axis) - np.mean(y, axis=axis), (a, b),
                            False, n_boot, seed)
    return Comparison(experiment, name, est, lo, hi, n_boot, null=0.0)


def ratio_of_means(experiment: str, name: str, a: np.ndarray, b: np.ndarray, n_boot: int,
                   seed: int) -> Comparison:
    """``mean(a) / mean(b)`` over the same episodes."""
    est, lo, hi = _interval(lambda x, y, axis=-1: np.mean(x, axis=axis) / np.mean(y, axis=axis), (a, b),
                            True, n_boot, seed)
    return Comparison(experiment, name, est, lo, hi, n_boot, null=1.0)


# ------------------------------------------------------------------ experiments

def _label(v: float) -> str:
    return f"{v:g}"


def experiment_shock_grid(models: dict, factors, market: SimulatedMarket = SimulatedMarket(),
                          start: int = 65, table=None) -> ExperimentReport:
    """Each model (keyed by training sigma) on the noiseless base path with each permanent shock."""
    if not models:
        raise ValueError("no models to evaluate")
    table = table or market.table()
    report = ExperimentReport()
    for sigma in sorted(models):
        params = models[sigma]
        if params is None:
            raise ValueError(f"missing model for sigma={sigma}")
        for f in factors:
            cell = f"sigma={_label(sigma)}|shock={_label(f)}"
            trace = evaluate(params, shocked_problem(market, f, start, table))
            report.rows.append(metrics(trace, "shock_grid", cell))
            report.trajectories[f"shock_grid_sigma{_label(sigma)}_shock{_label(f)}"] = trace.episode(0).to_csv()
    return report


def initial_bids(report: ExperimentReport, sigmas) -> list[float]:
    """First-period bid of each model on the unshocked path, read back from its trajectory."""
    out = []
    for s in sigmas:
        text = report.trajectories[f"shock_grid_sigma{_label(s)}_shock1"]
        out.append(float(text.splitlines()[1].split(",")[1]))
    return out


def experiment_noise_cross(models: dict, eval_sets: dict, n_boot: int = 2000, seed: int = 0) -> ExperimentReport:
    """Models trained under each noise level evaluated under each; keys are level names.

    Adds paired bootstrap comparisons of matched vs mismatched training per
    evaluation column and of shortfall frequency between evaluation levels.
    """
    levels = list(models)
    if set(levels) != set(eval_sets) or len(levels) != 2:
        raise ValueError("need the same two noise levels for training and evaluation")
    report = ExperimentReport()
    traces = {}
    for tr in levels:
        for ev in levels:
            trace = evaluate(models[tr], eval_sets[ev])
            traces[tr, ev] = trace
            report.rows.append(metrics(trace, "noise_cross", f"train={tr}|eval={ev}"))
    a, b = levels
    for k, ev in enumerate(levels):
        other = b if ev == a else a
        report.comparisons.append(paired_difference(
            "noise_cross", f"eval={ev}:cost(train={other})-cost(train={ev})",
            traces[other, ev].final_cost, traces[ev, ev].final_cost, n_boot, seed + k))
    for k, tr in enumerate(levels):
        short = {ev: (traces[tr, ev].total_volume < traces[tr, ev].goals).astype(float) for ev in levels}
        report.comparisons.append(mean_difference(
            "noise_cross", f"train={tr}:shortfall(eval={b})-shortfall(eval={a})",
            short[b], short[a], n_boot, seed + 10 + k))
    return report


def experiment_pi_vs_rnn(pi_params, rnn_params, buckets: dict, n_boot: int = 2000,
                         seed: int = 0) -> ExperimentReport:
    """Both controllers on the same problems per goal bucket; reports the RNN/PI cost ratio.

    ``buckets`` maps a goal to the ProblemSet evaluated for it.  Costs are
    divided by the goal, which leaves the ratio unchanged within a bucket.
    """
    report = ExperimentReport()
    for k, goal in enumerate(sorted(buckets)):
        problems: ProblemSet = buckets[goal]
        costs = {}
        for name, params in (("pi", pi_params), ("rnn", rnn_params)):
            trace = evaluate(params, problems)
            report.rows.append(metrics(trace, "pi_vs_rnn", f"{name}|goal={_label(goal)}"))
            costs[name] = trace.final_cost / goal
        report.comparisons.append(ratio_of_means(
            "pi_vs_rnn", f"goal={_label(goal)}:rnn/pi", costs["rnn"], costs["pi"], n_boot, seed + k))
    return report
