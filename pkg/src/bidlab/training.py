"""SGD on the differentiable episode cost (BPTT through the whole day)."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .autodiff import Gradient, Tape
from .controllers import (GRUController, GruParams, Normalizers, PIController, PiParams,
                          gru_episode_tape, pi_episode_tape)
from .landscape import ResponseTable
from .market import simulate_batch

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 100
    lr0: float = 0.1
    decay: float = 0.5
    decay_steps: int = 400
    clip: float = 5.0
    val_period: int = 200
    # total problems presented; None means one pass over the training set
    max_problems: int | None = None
    # "goal" trains on cost per goal impression, "none" on raw currency
    loss_scale: str = "goal"

    def __post_init__(self):
        if not self.lr0 >= 0:
            raise ValueError("lr0 must be non-negative")
        if self.decay < 0 or self.decay_steps < 1 or not self.clip > 0 or self.batch_size < 1:
            raise ValueError("invalid training schedule")
        if self.loss_scale not in ("goal", "none"):
            raise ValueError(f"unknown loss_scale {self.loss_scale!r}")


def learning_rate(n: int, config: TrainConfig = TrainConfig()) -> float:
    """Inverse-time decay, stepped every ``decay_steps`` updates."""
    if n < 0:
        raise ValueError("step must be non-negative")
    return config.lr0 / (1.0 + config.decay * (n // config.decay_steps))


def clip_gradient(grad: Gradient, threshold: float) -> Gradient:
    """Rescale to global norm ``threshold`` when the norm exceeds it."""
    if not threshold > 0:
        raise ValueError("threshold must be positive")
    norm = grad.norm()
    if norm > threshold:
        return grad.scaled(threshold / norm)
    return Gradient(grad)


@dataclass
class ProblemSet:
    """A stack of bidding problems sharing one response table and penalty.

    ``rows[i]`` picks the landscape process of problem ``i`` in ``table``;
    ``ids`` identify problems across splits.
    """

    intensity: np.ndarray
    goals: np.ndarray
    table: ResponseTable
    K: float
    rows: np.ndarray | None = None
    ids: np.ndarray | None = None

    def __post_init__(self):
        self.intensity = np.atleast_2d(np.asarray(self.intensity, dtype=float))
        n = self.intensity.shape[0]
        self.goals = np.broadcast_to(np.asarray(self.goals, dtype=float), (n,)).copy()
        self.rows = np.zeros(n, dtype=int) if self.rows is None else np.asarray(self.rows, dtype=int)
        self.ids = np.arange(n) if self.ids is None else np.asarray(self.ids)
        if not self.K > 0:
            raise ValueError("penalty K must be positive")

    def __len__(self) -> int:
        return self.intensity.shape[0]

    @property
    def T(self) -> int:
        return self.intensity.shape[1]

    def subset(self, index) -> "ProblemSet":
        index = np.asarray(index)
        return ProblemSet(self.intensity[index], self.goals[index], self.table, self.K,
                          self.rows[index], self.ids[index])

    def with_goals(self, goals) -> "ProblemSet":
        return ProblemSet(self.intensity, goals, self.table, self.K, self.rows, self.ids)


def pacing_bids(problems: ProblemSet, iters: int = 60) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Constant bid per problem that delivers its goal over the day, by bisection.

    The expected response is linear in the per-period price masses, so the
    day's total volume at a constant bid is one lookup against the
    intensity-weighted mean landscape.  Returns ``(bid, volume, spend)``;
    infeasible goals get ``K``.
    """
    table = problems.table
    T = problems.T
    pdf = table.pdf[problems.rows, : min(T, table.n_periods)]
    if T > table.n_periods:
        extra = np.repeat(pdf[:, -1:], T - table.n_periods, axis=1)
        pdf = np.concatenate([pdf, extra], axis=1)
    day = np.einsum("bt,btk->bk", problems.intensity, pdf)
    merged = ResponseTable(table.grid, day[:, None, :], table.noise)
    rows = np.arange(len(problems))
    lo, hi = np.zeros(len(problems)), np.full(len(problems), problems.K)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        short = merged.lookup(mid, 0, rows)[0] < problems.goals
        lo, hi = np.where(short, mid, lo), np.where(short, hi, mid)
    win, spend, _, _ = merged.lookup(hi, 0, rows)
    return hi, win, spend


def fit_normalizers(problems: ProblemSet, sample: int = 500) -> Normalizers:
    """Input scales from a training set: mean goal, mean per-period delivery and mean price paid."""
    n = min(sample, len(problems))
    sub = problems.subset(np.arange(n))
    _, vol, spend = pacing_bids(sub)
    price = float(spend.sum() / vol.sum()) if vol.sum() > 0 else 1.0
    goal = float(np.mean(problems.goals))
    return Normalizers(goal=goal, volume=goal / problems.T, price=price)


def reference_bid(problems: ProblemSet, sample: int = 500) -> float:
    """Median constant pacing bid over (a prefix of) a problem set."""
    sub = problems.subset(np.arange(min(sample, len(problems))))
    return float(np.median(pacing_bids(sub)[0]))


class _Lookup:
    """Tape adapter for the response table with a one-entry memo per period."""

    def __init__(self, tape: Tape, table: ResponseTable, rows: np.ndarray):
        self.tape = tape
        self.table = table
        self.rows = rows

    def __call__(self, bid, t):
        memo = {}

        def evaluate(x):
            key = x.tobytes()
            if key not in memo:
                memo.clear()
                memo[key] = self.table.lookup(x, t, self.rows)
            return memo[key]

        win = self.tape.lookup(bid, lambda x: (evaluate(x)[0], evaluate(x)[2]))
        spend = self.tape.lookup(bid, lambda x: (evaluate(x)[1], evaluate(x)[3]))
        return win, spend


# ------------------------------------------------------------------ model adapters

class _GruModel:
    def weights(self, params: GruParams) -> dict:
        return params.weights

    def with_weights(self, params: GruParams, weights: dict) -> GruParams:
        return params.with_weights(weights)

    def unroll(self, tape, nodes, params, problems: ProblemSet, lookup):
        spend, vol, bids = gru_episode_tape(tape, nodes, params, problems.intensity, lookup, problems.goals)
        return spend, vol, bids

    def controller(self, params):
        return GRUController(params)


def _exp(x):
    y = np.exp(x)
    return y, y


class _PiModel:
    """Gains are trained as logarithms: a sign flip would pin the bid at zero where every gradient vanishes."""

    def weights(self, params: PiParams) -> dict:
        if not (params.theta_p > 0 and params.theta_i > 0):
            raise ValueError("PI gains must be positive to be tuned")
        return {"log_theta_p": np.log(np.array(params.theta_p)), "log_theta_i": np.log(np.array(params.theta_i))}

    def with_weights(self, params: PiParams, weights: dict) -> PiParams:
        return PiParams(float(np.exp(weights["log_theta_p"])), float(np.exp(weights["log_theta_i"])),
                        params.harmonics, params.K, params.normalize_error)

    def unroll(self, tape, nodes, params, problems: ProblemSet, lookup):
        gains = {k[4:]: tape.lookup(v, _exp) for k, v in nodes.items()}
        spend, vol, bid = pi_episode_tape(tape, gains, params, problems.intensity, lookup, problems.goals)
        return spend, vol, [bid]

    def controller(self, params):
        return PIController(params)


def _model_for(params):
    return _GruModel() if isinstance(params, GruParams) else _PiModel()


def _loss_weights(problems: ProblemSet, loss_scale: str) -> np.ndarray:
    if loss_scale == "goal":
        return 1.0 / np.maximum(problems.goals, 1e-12)
    return np.ones(len(problems))


@dataclass
class LossResult:
    loss: float
    grad: Gradient
    costs: np.ndarray
    goal_margin: float
    tape: Tape | None = field(default=None, repr=False)


def batch_loss_grad(params, problems: ProblemSet, loss_scale: str = "none", keep_tape: bool = False) -> LossResult:
    """Mean (optionally goal-scaled) episode cost over a batch and its gradient."""
    model = _model_for(params)
    tape = Tape()
    nodes = {k: tape.param(k, v) for k, v in model.weights(params).items()}
    lookup = _Lookup(tape, problems.table, problems.rows)
    spend, vol, bids = model.unroll(tape, nodes, params, problems, lookup)
    shortfall = tape.maximum(tape.const(problems.goals) - vol, 0.0)
    costs = spend + shortfall * problems.K
    weights = _loss_weights(problems, loss_scale) / len(problems)
    total = tape.sum(tape.affine(costs, weights, 0.0))
    grad = tape.backward(total)
    if not math.isfinite(float(total.value)):
        raise FloatingPointError(f"non-finite loss on problems {problems.ids[:5].tolist()}")
    rel_short = np.abs(problems.goals - vol.value) / np.maximum(problems.goals, 1e-12)
    margin = float(rel_short.min())
    return LossResult(float(total.value), grad, costs.value.copy(), margin, tape if keep_tape else None)


def episode_loss_grad(params, problems: ProblemSet, index: int = 0) -> tuple[float, Gradient]:
    """Episode cost (currency) of one problem and its gradient."""
    res = batch_loss_grad(params, problems.subset([index]))
    return res.loss, res.grad


def evaluate(params, problems: ProblemSet, mode: str = "expected", seed: int = 0,
             chunk: int = 2000):
    """Simulate every problem with the non-differentiable controller; returns a BatchTrace list."""
    from .market import BatchTrace

    model = _model_for(params)
    ctrl = model.controller(params)
    parts = []
    rng = np.random.default_rng(seed) if mode == "sampled" else None
    for lo in range(0, len(problems), chunk):
        sub = problems.subset(np.arange(lo, min(lo + chunk, len(problems))))
        parts.append(simulate_batch(ctrl, sub.intensity, sub.table, sub.goals, sub.K, rows=sub.rows,
                                    mode=mode, rng=rng))
    return BatchTrace(np.concatenate([p.bid for p in parts]), np.concatenate([p.volume for p in parts]),
                      np.concatenate([p.spend for p in parts]),
                      np.concatenate([p.remaining_goal for p in parts]),
                      np.concatenate([p.goals for p in parts]), problems.K)


def validation_loss(params, problems: ProblemSet, loss_scale: str) -> float:
    trace = evaluate(params, problems)
    return float(np.mean(trace.final_cost * _loss_weights(problems, loss_scale)))


class TrainingDiverged(RuntimeError):
    def __init__(self, message, log_rows):
        super().__init__(message)
        self.log_rows = log_rows


@dataclass
class TrainResult:
    params: object
    log: list[dict]
    best_val: float
    best_step: int

    def log_csv(self, path: str | Path | None = None) -> str:
        return write_training_log(self.log, path)


LOG_FIELDS = ("step", "lr", "batch_loss", "grad_norm", "clipped", "val_loss")


def write_training_log(rows: list[dict], path: str | Path | None = None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_FIELDS)
    for r in rows:
        w.writerow([r["step"], repr(r["lr"]), "" if r["batch_loss"] is None else repr(r["batch_loss"]),
                    "" if r["grad_norm"] is None else repr(r["grad_norm"]), int(r["clipped"]),
                    "" if r["val_loss"] is None else repr(r["val_loss"])])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


def _sgd(params, problems: ProblemSet, validation: ProblemSet, config: TrainConfig, seed: int,
         on_improve: Callable | None = None) -> TrainResult:
    if len(validation) == 0:
        raise ValueError("validation set must not be empty")
    model = _model_for(params)
    rng = np.random.default_rng(seed)
    total = config.max_problems if config.max_problems is not None else len(problems)
    n_steps = max(1, math.ceil(total / config.batch_size))
    order = np.empty(0, dtype=int)
    weights = {k: np.array(v, dtype=float) for k, v in model.weights(params).items()}
    current = model.with_weights(params, weights)

    v0 = validation_loss(current, validation, config.loss_scale)
    rows = [dict(step=0, lr=learning_rate(0, config), batch_loss=None, grad_norm=None, clipped=False, val_loss=v0)]
    best_val, best_step, best = v0, 0, current
    bad_checks = 0
    for step in range(1, n_steps + 1):
        if order.size < config.batch_size:
            order = np.concatenate([order, rng.permutation(len(problems))])
        batch, order = order[: config.batch_size], order[config.batch_size:]
        res = batch_loss_grad(current, problems.subset(np.sort(batch)), config.loss_scale)
        if not res.grad.is_finite():
            raise TrainingDiverged(f"non-finite gradient at step {step}", rows)
        norm = res.grad.norm()
        g = clip_gradient(res.grad, config.clip)
        lr = learning_rate(step - 1, config)
        weights = {k: weights[k] - lr * g[k] for k in weights}
        current = model.with_weights(params, weights)
        row = dict(step=step, lr=lr, batch_loss=res.loss, grad_norm=norm, clipped=norm > config.clip, val_loss=None)
        if step % config.val_period == 0 or step == n_steps:
            v = validation_loss(current, validation, config.loss_scale)
            row["val_loss"] = v
            if v < best_val:
                best_val, best_step, best = v, step, current
                if on_improve is not None:
                    on_improve(step, current)
            bad_checks = bad_checks + 1 if v > 10 * v0 else 0
            if bad_checks >= 3:
                rows.append(row)
                raise TrainingDiverged(f"validation loss {v:.4g} above 10x initial {v0:.4g} for 3 checks", rows)
            log.info("step %d lr %.4g val %.6g (best %.6g @ %d)", step, lr, v, best_val, best_step)
        rows.append(row)
    return TrainResult(best, rows, best_val, best_step)


def train(initial: GruParams, problems: ProblemSet, validation: ProblemSet,
          config: TrainConfig = TrainConfig(), seed: int = 0, on_improve: Callable | None = None) -> TrainResult:
    """Mini-batch SGD with clipping; returns the best parameters seen on validation."""
    return _sgd(initial, problems, validation, config, seed, on_improve)


def tune_pi(initial: PiParams, problems: ProblemSet, validation: ProblemSet,
            config: TrainConfig = TrainConfig(), seed: int = 0) -> TrainResult:
    """Tune the proportional and integral gains; the pacing curve stays fixed."""
    return _sgd(initial, problems, validation, config, seed)
