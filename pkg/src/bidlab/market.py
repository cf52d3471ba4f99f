"""Volume scenarios and the periodic bid/feedback loop."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np

from .landscape import DIRAC, BidLandscape, BidNoise, LandscapeProcess, ResponseTable

Rate = float | Callable[[int, np.ndarray], np.ndarray]


def _rate(value: Rate, t: int, h):
    return value(t, h) if callable(value) else value


@dataclass(frozen=True)
class Shock:
    start: int
    factor: float

    def __post_init__(self):
        if self.factor < 1:
            raise ValueError(f"shock factor must be >= 1, got {self.factor}")


@dataclass
class VolumeScenario:
    """Per-period intensity path: base curve plus a clamped Euler random walk.

    ``drift`` and ``vol`` are per period (the period length is the time unit)
    and may be callables of ``(t, H)``.  The walk follows the base curve's
    increments, so with ``vol == 0`` and ``drift == 0`` the path is the base
    curve itself.
    """

    base_curve: np.ndarray
    drift: Rate = 0.0
    vol: Rate = 0.0
    shocks: Sequence[Shock] = field(default_factory=tuple)

    def __post_init__(self):
        self.base_curve = np.asarray(self.base_curve, dtype=float)
        if self.base_curve.ndim != 1 or self.base_curve.size < 1:
            raise ValueError("base_curve must be a non-empty 1-d array")
        if np.any(self.base_curve < 0):
            raise ValueError("base_curve values must be non-negative")
        self.shocks = tuple(s if isinstance(s, Shock) else Shock(*s) for s in self.shocks)

    @property
    def T(self) -> int:
        return self.base_curve.size

    @classmethod
    def constant(cls, level: float, T: int, **kw) -> "VolumeScenario":
        return cls(np.full(T, float(level)), **kw)

    @classmethod
    def linear(cls, start: float, end: float, T: int, **kw) -> "VolumeScenario":
        return cls(np.linspace(start, end, T), **kw)

    @property
    def deterministic(self) -> bool:
        return not callable(self.vol) and self.vol == 0

    def paths(self, n: int, rng: np.random.Generator | None = None, draws: np.ndarray | None = None) -> np.ndarray:
        """``n`` intensity paths of shape ``(n, T)`` with shocks applied.

        ``draws`` (shape ``(n, T - 1)``) overrides the standard normals so that
        scenarios differing only in ``vol`` can share their noise.
        """
        T = self.T
        if draws is None:
            if rng is None and not self.deterministic:
                raise ValueError("a random generator is needed for a noisy scenario")
            draws = rng.standard_normal((n, T - 1)) if rng is not None else np.zeros((n, T - 1))
        h = np.empty((n, T))
        h[:, 0] = self.base_curve[0]
        slope = np.diff(self.base_curve)
        for t in range(T - 1):
            mu = slope[t] + _rate(self.drift, t, h[:, t])
            h[:, t + 1] = step_volume(h[:, t], t, mu, _rate(self.vol, t, h[:, t]), draws[:, t])
        for t in range(T):
            h[:, t] = apply_shock(h[:, t], t, self.shocks)
        return h


def step_volume(H, t: int, drift, vol, rng_draw, dt: float = 1.0):
    """One Euler step of the intensity walk, clamped at zero."""
    out = np.maximum(np.asarray(H, dtype=float) + drift * dt + vol * math.sqrt(dt) * np.asarray(rng_draw), 0.0)
    return float(out) if out.ndim == 0 else out


def apply_shock(intensity, t: int, shocks: Sequence[Shock | tuple]):
    """Divide the intensity by every shock factor whose start period has passed."""
    factor = 1.0
    for s in shocks:
        s = s if isinstance(s, Shock) else Shock(*s)
        if t >= s.start:
            factor *= s.factor
    out = np.asarray(intensity, dtype=float) / factor
    return float(out) if out.ndim == 0 else out


@dataclass
class Observation:
    """What a controller sees at the start of a period (arrays over the batch)."""

    period: int
    remaining_periods: int
    remaining_goal: np.ndarray
    last_volume: np.ndarray
    last_spend: np.ndarray

    @property
    def horizon(self) -> int:
        return self.period + self.remaining_periods


class Controller(Protocol):
    K: float

    def initial_state(self, goals: np.ndarray, horizon: int) -> np.ndarray: ...

    def act(self, state: np.ndarray, obs: Observation) -> tuple[np.ndarray, np.ndarray]: ...


class ConstantBid:
    """Open-loop controller bidding one level every period."""

    def __init__(self, bid: float, K: float = math.inf):
        self.bid = float(bid)
        self.K = K

    def initial_state(self, goals, horizon):
        return np.zeros((len(goals), 0))

    def act(self, state, obs):
        return np.full(obs.remaining_goal.shape, self.bid), state


class ControllerError(RuntimeError):
    pass


@dataclass
class EpisodeTrace:
    bid: np.ndarray
    volume: np.ndarray
    spend: np.ndarray
    remaining_goal: np.ndarray
    goal: float
    penalty: float

    @property
    def T(self) -> int:
        return self.bid.size

    @property
    def total_volume(self) -> float:
        return float(self.volume.sum())

    @property
    def total_spend(self) -> float:
        return float(self.spend.sum())

    @property
    def shortfall(self) -> float:
        return max(0.0, self.goal - self.total_volume)

    @property
    def penalty_paid(self) -> float:
        return self.penalty * self.shortfall

    @property
    def final_cost(self) -> float:
        return final_cost(self, self.goal, self.penalty)

    def to_csv(self, path: str | Path | None = None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "bid", "volume", "spend", "remaining_goal"])
        for t in range(self.T):
            w.writerow([t, repr(float(self.bid[t])), repr(float(self.volume[t])),
                        repr(float(self.spend[t])), repr(float(self.remaining_goal[t]))])
        w.writerow(["final_cost", repr(self.final_cost), "penalty_paid", repr(self.penalty_paid)])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text


def final_cost(trace: EpisodeTrace, goal: float, penalty: float) -> float:
    """Total spend plus the linear penalty on any shortfall."""
    return float(trace.spend.sum()) + penalty * max(0.0, goal - float(trace.volume.sum()))


@dataclass
class BatchTrace:
    """Traces of ``B`` episodes stacked as ``(B, T)`` arrays."""

    bid: np.ndarray
    volume: np.ndarray
    spend: np.ndarray
    remaining_goal: np.ndarray
    goals: np.ndarray
    penalty: float

    def __len__(self) -> int:
        return self.bid.shape[0]

    @property
    def total_volume(self) -> np.ndarray:
        return self.volume.sum(axis=1)

    @property
    def total_spend(self) -> np.ndarray:
        return self.spend.sum(axis=1)

    @property
    def penalty_paid(self) -> np.ndarray:
        return self.penalty * np.maximum(0.0, self.goals - self.total_volume)

    @property
    def final_cost(self) -> np.ndarray:
        return self.total_spend + self.penalty_paid

    def episode(self, i: int) -> EpisodeTrace:
        return EpisodeTrace(self.bid[i], self.volume[i], self.spend[i], self.remaining_goal[i],
                            float(self.goals[i]), self.penalty)


def _sampled_response(rng, table: ResponseTable, rows, t, intensity, bids):
    """Poisson impression counts, each won when the randomized bid reaches the competing bid."""
    grid = table.grid
    pdf = table.pdf[rows, min(t, table.n_periods - 1)]
    counts = rng.poisson(intensity)
    vol = np.zeros(len(bids))
    spend = np.zeros(len(bids))
    for i, n in enumerate(counts):
        if n == 0:
            continue
        k = rng.choice(grid.n_bins, size=n, p=pdf[i] / pdf[i].sum())
        price = grid.edges[k]
        ours = table.noise.sample(rng, bids[i], size=n)
        won = ours >= price
        vol[i] = won.sum()
        spend[i] = price[won].sum()
    return vol, spend


def simulate_batch(controller: Controller, intensity: np.ndarray, table: ResponseTable, goals,
                   penalty: float, rows=None, mode: str = "expected",
                   rng: np.random.Generator | None = None) -> BatchTrace:
    """Run ``B`` episodes in lock-step; ``intensity`` has shape ``(B, T)``."""
    if mode not in ("expected", "sampled"):
        raise ValueError(f"unknown mode {mode!r}")
    if not penalty > 0:
        raise ValueError("penalty must be positive")
    intensity = np.atleast_2d(np.asarray(intensity, dtype=float))
    B, T = intensity.shape
    goals = np.broadcast_to(np.asarray(goals, dtype=float), (B,)).copy()
    if np.any(goals < 0):
        raise ValueError("goals must be non-negative")
    rows = np.zeros(B, dtype=int) if rows is None else np.asarray(rows)
    if mode == "sampled" and rng is None:
        raise ValueError("sampled mode needs a random generator")
    bids = np.zeros((B, T))
    vol = np.zeros((B, T))
    spend = np.zeros((B, T))
    remaining = np.zeros((B, T))
    g = goals.copy()
    last_v = np.zeros(B)
    last_s = np.zeros(B)
    state = controller.initial_state(goals, T)
    for t in range(T):
        remaining[:, t] = g
        obs = Observation(t, T - t, g.copy(), last_v, last_s)
        a, state = controller.act(state, obs)
        a = np.asarray(a, dtype=float)
        if np.any(np.isnan(a)) or np.any(a < 0):
            bad = int(np.flatnonzero(np.isnan(a) | (a < 0))[0])
            raise ControllerError(f"controller emitted invalid bid {a[bad]!r} at period {t} (episode {bad})")
        if mode == "expected":
            w, s, _, _ = table.lookup(a, t, rows)
            v_t, s_t = intensity[:, t] * w, intensity[:, t] * s
        else:
            v_t, s_t = _sampled_response(rng, table, rows, t, intensity[:, t], a)
        bids[:, t], vol[:, t], spend[:, t] = a, v_t, s_t
        g = g - v_t
        last_v, last_s = v_t, s_t
    return BatchTrace(bids, vol, spend, remaining, goals, penalty)


def run_episode(controller: Controller, scenario: VolumeScenario,
                landscape_process: BidLandscape | LandscapeProcess, goal: float, penalty: float,
                mode: str = "expected", seed: int = 0, noise: BidNoise = DIRAC) -> EpisodeTrace:
    """Simulate one day; randomness (volume walk, sampled wins) comes from ``seed``."""
    if goal < 0:
        raise ValueError("goal must be non-negative")
    if isinstance(landscape_process, BidLandscape):
        if landscape_process.smoothed:
            raise ValueError("pass the raw landscape and a BidNoise; smoothing is applied here")
        landscape_process = LandscapeProcess.constant(landscape_process)
    rng = np.random.default_rng(seed)
    intensity = scenario.paths(1, rng if not scenario.deterministic else None)
    table = ResponseTable.build([landscape_process], noise)
    batch = simulate_batch(controller, intensity, table, goal, penalty, mode=mode, rng=rng)
    return batch.episode(0)
