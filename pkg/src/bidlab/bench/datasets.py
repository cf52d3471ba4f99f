"""Synthetic problem streams: the simulated study and a production-like market."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from ..landscape import (BidLandscape, BidNoise, LandscapeProcess, PriceGrid, ResponseTable,
                         lognormal_landscape, make_price_grid)
from ..market import Shock, VolumeScenario
from ..training import ProblemSet

# problem ids are seed * ID_STRIDE + index, so splits drawn with different seeds never collide
ID_STRIDE = 10_000_000


@dataclass(frozen=True)
class SimulatedMarket:
    """Fixed log-normal landscape and a linear base volume curve."""

    T: int = 100
    base_level: float = 100.0
    base_slope: float = 0.0
    goal: float = 100.0
    K: float = 5.0
    price_median: float = 10.0
    price_log_sd: float = 1.0
    noise: BidNoise = BidNoise("gamma", 4.0)

    def landscape(self, grid: PriceGrid | None = None) -> BidLandscape:
        return lognormal_landscape(grid or make_price_grid(), self.price_median, self.price_log_sd)

    def base_curve(self) -> np.ndarray:
        return np.maximum(self.base_level + self.base_slope * np.arange(self.T), 0.0)

    def table(self) -> ResponseTable:
        return ResponseTable.build([LandscapeProcess.constant(self.landscape())], self.noise)


def gen_simulated_dataset(sigma: float, n_problems: int, market: SimulatedMarket = SimulatedMarket(),
                          seed: int = 0, shocks=(), table: ResponseTable | None = None) -> ProblemSet:
    """Random-walk perturbations of the base curve with volatility ``sigma`` per period.

    The standard normals depend only on ``seed``, so datasets that differ only
    in ``sigma`` share their noise.
    """
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    rng = np.random.default_rng(seed)
    draws = rng.standard_normal((n_problems, market.T - 1))
    scenario = VolumeScenario(market.base_curve(), vol=float(sigma), shocks=tuple(shocks))
    paths = scenario.paths(n_problems, draws=draws)
    table = table or market.table()
    ids = seed * ID_STRIDE + np.arange(n_problems)
    return ProblemSet(paths, market.goal, table, market.K, ids=ids)


def shocked_problem(market: SimulatedMarket, factor: float, start: int = 65,
                    table: ResponseTable | None = None) -> ProblemSet:
    """The noiseless base path with a permanent volume shock from period ``start``."""
    scenario = VolumeScenario(market.base_curve(), shocks=(Shock(start, factor),))
    return ProblemSet(scenario.paths(1), market.goal, table or market.table(), market.K,
                      ids=np.array([-1]))


# ------------------------------------------------------------------ production-like market

@dataclass(frozen=True)
class ProductionMarket:
    """Generator settings for placement-day landscape processes.

    Each placement has a log-normal price level and a daily volume; each
    placement-day adds an intraday seasonality phase, a random-walk drift in
    the log price and occasional volume shocks.
    """

    T: int = 288
    K: float = 5.0
    goal_range: tuple = (10.0, 1000.0)
    price_median: float = 1.0
    price_level_sd: float = 0.6
    price_log_sd: float = 0.8
    price_walk_sd: float = 0.03
    daily_volume_median: float = 8000.0
    daily_volume_sd: float = 0.8
    min_daily_volume: float = 1000.0
    seasonality: float = 0.5
    second_harmonic: float = 0.15
    volume_walk_sd: float = 0.04
    shock_prob: float = 0.3
    noise: BidNoise = BidNoise("gamma", 4.0)
    grid: tuple = (0.01, 100.0, 100)

    def price_grid(self) -> PriceGrid:
        return make_price_grid(*self.grid)


@dataclass
class PlacementDays:
    """Landscape processes and intensity curves for placement-days."""

    processes: list
    intensity: np.ndarray
    placement: np.ndarray
    day: np.ndarray

    def __len__(self) -> int:
        return len(self.processes)


def _placement_day(rng, m: ProductionMarket, grid: PriceGrid, level: float, volume: float):
    T = m.T
    t = np.arange(T)
    phase = rng.normal(0.0, 0.3)
    season = (1.0 + m.seasonality * np.cos(2 * np.pi * t / T + np.pi + phase)
              + m.second_harmonic * np.cos(4 * np.pi * t / T + rng.normal(0.0, 0.3)))
    log_walk = np.cumsum(rng.normal(0.0, m.volume_walk_sd, T))
    intensity = np.maximum(season, 0.05) * np.exp(log_walk)
    if rng.random() < m.shock_prob:
        start = rng.integers(T // 4, T)
        intensity[start:] /= rng.uniform(1.5, 4.0)
    intensity *= volume / intensity.sum()
    price_walk = np.cumsum(rng.normal(0.0, m.price_walk_sd, T))
    price_season = 0.15 * np.cos(2 * np.pi * t / T + phase)
    medians = level * np.exp(price_walk + price_season)
    upper = grid.edges * np.sqrt(grid.ratio)
    cdfs = stats.norm.cdf(np.log(upper[None, :] / medians[:, None]) / m.price_log_sd)
    cdfs[:, -1] = 1.0
    return LandscapeProcess(grid, cdfs), intensity


def gen_placement_days(m: ProductionMarket, n_placements: int, days, seed: int) -> PlacementDays:
    """Placement-days for the given day indices; placements are fixed by ``seed``."""
    if n_placements < 1:
        raise ValueError("n_placements must be at least 1")
    grid = m.price_grid()
    prng = np.random.default_rng(seed)
    levels = m.price_median * np.exp(prng.normal(0.0, m.price_level_sd, n_placements))
    volumes = np.maximum(m.daily_volume_median * np.exp(prng.normal(0.0, m.daily_volume_sd, n_placements)),
                         m.min_daily_volume)
    processes, curves, place, dayv = [], [], [], []
    for d in days:
        for p in range(n_placements):
            rng = np.random.default_rng([seed, int(d), p])
            vol_today = volumes[p] * np.exp(rng.normal(0.0, 0.2))
            proc, curve = _placement_day(rng, m, grid, levels[p], vol_today)
            processes.append(proc)
            curves.append(curve)
            place.append(p)
            dayv.append(int(d))
    return PlacementDays(processes, np.array(curves), np.array(place), np.array(dayv))


def gen_production_like_dataset(m: ProductionMarket, placement_days: PlacementDays, n_problems: int,
                                seed: int, table: ResponseTable | None = None,
                                goals=None, days=None) -> ProblemSet:
    """Pair random placement-days with goals uniform on ``goal_range`` (or fixed ``goals``).

    ``days`` restricts the draw to those day indices, which keeps splits apart.
    """
    lo, hi = m.goal_range
    rng = np.random.default_rng(seed)
    pool = np.arange(len(placement_days)) if days is None else np.flatnonzero(np.isin(placement_days.day, days))
    if pool.size == 0:
        raise ValueError("no placement-days match the requested days")
    rows = pool[rng.integers(0, pool.size, n_problems)]
    drawn = rng.uniform(lo, hi, n_problems)
    goals = drawn if goals is None else np.broadcast_to(np.asarray(goals, dtype=float), (n_problems,))
    table = table or ResponseTable.build(placement_days.processes, m.noise)
    ids = seed * ID_STRIDE + np.arange(n_problems)
    return ProblemSet(placement_days.intensity[rows], goals, table, m.K, rows=rows, ids=ids)


def assert_disjoint(*splits: ProblemSet) -> None:
    seen: set = set()
    for s in splits:
        ids = set(np.asarray(s.ids).tolist())
        overlap = seen & ids
        if overlap:
            raise AssertionError(f"{len(overlap)} problem ids shared between splits")
        seen |= ids


def write_placement_days(pd: PlacementDays, out_dir: str | Path) -> dict:
    """Landscape CSVs plus intensity curves; returns a manifest with checksums."""
    out = Path(out_dir)
    (out / "landscapes").mkdir(parents=True, exist_ok=True)
    files = {}
    for i, proc in enumerate(pd.processes):
        name = f"landscapes/day{pd.day[i]:02d}_placement{pd.placement[i]:04d}.csv"
        text = proc.to_csv(out / name)
        files[name] = hashlib.sha256(text.encode()).hexdigest()
    lines = ["row,day,placement," + ",".join(f"I{t}" for t in range(pd.intensity.shape[1]))]
    for i in range(len(pd)):
        lines.append(f"{i},{pd.day[i]},{pd.placement[i]}," + ",".join(repr(float(v)) for v in pd.intensity[i]))
    text = "\n".join(lines) + "\n"
    (out / "intensity.csv").write_text(text)
    files["intensity.csv"] = hashlib.sha256(text.encode()).hexdigest()
    return files


def read_placement_days(out_dir: str | Path) -> PlacementDays:
    out = Path(out_dir)
    rows = (out / "intensity.csv").read_text().splitlines()[1:]
    processes, curves, place, dayv = [], [], [], []
    for r in rows:
        parts = r.split(",")
        d, p = int(parts[1]), int(parts[2])
        processes.append(LandscapeProcess.from_csv(out / f"landscapes/day{d:02d}_placement{p:04d}.csv"))
        curves.append([float(v) for v in parts[3:]])
        place.append(p)
        dayv.append(d)
    return PlacementDays(processes, np.array(curves), np.array(place), np.array(dayv))


PROBLEM_HEADER = ("id", "row", "goal")


def write_problems(problems: ProblemSet, path: str | Path) -> str:
    """``id,row,goal,I0..I{T-1}``; returns the sha256 of the file text."""
    lines = [",".join(PROBLEM_HEADER + tuple(f"I{t}" for t in range(problems.T)))]
    for i in range(len(problems)):
        vals = ",".join(repr(float(v)) for v in problems.intensity[i])
        lines.append(f"{int(problems.ids[i])},{int(problems.rows[i])},{float(problems.goals[i])!r},{vals}")
    text = "\n".join(lines) + "\n"
    Path(path).write_text(text)
    return hashlib.sha256(text.encode()).hexdigest()


def read_problems(path: str | Path, table: ResponseTable, K: float) -> ProblemSet:
    lines = Path(path).read_text().splitlines()[1:]
    parts = [ln.split(",") for ln in lines]
    ids = np.array([int(p[0]) for p in parts], dtype=np.int64)
    rows = np.array([int(p[1]) for p in parts], dtype=int)
    values = np.array([[float(v) for v in p[2:]] for p in parts])
    return ProblemSet(values[:, 1:], values[:, 0], table, K, rows=rows, ids=ids)


def manifest_text(payload: dict) -> str:
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def market_dict(m) -> dict:
    d = asdict(m)
    return json.loads(json.dumps(d, default=str))


SPLITS = ("train", "val", "eval")


def save_dataset(out_dir: str | Path, kind: str, market, splits: dict, seed: int,
                 placement_days: PlacementDays | None = None) -> dict:
    """Write landscapes, one problem CSV per split and ``manifest.json`` with checksums."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if kind == "simulated":
        text = LandscapeProcess.constant(market.landscape()).to_csv(out / "landscape.csv")
        files = {"landscape.csv": hashlib.sha256(text.encode()).hexdigest()}
    elif kind == "production":
        files = write_placement_days(placement_days, out)
    else:
        raise ValueError(f"unknown dataset kind {kind!r}")
    for name, problems in splits.items():
        files[f"problems_{name}.csv"] = write_problems(problems, out / f"problems_{name}.csv")
    assert_disjoint(*splits.values())
    noise = market.noise
    manifest = {"kind": kind, "seed": seed, "K": market.K, "noise": {"family": noise.family, "shape": noise.shape},
                "market": market_dict(market), "splits": {k: len(v) for k, v in splits.items()}, "files": files}
    (out / "manifest.json").write_text(manifest_text(manifest))
    return manifest


def load_dataset(path: str | Path) -> tuple[dict, dict]:
    """Read a dataset directory back into ``(manifest, {split: ProblemSet})``."""
    root = Path(path)
    if not (root / "manifest.json").is_file():
        raise FileNotFoundError(f"{root}: no manifest.json (not a dataset directory)")
    manifest = json.loads((root / "manifest.json").read_text())
    noise = BidNoise(manifest["noise"]["family"], float(manifest["noise"]["shape"]))
    if manifest["kind"] == "simulated":
        processes = [LandscapeProcess.from_csv(root / "landscape.csv")]
    else:
        processes = read_placement_days(root).processes
    table = ResponseTable.build(processes, noise)
    splits = {name: read_problems(root / f"problems_{name}.csv", table, float(manifest["K"]))
              for name in manifest["splits"]}
    return manifest, splits
