"""Run configuration: validated YAML sections with every default spelled out."""

from __future__ import annotations

from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .bench.datasets import ProductionMarket, SimulatedMarket
from .landscape import BidNoise
from .training import TrainConfig


class Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class NoiseSection(Section):
    family: Literal["dirac", "gamma", "lognormal"] = "gamma"
    shape: float = 4.0

    def build(self) -> BidNoise:
        return BidNoise(self.family, self.shape)


class TrainSection(Section):
    batch_size: int = Field(100, ge=1)
    lr0: float = Field(0.1, ge=0)
    decay: float = Field(0.5, ge=0)
    decay_steps: int = Field(400, ge=1)
    clip: float = Field(5.0, gt=0)
    val_period: int = Field(200, ge=1)
    # total problems presented; None is one pass over the training split
    max_problems: Optional[int] = Field(None, ge=1)
    loss_scale: Literal["goal", "none"] = "goal"
    init_scale: float = Field(0.1, gt=0)
    update_bias: float = -1.0
    # start the bid unit at the median constant pacing bid of the training split
    warm_start: bool = True

    def build(self) -> TrainConfig:
        return TrainConfig(self.batch_size, self.lr0, self.decay, self.decay_steps, self.clip, self.val_period,
                           self.max_problems, self.loss_scale)


class SimulatedSection(Section):
    T: int = Field(100, ge=1)
    base_level: float = Field(100.0, ge=0)
    base_slope: float = 0.0
    goal: float = Field(100.0, gt=0)
    K: float = Field(5.0, gt=0)
    price_median: float = Field(10.0, gt=0)
    price_log_sd: float = Field(1.0, gt=0)
    noise: NoiseSection = NoiseSection()

    def build(self) -> SimulatedMarket:
        return SimulatedMarket(self.T, self.base_level, self.base_slope, self.goal, self.K, self.price_median,
                               self.price_log_sd, self.noise.build())


class ProductionSection(Section):
    T: int = Field(288, ge=2)
    K: float = Field(5.0, gt=0)
    goal_range: tuple[float, float] = (10.0, 1000.0)
    price_median: float = Field(1.0, gt=0)
    price_level_sd: float = Field(0.6, ge=0)
    price_log_sd: float = Field(0.8, gt=0)
    price_walk_sd: float = Field(0.03, ge=0)
    daily_volume_median: float = Field(8000.0, gt=0)
    daily_volume_sd: float = Field(0.8, ge=0)
    min_daily_volume: float = Field(1000.0, ge=0)
    seasonality: float = Field(0.5, ge=0)
    second_harmonic: float = Field(0.15, ge=0)
    volume_walk_sd: float = Field(0.04, ge=0)
    shock_prob: float = Field(0.3, ge=0, le=1)
    noise: NoiseSection = NoiseSection()
    grid: tuple[float, float, int] = (0.01, 100.0, 100)
    n_placements: int = Field(60, ge=1)
    train_days: list[int] = [0, 1, 2, 3]
    val_days: list[int] = [4]
    eval_days: list[int] = [5]

    @field_validator("goal_range")
    @classmethod
    def _ordered(cls, v):
        if not 0 < v[0] <= v[1]:
            raise ValueError("goal_range must satisfy 0 < low <= high")
        return v

    @model_validator(mode="after")
    def _disjoint_days(self):
        sets = [set(self.train_days), set(self.val_days), set(self.eval_days)]
        if any(not s for s in sets):
            raise ValueError("every split needs at least one day")
        if sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2]:
            raise ValueError("train, validation and evaluation days must be disjoint")
        return self

    @property
    def all_days(self) -> list[int]:
        return sorted(set(self.train_days) | set(self.val_days) | set(self.eval_days))

    def build(self) -> ProductionMarket:
        return ProductionMarket(self.T, self.K, tuple(self.goal_range), self.price_median, self.price_level_sd,
                                self.price_log_sd, self.price_walk_sd, self.daily_volume_median,
                                self.daily_volume_sd, self.min_daily_volume, self.seasonality,
                                self.second_harmonic, self.volume_walk_sd, self.shock_prob, self.noise.build(),
                                tuple(self.grid))


class GenDataSection(Section):
    kind: Literal["simulated", "production"] = "simulated"
    sigma: float = Field(0.0, ge=0)
    n_train: int = Field(20_000, ge=1)
    n_val: int = Field(500, ge=1)
    n_eval: int = Field(2_000, ge=1)


class ShockGridSection(Section):
    sigmas: list[float] = [0.0, 0.2, 1.0, 5.0, 10.0]
    factors: list[float] = [1.0, 1.5, 2.0, 3.0, 5.0, 10.0]
    shock_start: int = Field(65, ge=0)
    n_train: int = Field(20_000, ge=1)
    n_val: int = Field(500, ge=1)
    train: TrainSection = TrainSection(max_problems=150_000)

    @field_validator("factors")
    @classmethod
    def _factors(cls, v):
        if any(f < 1 for f in v):
            raise ValueError("shock factors must be >= 1")
        return v


class NoiseCrossSection(Section):
    low: float = Field(0.1, ge=0)
    high: float = Field(10.0, ge=0)
    n_train: int = Field(20_000, ge=1)
    n_val: int = Field(500, ge=1)
    n_eval: int = Field(2_000, ge=1)
    n_boot: int = Field(2_000, ge=100)
    train: TrainSection = TrainSection(max_problems=150_000)


class PiVsRnnSection(Section):
    goals: list[float] = [100.0, 500.0, 1000.0, 1500.0]
    n_train: int = Field(20_000, ge=1)
    n_val: int = Field(300, ge=1)
    n_eval: int = Field(500, ge=1)
    n_boot: int = Field(2_000, ge=100)
    pi_theta_p: float = Field(0.1, gt=0)
    pi_theta_i: float = Field(0.05, gt=0)
    train: TrainSection = TrainSection(max_problems=100_000)
    pi_train: TrainSection = TrainSection(max_problems=40_000)


class SolveSection(Section):
    T: int = Field(100, ge=1)
    K: float = Field(5.0, gt=0)
    sigma: float = Field(0.0, ge=0)
    drift: float = 0.0
    price_mean: float = 2.0
    price_sd: float = Field(1.0, gt=0)
    G_range: tuple[float, float] = (-15.0, 3000.0)
    n_G: int = Field(200, ge=3)
    H_range: tuple[float, float] = (0.0, 150.0)
    n_H: int = Field(200, ge=2)
    n_bids: int = Field(101, ge=2)
    courant: float = Field(0.25, gt=0, le=1)
    substeps: Optional[int] = Field(None, ge=1)
    decimate: int = Field(1, ge=1)
    # rollout of the solved field along a constant intensity
    rollout_H: float = Field(50.0, ge=0)
    rollout_goal: float = Field(2500.0, ge=0)

    @model_validator(mode="after")
    def _grids(self):
        if not self.G_range[0] < 0 < self.G_range[1]:
            raise ValueError("G_range must straddle zero")
        if not 0 <= self.H_range[0] < self.H_range[1]:
            raise ValueError("H_range must be increasing and non-negative")
        return self


class EpisodeSection(Section):
    controller: Literal["constant", "model"] = "constant"
    bid: float = Field(1.0, ge=0)
    model: Optional[str] = None
    sigma: float = Field(0.0, ge=0)
    shocks: list[tuple[int, float]] = []
    mode: Literal["expected", "sampled"] = "expected"


class RunConfig(Section):
    """One file configures every command; each command reads its own section."""

    seed: int = Field(0, ge=0)
    output_dir: str = "runs"
    threads: int = Field(1, ge=1)
    simulated: SimulatedSection = SimulatedSection()
    production: ProductionSection = ProductionSection()
    train: TrainSection = TrainSection()
    gen_data: GenDataSection = GenDataSection()
    shock_grid: ShockGridSection = ShockGridSection()
    noise_cross: NoiseCrossSection = NoiseCrossSection()
    pi_vs_rnn: PiVsRnnSection = PiVsRnnSection()
    solve: SolveSection = SolveSection()
    episode: EpisodeSection = EpisodeSection()

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.model_dump(mode="json"), sort_keys=False)


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> RunConfig:
    """Read a YAML file (or start from defaults) and apply dotted-key overrides."""
    data: dict = {}
    if path is not None:
        loaded = yaml.safe_load(Path(path).read_text())
        if loaded is not None and not isinstance(loaded, dict):
            raise ValueError(f"{path}: top level must be a mapping")
        data = loaded or {}
    for key, value in (overrides or {}).items():
        node = data
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ValueError(f"override {key!r} descends into a scalar")
        node[parts[-1]] = value
    return RunConfig.model_validate(data)
