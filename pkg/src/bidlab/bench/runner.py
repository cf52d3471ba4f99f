"""End-to-end experiment pipelines: generate splits, train, evaluate, write reports."""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from ..controllers import GruParams, PiParams, fit_reference_curve, save_model
from ..landscape import ResponseTable
from ..training import TrainResult, fit_normalizers, reference_bid, train, tune_pi
from .datasets import (SimulatedMarket, assert_disjoint, gen_placement_days, gen_production_like_dataset,
                       gen_simulated_dataset)
from .experiments import (ExperimentReport, experiment_noise_cross, experiment_pi_vs_rnn,
                          experiment_shock_grid)

log = logging.getLogger(__name__)

# offsets added to root_seed * SEED_SPACING so each split draws its own stream
SEED_SPACING = 100
TRAIN, VAL, EVAL, INIT, PLACEMENTS = 1, 2, 3, 4, 5


def derived_seed(root: int, role: int) -> int:
    return root * SEED_SPACING + role


def train_gru(problems, validation, section, K: float, seed: int, out_dir: Path | None = None,
              name: str = "model") -> TrainResult:
    """GRU training with normalizers fitted on the training split; checkpoints on each improvement."""
    bid = reference_bid(problems) if section.warm_start else None
    init = GruParams.init(K, np.random.default_rng(seed), fit_normalizers(problems), section.init_scale,
                          section.update_bias, bid)
    on_improve = None
    if out_dir is not None:
        ckpt = out_dir / "checkpoints"
        ckpt.mkdir(parents=True, exist_ok=True)

        def on_improve(step, params):
            save_model(params, ckpt / f"{name}_step{step:06d}.txt")

    result = train(init, problems, validation, section.build(), seed=seed, on_improve=on_improve)
    if out_dir is not None:
        save_model(result.params, out_dir / f"{name}.txt")
        result.log_csv(out_dir / f"{name}_log.csv")
    return result


def _map(fn, jobs, threads: int):
    if threads <= 1 or len(jobs) <= 1:
        return [fn(*j) for j in jobs]
    with ProcessPoolExecutor(max_workers=min(threads, len(jobs))) as pool:
        return list(pool.map(fn, *zip(*jobs)))


def _train_simulated(sigma, market, n_train, n_val, section, root, out_dir, name):
    table = market.table()
    # common random numbers: every sigma shares the same standard normals
    tr = gen_simulated_dataset(sigma, n_train, market, derived_seed(root, TRAIN), table=table)
    va = gen_simulated_dataset(sigma, n_val, market, derived_seed(root, VAL), table=table)
    assert_disjoint(tr, va)
    log.info("training %s (sigma=%g, %d problems)", name, sigma, n_train)
    return train_gru(tr, va, section, market.K, derived_seed(root, INIT), out_dir, name).params


def run_shock_grid(cfg, out_dir: str | Path, threads: int = 1, models: dict | None = None) -> ExperimentReport:
    """Train one GRU per sigma (unless ``models`` is given) and evaluate the shock grid."""
    sec = cfg.shock_grid
    market: SimulatedMarket = cfg.simulated.build()
    out = Path(out_dir)
    mdir = out / "models"
    if models is None:
        jobs = [(s, market, sec.n_train, sec.n_val, sec.train, cfg.seed, mdir, f"sigma{s:g}") for s in sec.sigmas]
        models = dict(zip(sec.sigmas, _map(_train_simulated, jobs, threads)))
    report = experiment_shock_grid(models, sec.factors, market, sec.shock_start)
    report.write(out, "shock_grid")
    return report


def run_noise_cross(cfg, out_dir: str | Path, threads: int = 1, models: dict | None = None) -> ExperimentReport:
    sec = cfg.noise_cross
    market: SimulatedMarket = cfg.simulated.build()
    out = Path(out_dir)
    levels = {"low": sec.low, "high": sec.high}
    if models is None:
        jobs = [(s, market, sec.n_train, sec.n_val, sec.train, cfg.seed, out / "models", f"{k}")
                for k, s in levels.items()]
        models = dict(zip(levels, _map(_train_simulated, jobs, threads)))
    table = market.table()
    evals = {k: gen_simulated_dataset(s, sec.n_eval, market, derived_seed(cfg.seed, EVAL), table=table)
             for k, s in levels.items()}
    report = experiment_noise_cross(models, evals, sec.n_boot, derived_seed(cfg.seed, EVAL))
    report.write(out, "noise_cross")
    return report


def production_splits(cfg):
    """Placement-days for every configured day, one shared table, and the train/validation splits."""
    p = cfg.production
    m = p.build()
    days = gen_placement_days(m, p.n_placements, p.all_days, derived_seed(cfg.seed, PLACEMENTS))
    table = ResponseTable.build(days.processes, m.noise)
    sec = cfg.pi_vs_rnn
    tr = gen_production_like_dataset(m, days, sec.n_train, derived_seed(cfg.seed, TRAIN), table, days=p.train_days)
    va = gen_production_like_dataset(m, days, sec.n_val, derived_seed(cfg.seed, VAL), table, days=p.val_days)
    return m, days, table, tr, va


def pi_from_training(problems, theta_p: float, theta_i: float, K: float) -> PiParams:
    """Default-gain PI whose pacing curve is fitted to the training intensity curves."""
    return PiParams(theta_p, theta_i, fit_reference_curve(problems.intensity), K)


def run_pi_vs_rnn(cfg, out_dir: str | Path, threads: int = 1, models: tuple | None = None) -> ExperimentReport:
    sec = cfg.pi_vs_rnn
    out = Path(out_dir)
    m, days, table, tr, va = production_splits(cfg)
    if models is None:
        mdir = out / "models"
        pi0 = pi_from_training(tr, sec.pi_theta_p, sec.pi_theta_i, m.K)
        pi = tune_pi(pi0, tr, va, sec.pi_train.build(), seed=derived_seed(cfg.seed, INIT))
        mdir.mkdir(parents=True, exist_ok=True)
        save_model(pi.params, mdir / "pi.txt")
        pi.log_csv(mdir / "pi_log.csv")
        rnn = train_gru(tr, va, sec.train, m.K, derived_seed(cfg.seed, INIT), mdir, "rnn").params
        models = (pi.params, rnn)
    buckets = {}
    for k, goal in enumerate(sec.goals):
        ev = gen_production_like_dataset(m, days, sec.n_eval, derived_seed(cfg.seed, EVAL), table, goals=goal,
                                         days=cfg.production.eval_days)
        buckets[goal] = ev
    assert_disjoint(tr, va, buckets[sec.goals[0]])
    report = experiment_pi_vs_rnn(models[0], models[1], buckets, sec.n_boot, derived_seed(cfg.seed, EVAL))
    report.write(out, "pi_vs_rnn")
    return report
