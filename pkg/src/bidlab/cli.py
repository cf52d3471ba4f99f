"""``bidlab`` command line.

Exit codes: 0 success, 2 configuration or input error, 3 runtime abort.
The output root is ``--output-dir``, else ``$BIDLAB_OUTPUT_ROOT``, else the
config's ``output_dir``; each command writes below ``<root>/<command>``.
"""

from __future__ import annotations

import functools
import json
import logging
import os
import sys
import time
from pathlib import Path

import click
import numpy as np
import yaml
from pydantic import ValidationError

from .bench.datasets import (gen_placement_days, gen_production_like_dataset, gen_simulated_dataset,
                             load_dataset, save_dataset)
from .bench.experiments import ExperimentReport, initial_bids
from .bench.runner import (EVAL, INIT, PLACEMENTS, TRAIN, VAL, derived_seed, pi_from_training, run_noise_cross,
                           run_pi_vs_rnn, run_shock_grid, train_gru)
from .config import RunConfig, load_config
from .controllers import ModelFileError, controller_from_params, load_model, save_model
from .landscape import LandscapeProcess, ResponseTable
from .market import ConstantBid, Shock, VolumeScenario, run_episode
from .solvers import (CFLError, GaussianKernel, GaussianResponse, rollout_policy, solve_bellman, solve_pde)
from .training import TrainingDiverged, evaluate, tune_pi, write_training_log

ENV_OUTPUT_ROOT = "BIDLAB_OUTPUT_ROOT"
EXIT_CONFIG, EXIT_RUNTIME = 2, 3

log = logging.getLogger("bidlab")


class ConfigError(click.ClickException):
    exit_code = EXIT_CONFIG


class RuntimeAbort(click.ClickException):
    exit_code = EXIT_RUNTIME


def _parse_override(text: str):
    if "=" not in text:
        raise ConfigError(f"--set expects key=value, got {text!r}")
    key, value = text.split("=", 1)
    return key.strip(), yaml.safe_load(value)


class Context:
    def __init__(self, cfg: RunConfig, root: Path, threads: int):
        self.cfg = cfg
        self.root = root
        self.threads = threads

    def out(self, name: str) -> Path:
        """Create the command's output directory and echo the resolved config into it."""
        d = self.root / name
        try:
            d.mkdir(parents=True, exist_ok=True)
            (d / "resolved_config.yaml").write_text(self.cfg.to_yaml())
        except OSError as e:
            raise ConfigError(f"cannot write to {d}: {e}") from e
        return d


pass_ctx = click.make_pass_decorator(Context)


@click.group()
@click.option("--config", "config_path", type=click.Path(dir_okay=False), help="YAML run configuration.")
@click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE", help="Override a config key (dotted).")
@click.option("--output-dir", type=click.Path(file_okay=False), help="Output root (beats the env var).")
@click.option("--seed", type=int, help="Root seed.")
@click.option("--threads", type=click.IntRange(min=1), help="Cap on worker processes.")
@click.option("-v", "--verbose", is_flag=True)
@click.pass_context
def main(ctx, config_path, overrides, output_dir, seed, threads, verbose):
    """Bid-control laboratory: datasets, solvers, training and benchmark experiments."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(message)s")
    pairs = dict(_parse_override(o) for o in overrides)
    if seed is not None:
        pairs["seed"] = seed
    if threads is not None:
        pairs["threads"] = threads
    if config_path is not None and not Path(config_path).is_file():
        raise ConfigError(f"config file {config_path} not found")
    try:
        cfg = load_config(config_path, pairs)
    except (ValidationError, ValueError, yaml.YAMLError) as e:
        raise ConfigError(f"invalid configuration:\n{e}") from e
    root = Path(output_dir or os.environ.get(ENV_OUTPUT_ROOT) or cfg.output_dir)
    ctx.obj = Context(cfg, root, cfg.threads)


def _guard(fn):
    """Map library failures onto the documented exit codes."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except click.ClickException:
            raise
        except (FileNotFoundError, ModelFileError, CFLError) as e:
            raise ConfigError(str(e)) from e
        except ValueError as e:
            raise ConfigError(str(e)) from e
        except (TrainingDiverged, FloatingPointError, RuntimeError, MemoryError) as e:
            raise RuntimeAbort(str(e)) from e

    return wrapper


# ------------------------------------------------------------------ data


@main.command("gen-data")
@pass_ctx
@_guard
def gen_data(c: Context):
    """Generate train/validation/evaluation splits with a checksummed manifest."""
    cfg, sec = c.cfg, c.cfg.gen_data
    out = c.out("gen-data")
    if sec.kind == "simulated":
        m = cfg.simulated.build()
        table = m.table()
        splits = {name: gen_simulated_dataset(sec.sigma, n, m, derived_seed(cfg.seed, role), table=table)
                  for name, n, role in (("train", sec.n_train, TRAIN), ("val", sec.n_val, VAL),
                                        ("eval", sec.n_eval, EVAL))}
        manifest = save_dataset(out, "simulated", m, splits, cfg.seed)
    else:
        p = cfg.production
        m = p.build()
        days = gen_placement_days(m, p.n_placements, p.all_days, derived_seed(cfg.seed, PLACEMENTS))
        table = ResponseTable.build(days.processes, m.noise)
        splits = {name: gen_production_like_dataset(m, days, n, derived_seed(cfg.seed, role), table, days=d)
                  for name, n, role, d in (("train", sec.n_train, TRAIN, p.train_days),
                                           ("val", sec.n_val, VAL, p.val_days),
                                           ("eval", sec.n_eval, EVAL, p.eval_days))}
        manifest = save_dataset(out, "production", m, splits, cfg.seed, days)
    click.echo(f"wrote {len(manifest['files'])} files to {out}")


def _dataset(path):
    if path is None:
        raise ConfigError("--data is required (a directory written by gen-data)")
    try:
        return load_dataset(path)
    except FileNotFoundError as e:
        raise ConfigError(str(e)) from e


def _summary(trace) -> str:
    cost = trace.final_cost
    return (f"episodes {len(trace)}  mean cost {cost.mean():.4f}  "
            f"shortfall {np.mean(trace.total_volume < trace.goals):.3f}")


@main.command()
@click.option("--data", type=click.Path(file_okay=False), help="Dataset directory.")
@pass_ctx
@_guard
def train(c: Context, data):
    """Train a GRU controller on a dataset's train split."""
    manifest, splits = _dataset(data)
    out = c.out("train")
    t0 = time.time()
    try:
        res = train_gru(splits["train"], splits["val"], c.cfg.train, float(manifest["K"]),
                        derived_seed(c.cfg.seed, INIT), out, "model")
    except TrainingDiverged as e:
        write_training_log(e.log_rows, out / "model_log.csv")
        raise
    click.echo(f"best validation loss {res.best_val:.6g} at step {res.best_step} ({time.time() - t0:.1f}s)")
    if "eval" in splits:
        click.echo("eval: " + _summary(evaluate(res.params, splits["eval"])))


@main.command("tune-pi")
@click.option("--data", type=click.Path(file_okay=False), help="Dataset directory.")
@click.option("--theta-p", type=float, default=0.1, show_default=True)
@click.option("--theta-i", type=float, default=0.05, show_default=True)
@pass_ctx
@_guard
def tune_pi_cmd(c: Context, data, theta_p, theta_i):
    """Fit the pacing curve and tune the PI gains on a dataset."""
    manifest, splits = _dataset(data)
    out = c.out("tune-pi")
    pi0 = pi_from_training(splits["train"], theta_p, theta_i, float(manifest["K"]))
    res = tune_pi(pi0, splits["train"], splits["val"], c.cfg.train.build(), seed=derived_seed(c.cfg.seed, INIT))
    save_model(res.params, out / "pi.txt")
    res.log_csv(out / "pi_log.csv")
    click.echo(f"theta_p {res.params.theta_p:.6g} theta_i {res.params.theta_i:.6g} "
               f"(validation {res.best_val:.6g})")


# ------------------------------------------------------------------ solvers


@main.command()
@click.argument("solver", type=click.Choice(["dp", "pde"]))
@pass_ctx
@_guard
def solve(c: Context, solver):
    """Solve for the reference policy field with the DP or the PDE scheme."""
    s = c.cfg.solve
    out = c.out(f"solve-{solver}")
    resp = GaussianResponse(s.price_mean, s.price_sd)
    G = np.linspace(*s.G_range, s.n_G)
    H = np.linspace(*s.H_range, s.n_H)
    t0 = time.time()
    if solver == "dp":
        field = solve_bellman(s.T, G, H, resp, GaussianKernel(s.sigma, s.drift), s.K, np.linspace(0, s.K, s.n_bids))
    else:
        field = solve_pde(s.sigma, np.arange(s.T + 1.0), G, H, resp, s.K, s.substeps, s.courant)
    elapsed = time.time() - t0
    field.to_csv(out / "field.csv", s.decimate)
    tr = rollout_policy(field, np.full(s.T, s.rollout_H), s.rollout_goal, s.K, resp)
    tr.to_csv(out / "rollout.csv")
    summary = {"solver": solver, "seconds": round(elapsed, 3), "grid": [s.T + 1, s.n_G, s.n_H],
               "bid_min": float(field.bid.min()), "bid_max": float(field.bid.max()),
               "rollout_first_bid": float(tr.bid[0]), "rollout_drift": float(tr.bid.max() / max(tr.bid.min(), 1e-12) - 1),
               "rollout_cost": tr.final_cost}
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    click.echo(json.dumps(summary))


# ------------------------------------------------------------------ episodes and experiments


@main.command("run-episode")
@pass_ctx
@_guard
def run_episode_cmd(c: Context):
    """Run one simulated day with a constant bid or a saved model."""
    e, cfg = c.cfg.episode, c.cfg
    m = cfg.simulated.build()
    if e.controller == "model":
        if not e.model:
            raise ConfigError("episode.model must name a model file")
        ctrl = controller_from_params(load_model(e.model))
    else:
        ctrl = ConstantBid(e.bid, m.K)
    out = c.out("run-episode")
    scenario = VolumeScenario(m.base_curve(), vol=e.sigma, shocks=tuple(Shock(t, f) for t, f in e.shocks))
    trace = run_episode(ctrl, scenario, LandscapeProcess.constant(m.landscape()), m.goal, m.K, e.mode,
                        seed=derived_seed(cfg.seed, EVAL), noise=m.noise)
    trace.to_csv(out / "episode.csv")
    click.echo(f"final cost {trace.final_cost:.6g}  penalty {trace.penalty_paid:.6g}  volume {trace.total_volume:.6g}")


def _load_models(directory, names) -> dict:
    d = Path(directory)
    out = {}
    for key, name in names.items():
        path = d / f"{name}.txt"
        if not path.is_file():
            raise ConfigError(f"missing model file {path}")
        out[key] = load_model(path)
    return out


def _print_report(report: ExperimentReport):
    click.echo(f"{'cell':<28}{'mean_cost':>12}{'std':>11}{'shortfall':>10}{'n':>7}")
    for r in report.rows:
        click.echo(f"{r.cell:<28}{r.mean_cost:>12.4f}{r.std_cost:>11.4f}{r.shortfall_prob:>10.3f}{r.n:>7d}")
    for cmp in report.comparisons:
        click.echo(f"{cmp.comparison}: {cmp.estimate:.4f} [{cmp.ci_low:.4f}, {cmp.ci_high:.4f}]")


@main.command()
@click.argument("name", type=click.Choice(["shock-grid", "noise-cross", "pi-vs-rnn"]))
@click.option("--models", "models_dir", type=click.Path(file_okay=False),
              help="Evaluate saved models from this directory instead of training.")
@pass_ctx
@_guard
def experiment(c: Context, name, models_dir):
    """Train (or load) the models for an experiment and write its report."""
    out = c.out(name)
    cfg = c.cfg
    if name == "shock-grid":
        models = None
        if models_dir:
            models = _load_models(models_dir, {s: f"sigma{s:g}" for s in cfg.shock_grid.sigmas})
        report = run_shock_grid(cfg, out, c.threads, models)
        bids = initial_bids(report, sorted(cfg.shock_grid.sigmas))
        click.echo("initial bids by sigma: " + ", ".join(f"{s:g}:{b:.4f}" for s, b in zip(sorted(cfg.shock_grid.sigmas), bids)))
    elif name == "noise-cross":
        models = _load_models(models_dir, {"low": "low", "high": "high"}) if models_dir else None
        report = run_noise_cross(cfg, out, c.threads, models)
    else:
        models = None
        if models_dir:
            loaded = _load_models(models_dir, {"pi": "pi", "rnn": "rnn"})
            models = (loaded["pi"], loaded["rnn"])
        report = run_pi_vs_rnn(cfg, out, c.threads, models)
    _print_report(report)


@main.command()
@click.argument("directory", type=click.Path(file_okay=False))
@pass_ctx
@_guard
def report(c: Context, directory):
    """Summarize every report CSV found below a run directory."""
    paths = sorted(Path(directory).rglob("*_report.csv"))
    if not paths:
        raise ConfigError(f"no report CSVs under {directory}")
    for p in paths:
        click.echo(f"== {p}")
        rep = ExperimentReport.from_csv(p)
        cmp = p.with_name(p.name.replace("_report.csv", "_comparisons.csv"))
        _print_report(rep)
        if cmp.is_file():
            for line in cmp.read_text().splitlines()[1:]:
                click.echo("  " + line)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
