"""Bid controllers: a PI tracker of a harmonic pacing curve and a GRU.

Both act on whole batches: observations hold one entry per episode and the
controller state is a ``(batch, dim)`` array.  The GRU also has a tape
version of its step (:func:`gru_step_tape`) used for training; the two are
kept numerically identical.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .autodiff import Node, Tape
from .market import Observation

STATE_DIM = 16
INPUT_DIM = 4
# subtracted from the scaled inputs so a steady, evenly paced day sits near zero
# input; the offsets fold into the biases, so only the SGD geometry changes
FEATURE_CENTER = np.array([0.5, 0.5, 1.0, 1.0])
GRU_PARAM_NAMES = ("W_z", "U_z", "b_z", "W_r", "U_r", "b_r", "W_n", "U_n", "b_n", "h0")


class ModelFileError(ValueError):
    pass


# ---------------------------------------------------------------- reference curve

def harmonic_weights(T: int, harmonics) -> np.ndarray:
    """Rectified two-harmonic intraday profile ``w_t`` for ``t = 0..T-1``."""
    c0, c1, p1, c2, p2 = harmonics
    t = np.arange(T)
    w = c0 + c1 * np.cos(2 * np.pi * t / T + p1) + c2 * np.cos(4 * np.pi * t / T + p2)
    return np.maximum(w, 0.0)


def _tail_sums(w: np.ndarray) -> np.ndarray:
    return np.cumsum(w[::-1])[::-1]


def reference_volume(t: int, remaining_goal, harmonics, T: int):
    """Share of the remaining goal targeted for period ``t``.

    Falls back to a uniform split when every remaining weight is zero.
    """
    if not 0 <= t < T:
        raise ValueError(f"period {t} outside horizon {T}")
    w = harmonic_weights(T, harmonics)
    tail = w[t:].sum()
    share = w[t] / tail if tail > 0 else 1.0 / (T - t)
    out = np.maximum(np.asarray(remaining_goal, dtype=float), 0.0) * share
    return float(out) if out.ndim == 0 else out


def reference_shares(T: int, harmonics) -> np.ndarray:
    w = harmonic_weights(T, harmonics)
    tail = _tail_sums(w)
    uniform = 1.0 / (T - np.arange(T))
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(tail > 0, w / np.where(tail > 0, tail, 1.0), uniform)


def fit_reference_curve(curves, normalize: bool = True) -> tuple[float, float, float, float, float]:
    """Least-squares two-harmonic fit ``(c0, c1, phi1, c2, phi2)`` to the mean curve.

    With ``normalize`` each curve is first divided by its own mean, so every
    training day weighs the same regardless of its volume.
    """
    curves = np.atleast_2d(np.asarray(curves, dtype=float))
    if curves.size == 0 or curves.shape[1] == 0:
        raise ValueError("need at least one non-empty curve")
    if normalize:
        means = curves.mean(axis=1, keepdims=True)
        if np.any(means <= 0):
            raise ValueError("curves must have positive mean to be normalized")
        curves = curves / means
    target = curves.mean(axis=0)
    T = target.size
    x = 2 * np.pi * np.arange(T) / T
    basis = np.column_stack([np.ones(T), np.cos(x), np.sin(x), np.cos(2 * x), np.sin(2 * x)])
    coef, *_ = np.linalg.lstsq(basis, target, rcond=None)
    c0, a1, b1, a2, b2 = coef
    # a cos x + b sin x == c cos(x + phi) with c = hypot(a, b), phi = atan2(-b, a)
    return (float(c0), float(math.hypot(a1, b1)), float(math.atan2(-b1, a1)),
            float(math.hypot(a2, b2)), float(math.atan2(-b2, a2)))


# ---------------------------------------------------------------- PI controller

@dataclass
class PiParams:
    theta_p: float = 0.1
    theta_i: float = 0.05
    harmonics: tuple = (1.0, 0.0, 0.0, 0.0, 0.0)
    K: float = 5.0
    # divide tracking errors by the initial per-period required volume G_0 / T
    normalize_error: bool = True


def pi_act(state: np.ndarray, obs: Observation, params: PiParams, t: int | None = None):
    """One PI update with conditional integration.

    State columns: last error, integral, last control, error scale.  The
    integral is left unchanged whenever the raw control saturates.
    """
    t = obs.period if t is None else t
    T = obs.horizon
    r = reference_volume(t, obs.remaining_goal, params.harmonics, T)
    scale = state[:, 3]
    e = (r - obs.last_volume) / scale
    integral = state[:, 1] + e
    raw = params.theta_p * e + params.theta_i * integral
    saturated = (raw < 0) | (raw > params.K)
    integral = np.where(saturated, state[:, 1], integral)
    bid = np.clip(raw, 0.0, params.K)
    new = np.column_stack([e, integral, bid, scale])
    return bid, new


class PIController:
    def __init__(self, params: PiParams):
        self.params = params
        self.K = params.K

    def initial_state(self, goals, horizon: int) -> np.ndarray:
        goals = np.asarray(goals, dtype=float)
        state = np.zeros((goals.size, 4))
        state[:, 3] = np.maximum(goals, 1e-12) / horizon if self.params.normalize_error else 1.0
        return state

    def act(self, state, obs):
        return pi_act(state, obs, self.params)

    def save(self, path: str | Path) -> None:
        save_model(self.params, path)


def pi_episode_tape(tape: Tape, gains: dict[str, Node], params: PiParams, intensity: np.ndarray,
                    lookup, goals: np.ndarray) -> tuple[Node, Node, Node]:
    """Differentiable unroll of the PI controller over ``intensity`` (B, T).

    ``lookup(bid_node, t)`` returns ``(volume_fraction, spend_fraction)``
    nodes.  Returns ``(total_spend, total_volume, bids)`` node triples where
    ``bids`` is only the last period's bid (kept for inspection).
    """
    B, T = intensity.shape
    shares = reference_shares(T, params.harmonics)
    scale = np.maximum(goals, 1e-12) / T if params.normalize_error else np.ones(B)
    inv_scale = 1.0 / scale
    g = tape.const(goals)
    integral = tape.const(np.zeros(B))
    last_v = tape.const(np.zeros(B))
    spend_total = tape.const(np.zeros(B))
    vol_total = tape.const(np.zeros(B))
    theta_p, theta_i = gains["theta_p"], gains["theta_i"]
    bid = None
    for t in range(T):
        r = tape.affine(tape.maximum(g, 0.0), shares[t], 0.0)
        e = tape.affine(r - last_v, inv_scale, 0.0)
        cand = integral + e
        raw = theta_p * e + theta_i * cand
        integral = integral + tape.gate(e, raw, 0.0, params.K)
        bid = tape.minimum(tape.maximum(raw, 0.0), params.K)
        win, spend = lookup(bid, t)
        v = tape.affine(win, intensity[:, t], 0.0)
        s = tape.affine(spend, intensity[:, t], 0.0)
        spend_total = spend_total + s
        vol_total = vol_total + v
        g = g - v
        last_v = v
    return spend_total, vol_total, bid


# ---------------------------------------------------------------- GRU controller

@dataclass
class Normalizers:
    """Input scales: goal, per-period volume, and price (spend = volume * price)."""

    goal: float = 100.0
    volume: float = 1.0
    price: float = 1.0

    def features(self, obs: Observation) -> np.ndarray:
        T = obs.horizon
        n = obs.remaining_goal.shape[0]
        return np.column_stack([
            np.full(n, obs.remaining_periods / T),
            obs.remaining_goal / self.goal,
            obs.last_volume / self.volume,
            obs.last_spend / (self.volume * self.price),
        ]) - FEATURE_CENTER


@dataclass
class GruParams:
    weights: dict
    K: float
    normalizers: Normalizers = field(default_factory=Normalizers)

    @classmethod
    def init(cls, K: float, rng: np.random.Generator, normalizers: Normalizers | None = None,
             scale: float = 0.1, update_bias: float = -1.0, bid: float | None = None) -> "GruParams":
        """Uniform(-scale, scale) weights, zero biases; a negative update-gate bias starts the state slow.

        With ``bid`` the initial state and the candidate bias of the bid unit
        are set so the untrained network bids about ``bid`` in every period.
        """
        w = {}
        for gate in ("z", "r", "n"):
            w[f"W_{gate}"] = rng.uniform(-scale, scale, (STATE_DIM, INPUT_DIM))
            w[f"U_{gate}"] = rng.uniform(-scale, scale, (STATE_DIM, STATE_DIM))
            w[f"b_{gate}"] = np.zeros(STATE_DIM)
        w["b_z"][:] = update_bias
        w["h0"] = np.zeros(STATE_DIM)
        if bid is not None:
            frac = np.clip(bid / K, 1e-3, 1 - 1e-3)
            w["h0"][0] = w["b_n"][0] = np.arctanh(2 * frac - 1)
        return cls({k: w[k] for k in GRU_PARAM_NAMES}, float(K), normalizers or Normalizers())

    @classmethod
    def zeros(cls, K: float) -> "GruParams":
        w = {k: np.zeros(v) for k, v in gru_shapes().items()}
        return cls(w, float(K))

    def with_weights(self, weights: dict) -> "GruParams":
        return replace(self, weights={k: np.array(v, dtype=float) for k, v in weights.items()})

    def copy(self) -> "GruParams":
        return self.with_weights(self.weights)


def gru_shapes() -> dict[str, tuple]:
    mat_x, mat_h, vec = (STATE_DIM, INPUT_DIM), (STATE_DIM, STATE_DIM), (STATE_DIM,)
    return {"W_z": mat_x, "U_z": mat_h, "b_z": vec, "W_r": mat_x, "U_r": mat_h, "b_r": vec,
            "W_n": mat_x, "U_n": mat_h, "b_n": vec, "h0": vec}


def _readout_affine(K: float) -> tuple[np.ndarray, np.ndarray]:
    scale = np.ones(STATE_DIM)
    offset = np.zeros(STATE_DIM)
    scale[0] = offset[0] = K / 2.0
    return scale, offset


def _activate(u: np.ndarray, K: float) -> np.ndarray:
    scale, offset = _readout_affine(K)
    return np.tanh(u) * scale + offset


def _sig(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def gru_initial_state(params: GruParams, batch: int) -> np.ndarray:
    h0 = _activate(params.weights["h0"], params.K)
    return np.tile(h0, (batch, 1))


def gru_cell(h: np.ndarray, x: np.ndarray, params: GruParams) -> np.ndarray:
    w = params.weights
    z = _sig(x @ w["W_z"].T + h @ w["U_z"].T + w["b_z"])
    r = _sig(x @ w["W_r"].T + h @ w["U_r"].T + w["b_r"])
    cand = _activate(x @ w["W_n"].T + (r * h) @ w["U_n"].T + w["b_n"], params.K)
    return h + z * (cand - h)


def gru_act(state: np.ndarray, obs: Observation, params: GruParams):
    """Advance the GRU state on one observation; the bid is the first state component."""
    h = gru_cell(state, params.normalizers.features(obs), params)
    if np.any(np.isnan(h)):
        raise FloatingPointError(f"NaN in GRU state at period {obs.period}")
    # h + z * (cand - h) can land one ulp outside [0, K]
    h[:, 0] = np.clip(h[:, 0], 0.0, params.K)
    return h[:, 0].copy(), h


class GRUController:
    def __init__(self, params: GruParams):
        self.params = params
        self.K = params.K

    def initial_state(self, goals, horizon: int) -> np.ndarray:
        return gru_initial_state(self.params, np.asarray(goals).size)

    def act(self, state, obs):
        return gru_act(state, obs, self.params)

    def save(self, path: str | Path) -> None:
        save_model(self.params, path)


def gru_step_tape(tape: Tape, w: dict[str, Node], h: Node, x: Node, K: float) -> Node:
    scale, offset = _readout_affine(K)
    z = tape.sigmoid(tape.matvec(w["W_z"], x) + tape.matvec(w["U_z"], h) + w["b_z"])
    r = tape.sigmoid(tape.matvec(w["W_r"], x) + tape.matvec(w["U_r"], h) + w["b_r"])
    pre = tape.matvec(w["W_n"], x) + tape.matvec(w["U_n"], r * h) + w["b_n"]
    cand = tape.affine(tape.tanh(pre), scale, offset)
    return h + z * (cand - h)


def gru_episode_tape(tape: Tape, w: dict[str, Node], params: GruParams, intensity: np.ndarray,
                     lookup, goals: np.ndarray) -> tuple[Node, Node, list[Node]]:
    """Differentiable unroll of the GRU through a batch of episodes.

    Returns ``(total_spend, total_volume, bids)`` with per-episode totals.
    """
    B, T = intensity.shape
    nz = params.normalizers
    scale, offset = _readout_affine(params.K)
    h = tape.broadcast(tape.affine(tape.tanh(w["h0"]), scale, offset), (B, STATE_DIM))
    g = tape.const(goals)
    last_v = tape.const(np.zeros(B))
    last_s = tape.const(np.zeros(B))
    spend_total = tape.const(np.zeros(B))
    vol_total = tape.const(np.zeros(B))
    bids = []
    for t in range(T):
        x = tape.stack([
            tape.const(np.full(B, (T - t) / T - FEATURE_CENTER[0])),
            tape.affine(g, 1.0 / nz.goal, -FEATURE_CENTER[1]),
            tape.affine(last_v, 1.0 / nz.volume, -FEATURE_CENTER[2]),
            tape.affine(last_s, 1.0 / (nz.volume * nz.price), -FEATURE_CENTER[3]),
        ])
        h = gru_step_tape(tape, w, h, x, params.K)
        bid = tape.take(h, 0)
        bids.append(bid)
        win, spend = lookup(bid, t)
        v = tape.affine(win, intensity[:, t], 0.0)
        s = tape.affine(spend, intensity[:, t], 0.0)
        spend_total = spend_total + s
        vol_total = vol_total + v
        g = g - v
        last_v, last_s = v, s
    return spend_total, vol_total, bids


# ---------------------------------------------------------------- model files

def _fmt(values) -> str:
    return " ".join(repr(float(v)) for v in np.asarray(values, dtype=float).ravel())


def save_model(params: GruParams | PiParams, path: str | Path) -> str:
    lines = []
    if isinstance(params, GruParams):
        nz = params.normalizers
        lines += ["model gru", f"dims {STATE_DIM} {INPUT_DIM}", f"K {params.K!r}",
                  f"normalizers {nz.goal!r} {nz.volume!r} {nz.price!r}"]
        for name in GRU_PARAM_NAMES:
            arr = np.asarray(params.weights[name])
            lines.append(f"param {name} {'x'.join(map(str, arr.shape))} {_fmt(arr)}")
    else:
        lines += ["model pi", f"K {params.K!r}", f"normalize_error {int(params.normalize_error)}",
                  f"param theta_p 1 {params.theta_p!r}", f"param theta_i 1 {params.theta_i!r}",
                  f"param harmonics 5 {_fmt(params.harmonics)}"]
    text = "\n".join(lines) + "\n"
    Path(path).write_text(text)
    return text


def load_model(path: str | Path) -> GruParams | PiParams:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"model file not found: {path}")
    rows = [ln.split() for ln in path.read_text().splitlines() if ln.strip()]
    if not rows or rows[0][0] != "model":
        raise ModelFileError(f"{path}: missing 'model' header")
    kind = rows[0][1]
    head = {r[0]: r[1:] for r in rows[1:] if r[0] != "param"}
    params = {}
    for r in rows[1:]:
        if r[0] == "param":
            shape = tuple(int(s) for s in r[2].split("x"))
            params[r[1]] = np.array([float(v) for v in r[3:]]).reshape(shape)
    K = float(head["K"][0])
    if kind == "gru":
        dims = tuple(int(v) for v in head["dims"])
        if dims != (STATE_DIM, INPUT_DIM):
            raise ModelFileError(f"{path}: unsupported dims {dims}")
        missing = set(GRU_PARAM_NAMES) - set(params)
        if missing:
            raise ModelFileError(f"{path}: missing parameters {sorted(missing)}")
        goal, volume, price = (float(v) for v in head["normalizers"])
        return GruParams({k: params[k] for k in GRU_PARAM_NAMES}, K, Normalizers(goal, volume, price))
    if kind == "pi":
        return PiParams(float(params["theta_p"][0]), float(params["theta_i"][0]),
                        tuple(float(v) for v in params["harmonics"]), K,
                        bool(int(head["normalize_error"][0])))
    raise ModelFileError(f"{path}: unknown model type {kind!r}")


def controller_from_params(params: GruParams | PiParams):
    return GRUController(params) if isinstance(params, GruParams) else PIController(params)
