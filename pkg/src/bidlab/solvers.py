"""Reference policies: discrete Bellman recursion, brute force, and the explicit HJB scheme."""

from __future__ import annotations

import io
import itertools
import json
import logging
import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np
from scipy import special, stats

from .market import EpisodeTrace, VolumeScenario

log = logging.getLogger(__name__)


class Response(Protocol):
    """Per-impression response to a bid: win probability and expected price paid."""

    def win_probability(self, bid): ...

    def spend_per_impression(self, bid): ...


@dataclass(frozen=True)
class GaussianResponse:
    """Winning-bid distribution N(mean, sd²) truncated to non-negative prices."""

    mean: float
    sd: float

    def __post_init__(self):
        if not self.sd > 0:
            raise ValueError("sd must be positive")

    def _z(self, bid):
        return (np.asarray(bid, dtype=float) - self.mean) / self.sd

    def win_probability(self, bid):
        # mass at negative prices is always won (at price 0)
        return special.ndtr(self._z(bid))

    def spend_per_impression(self, bid):
        z, z0 = self._z(bid), self._z(0.0)
        z = np.maximum(z, z0)
        part = self.mean * (stats.norm.cdf(z) - stats.norm.cdf(z0)) - self.sd * (stats.norm.pdf(z) - stats.norm.pdf(z0))
        return np.maximum(part, 0.0)

    def inverse(self, p):
        return self.mean + self.sd * special.ndtri(np.clip(p, 0.0, 1.0))

    def __call__(self, bid):
        return self.win_probability(bid)


class CFLError(ValueError):
    def __init__(self, dt: float, limit: float):
        super().__init__(f"time step {dt:.4g} violates the stability bound; use dt <= {limit:.4g}")
        self.dt = dt
        self.suggested_dt = limit


class GridWarning(UserWarning):
    pass


@dataclass
class PolicyField:
    """Bid (and, for the DP, cost-to-go) on a ``(t, G, H)`` grid; the last slice is terminal."""

    t_grid: np.ndarray
    G_grid: np.ndarray
    H_grid: np.ndarray
    bid: np.ndarray
    cost: np.ndarray | None
    K: float
    solver: str = "dp"

    def _locate(self, values, grid):
        values = np.asarray(values, dtype=float)
        if grid.size == 1:
            return np.zeros(values.shape, dtype=int), np.zeros(values.shape), np.zeros(values.shape, bool)
        clipped = np.clip(values, grid[0], grid[-1])
        outside = clipped != values
        i = np.clip(np.searchsorted(grid, clipped, side="right") - 1, 0, grid.size - 2)
        w = (clipped - grid[i]) / (grid[i + 1] - grid[i])
        return i, w, outside

    def slice_index(self, t: float) -> int:
        """Index of the stored slice at or just before time ``t``."""
        k = int(np.searchsorted(self.t_grid, t + 1e-9, side="right") - 1)
        return min(max(k, 0), self.t_grid.size - 1)

    def bid_at(self, t: float, G, H, warn: bool = True):
        """Bilinear interpolation of the bid slice at time ``t``; points off the grid are clamped."""
        a = self.bid[self.slice_index(t)]
        gi, gw, g_out = self._locate(G, self.G_grid)
        hi, hw, h_out = self._locate(H, self.H_grid)
        if warn and (np.any(g_out) or np.any(h_out)):
            warnings.warn("trajectory left the policy grid; clamping", GridWarning, stacklevel=2)
        gj = np.minimum(gi + 1, self.G_grid.size - 1)
        hj = np.minimum(hi + 1, self.H_grid.size - 1)
        out = ((1 - gw) * (1 - hw) * a[gi, hi] + gw * (1 - hw) * a[gj, hi]
               + (1 - gw) * hw * a[gi, hj] + gw * hw * a[gj, hj])
        return float(out) if np.ndim(out) == 0 else out

    def header(self) -> dict:
        return {"solver": self.solver, "K": self.K, "t_grid": self.t_grid.tolist(),
                "G_grid": self.G_grid.tolist(), "H_grid": self.H_grid.tolist()}

    def to_csv(self, path: str | Path | None = None, decimate: int = 1) -> str:
        """``# {json header}`` followed by ``t,G,H,bid,cost`` rows; ``decimate`` keeps every n-th slice."""
        if decimate < 1:
            raise ValueError("decimate must be >= 1")
        keep = sorted(set(range(0, self.t_grid.size, decimate)) | {self.t_grid.size - 1})
        head = self.header()
        head["t_grid"] = [float(self.t_grid[k]) for k in keep]
        buf = io.StringIO()
        buf.write("# " + json.dumps(head) + "\n")
        buf.write("t,G,H,bid,cost\n")
        for k in keep:
            t = repr(float(self.t_grid[k]))
            for i, g in enumerate(self.G_grid):
                for j, h in enumerate(self.H_grid):
                    c = "" if self.cost is None else repr(float(self.cost[k, i, j]))
                    buf.write(f"{t},{float(g)!r},{float(h)!r},{float(self.bid[k, i, j])!r},{c}\n")
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_csv(cls, path: str | Path) -> "PolicyField":
        lines = Path(path).read_text().splitlines()
        head = json.loads(lines[0][2:])
        t, G, H = (np.array(head[k], dtype=float) for k in ("t_grid", "G_grid", "H_grid"))
        data = np.array([[float(x) if x else np.nan for x in ln.split(",")] for ln in lines[2:]])
        shape = (t.size, G.size, H.size)
        cost = data[:, 4].reshape(shape)
        return cls(t, G, H, data[:, 3].reshape(shape), None if np.all(np.isnan(cost)) else cost,
                   float(head["K"]), head["solver"])


def terminal_cost(G, K: float):
    return K * np.maximum(0.0, np.asarray(G, dtype=float))


def terminal_bid(G_grid: np.ndarray, K: float) -> np.ndarray:
    """K above zero, 0 below, with a linear ramp across the cell that contains G = 0."""
    G = np.asarray(G_grid, dtype=float)
    out = np.where(G > 0, K, 0.0)
    k = int(np.searchsorted(G, 0.0, side="right"))
    if 0 < k < G.size and G[k - 1] < 0 < G[k]:
        out[k - 1] = 0.0
        out[k] = K
    elif 0 < k <= G.size and G[k - 1] == 0.0:
        out[k - 1] = K / 2
    return out


# ------------------------------------------------------------------ discrete dynamic programming

@dataclass(frozen=True)
class GaussianKernel:
    """Next-period intensity H' = max(H + drift + sigma * xi, 0), xi on Gauss-Hermite nodes."""

    sigma: float = 0.0
    drift: float | Callable[[int], float] = 0.0
    n_nodes: int = 7

    def nodes(self, t: int, H: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Returns next-intensity nodes of shape ``H.shape + (m,)`` and weights of shape ``(m,)``."""
        mu = self.drift(t) if callable(self.drift) else self.drift
        if self.sigma == 0:
            return np.maximum(H + mu, 0.0)[..., None], np.ones(1)
        x, w = np.polynomial.hermite_e.hermegauss(self.n_nodes)
        w = w / w.sum()
        return np.maximum(H[..., None] + mu + self.sigma * x, 0.0), w


def _interp_slice(C: np.ndarray, G_grid, H_grid, g: np.ndarray, h: np.ndarray) -> tuple[np.ndarray, bool]:
    """Bilinear interpolation of a ``(nG, nH)`` slice at matching-shape points, clamped."""
    def locate(v, grid):
        if grid.size == 1:
            return np.zeros(v.shape, int), np.zeros(v.shape), False
        c = np.clip(v, grid[0], grid[-1])
        i = np.clip(np.searchsorted(grid, c, side="right") - 1, 0, grid.size - 2)
        return i, (c - grid[i]) / (grid[i + 1] - grid[i]), bool(np.any(c != v))

    gi, gw, _ = locate(g, G_grid)
    hi, hw, h_out = locate(h, H_grid)
    gj = np.minimum(gi + 1, G_grid.size - 1)
    hj = np.minimum(hi + 1, H_grid.size - 1)
    # G below the grid is a met goal (cost 0 once the grid reaches below zero); only H clamping is notable
    out = ((1 - gw) * (1 - hw) * C[gi, hi] + gw * (1 - hw) * C[gj, hi]
           + (1 - gw) * hw * C[gi, hj] + gw * hw * C[gj, hj])
    return out, h_out


def _bid_levels(bid_grid, K: float) -> np.ndarray:
    b = np.unique(np.clip(np.asarray(bid_grid, dtype=float), 0.0, K))
    return b if b[0] == 0.0 else np.concatenate(([0.0], b))


def solve_bellman(T: int, G_grid, H_grid, landscape: Response, kernel: GaussianKernel, K: float,
                  bid_grid) -> PolicyField:
    """Backward induction of the Bellman recursion with linear interpolation in (G, H).

    Among bids with equal cost the lowest wins.  Zero is always a candidate
    bid and candidates above ``K`` are dropped.
    """
    G_grid = np.asarray(G_grid, dtype=float)
    H_grid = np.asarray(H_grid, dtype=float)
    if T < 1 or G_grid.size == 0 or H_grid.size == 0:
        raise ValueError("T must be positive and the grids non-empty")
    if not K > 0:
        raise ValueError("K must be positive")
    if np.any(np.diff(G_grid) <= 0) or np.any(np.diff(H_grid) <= 0):
        raise ValueError("grids must be strictly increasing")
    bids = _bid_levels(bid_grid, K)
    win = np.asarray(landscape.win_probability(bids), dtype=float)
    pay = np.asarray(landscape.spend_per_impression(bids), dtype=float)
    nG, nH = G_grid.size, H_grid.size
    cost = np.empty((T + 1, nG, nH))
    policy = np.empty((T + 1, nG, nH))
    cost[T] = terminal_cost(G_grid, K)[:, None]
    policy[T] = terminal_bid(G_grid, K)[:, None]
    clamped = False
    Gm = G_grid[:, None, None]
    for t in range(T - 1, -1, -1):
        H_next, weights = kernel.nodes(t, H_grid)                     # (nH, m)
        vol = H_grid[:, None] * win[None, :]                          # (nH, A)
        g_next = np.broadcast_to(Gm - vol[None], (nG, nH, bids.size))
        future = np.zeros((nG, nH, bids.size))
        for k, w in enumerate(weights):
            h = np.broadcast_to(H_next[None, :, None, k], g_next.shape)
            c, out = _interp_slice(cost[t + 1], G_grid, H_grid, g_next, h)
            clamped |= out
            future += w * c
        total = H_grid[None, :, None] * pay[None, None, :] + future
        best = np.argmin(total, axis=2)                               # first index = lowest bid
        cost[t] = np.take_along_axis(total, best[..., None], axis=2)[..., 0]
        policy[t] = bids[best]
    if clamped:
        warnings.warn("kernel nodes fell outside the H grid; values were clamped", GridWarning, stacklevel=2)
    return PolicyField(np.arange(T + 1, dtype=float), G_grid, H_grid, policy, cost, float(K), "dp")


def brute_force_cost(T: int, bid_grid, landscape: Response, intensity, G: float, K: float) -> float:
    """Exhaustive minimum of the episode cost over every bid sequence (deterministic intensity)."""
    bids = _bid_levels(bid_grid, K)
    intensity = np.broadcast_to(np.asarray(intensity, dtype=float), (T,))
    if T > 4 or bids.size ** T > 10**6:
        raise ValueError(f"instance too large for enumeration ({bids.size}^{T} sequences)")
    win = np.asarray(landscape.win_probability(bids), dtype=float)
    pay = np.asarray(landscape.spend_per_impression(bids), dtype=float)
    best = math.inf
    for seq in itertools.product(range(bids.size), repeat=T):
        g, spend = G, 0.0
        for t, k in enumerate(seq):
            spend += intensity[t] * pay[k]
            g -= intensity[t] * win[k]
        best = min(best, spend + K * max(0.0, g))
    return best


def reachable_goals(G: float, T: int, bid_grid, landscape: Response, intensity, K: float) -> np.ndarray:
    """Every remaining goal a deterministic instance can visit; a DP grid built on it is exact."""
    bids = _bid_levels(bid_grid, K)
    intensity = np.broadcast_to(np.asarray(intensity, dtype=float), (T,))
    win = np.asarray(landscape.win_probability(bids), dtype=float)
    level = np.array([float(G)])
    seen = [level, np.array([0.0])]
    for t in range(T):
        level = np.unique(level[:, None] - intensity[t] * win[None, :])
        seen.append(level)
    return np.unique(np.concatenate(seen))


# ------------------------------------------------------------------ continuous-time PDE

def stable_dt(G_grid, H_grid, sigma: float) -> float:
    """Largest explicit step keeping the upwind/centred update a convex combination."""
    dG = float(np.min(np.diff(G_grid)))
    rate = float(np.max(H_grid)) / dG
    if sigma > 0 and H_grid.size > 1:
        rate += sigma**2 / float(np.min(np.diff(H_grid))) ** 2
    return math.inf if rate == 0 else 1.0 / rate


def _check_monotone(F: Callable, K: float) -> None:
    xs = np.linspace(0.0, K, 1001)
    ys = np.asarray(F(xs), dtype=float)
    if np.any(np.diff(ys) < -1e-12) or np.any(ys < -1e-12) or np.any(ys > 1 + 1e-12):
        raise ValueError("F must be a non-decreasing CDF on [0, K]")


def solve_pde(sigma: float, t_grid, G_grid, H_grid, F: Callable, K: float,
              substeps: int | None = None, courant: float = 0.25) -> PolicyField:
    """Explicit backward scheme for a_t + ½σ²a_HH − H·F(a)·a_G = 0.

    ``t_grid`` lists the stored slices; each interval is split into
    ``substeps`` equal steps.  When ``substeps`` is ``None`` the step is
    ``courant`` times the stability limit: right at the limit the explicit
    step lags the rarefaction from the terminal jump.  An explicit
    ``substeps`` that breaks the stability bound raises :class:`CFLError`
    with the largest admissible step.
    """
    t_grid = np.asarray(t_grid, dtype=float)
    G = np.asarray(G_grid, dtype=float)
    H = np.asarray(H_grid, dtype=float)
    if t_grid.size < 2 or G.size < 3 or H.size < 1:
        raise ValueError("need at least two time slices, three G nodes and one H node")
    if np.any(np.diff(t_grid) <= 0) or np.any(np.diff(G) <= 0) or np.any(np.diff(H) <= 0):
        raise ValueError("grids must be strictly increasing")
    if G[0] >= 0 or G[-1] <= 0:
        raise ValueError("G grid must straddle zero")
    if sigma < 0 or not K > 0:
        raise ValueError("need sigma >= 0 and K > 0")
    if not 0 < courant <= 1:
        raise ValueError("courant must lie in (0, 1]")
    if np.any(H < 0):
        raise ValueError("H grid must be non-negative")
    if np.any(np.abs(np.diff(G) - (G[1] - G[0])) > 1e-9 * abs(G[-1] - G[0])):
        raise ValueError("G grid must be uniform")
    _check_monotone(F, K)
    limit = stable_dt(G, H, sigma)
    dG = G[1] - G[0]
    dH = H[1] - H[0] if H.size > 1 else 1.0
    bid = np.empty((t_grid.size, G.size, H.size))
    a = np.repeat(terminal_bid(G, K)[:, None], H.size, axis=1)
    bid[-1] = a
    for k in range(t_grid.size - 1, 0, -1):
        span = t_grid[k] - t_grid[k - 1]
        n = substeps if substeps is not None else max(1, math.ceil(span / (courant * limit) - 1e-12))
        dt = span / n
        if dt > limit * (1 + 1e-12):
            raise CFLError(dt, limit)
        for _ in range(n):
            speed = H[None, :] * np.asarray(F(a), dtype=float)          # >= 0: info flows from lower G
            grad_G = np.empty_like(a)
            grad_G[1:] = (a[1:] - a[:-1]) / dG
            grad_G[0] = 0.0
            new = a - dt * speed * grad_G
            if sigma > 0 and H.size > 1:
                padded = np.concatenate([a[:, :1], a, a[:, -1:]], axis=1)  # zero-gradient in H
                new += 0.5 * sigma**2 * dt * (padded[:, 2:] - 2 * a + padded[:, :-2]) / dH**2
            new[0] = 0.0
            new[-1] = K
            a = np.clip(new, 0.0, K)
        bid[k - 1] = a
    return PolicyField(t_grid, G, H, bid, None, float(K), "pde")


def deterministic_bid(t, G, H, T: float, response: GaussianResponse, K: float):
    """Closed-form σ = 0 policy: the constant bid that exactly spreads G over the remaining time."""
    G = np.asarray(G, dtype=float)
    need = np.where(G > 0, G / np.maximum(H * (T - np.asarray(t, dtype=float)), 1e-300), 0.0)
    return np.clip(np.where(G > 0, response.inverse(np.minimum(need, 1.0)), 0.0), 0.0, K)


def rollout_policy(field: PolicyField, intensity, goal: float, K: float, response: Response) -> EpisodeTrace:
    """Follow the field along one realized intensity path with the expected market response."""
    if isinstance(intensity, VolumeScenario):
        if not intensity.deterministic:
            raise ValueError("pass a realized intensity path for a noisy scenario")
        intensity = intensity.paths(1)[0]
    intensity = np.asarray(intensity, dtype=float)
    T = intensity.size
    bids, vol, spend, remaining = (np.zeros(T) for _ in range(4))
    g = float(goal)
    for t in range(T):
        remaining[t] = g
        a = float(np.clip(field.bid_at(t, g, intensity[t]), 0.0, K))
        bids[t] = a
        vol[t] = intensity[t] * float(response.win_probability(a))
        spend[t] = intensity[t] * float(response.spend_per_impression(a))
        g -= vol[t]
    return EpisodeTrace(bids, vol, spend, remaining, float(goal), float(K))
