"""Winning-bid landscapes on a geometric price grid.

A landscape stores the distribution of the highest competing bid as point
masses sitting on the grid levels.  Each level is the geometric centre of its
price cell, so the level doubles as the price paid (second-price) for any
impression won in that cell.

Two flavours share one type:

* raw landscapes answer ``F(bid)`` as a right-continuous step function
  (a bid equal to a level wins that level's mass);
* smoothed landscapes (the output of :func:`smooth_landscape`) hold the
  response to a randomized bid evaluated on the grid levels and are
  interpolated linearly in between.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import stats

N_NOISE_QUANTILES = 512


@dataclass(frozen=True)
class PriceGrid:
    min_price: float
    max_price: float
    n_bins: int
    edges: np.ndarray = field(repr=False, compare=False)

    @property
    def ratio(self) -> float:
        return (self.max_price / self.min_price) ** (1.0 / (self.n_bins - 1))

    def nearest_bin(self, prices) -> np.ndarray:
        """Index of the grid level closest (in log space) to each price, after clamping."""
        p = np.clip(np.asarray(prices, dtype=float), self.min_price, self.max_price)
        pos = np.log(p / self.min_price) / np.log(self.max_price / self.min_price) * (self.n_bins - 1)
        return np.clip(np.rint(pos).astype(int), 0, self.n_bins - 1)

    def __eq__(self, other) -> bool:
        if not isinstance(other, PriceGrid):
            return NotImplemented
        return (self.min_price, self.max_price, self.n_bins) == (other.min_price, other.max_price, other.n_bins)

    def __hash__(self) -> int:
        return hash((self.min_price, self.max_price, self.n_bins))


def make_price_grid(min_price: float = 0.01, max_price: float = 100.0, n_bins: int = 100) -> PriceGrid:
    if not min_price > 0:
        raise ValueError(f"min_price must be positive, got {min_price}")
    if not max_price > min_price:
        raise ValueError(f"max_price must exceed min_price, got {max_price} <= {min_price}")
    if n_bins < 2:
        raise ValueError(f"need at least 2 bins, got {n_bins}")
    ratio = (max_price / min_price) ** (1.0 / (n_bins - 1))
    edges = min_price * ratio ** np.arange(n_bins)
    edges[0] = min_price
    edges[-1] = max_price
    edges.setflags(write=False)
    return PriceGrid(float(min_price), float(max_price), int(n_bins), edges)


@dataclass(frozen=True)
class BidNoise:
    """Randomization of the submitted bid around the control level.

    The drawn bid is ``cv * Z`` with ``E[Z] = 1``.  ``shape`` is the Gamma
    shape parameter for ``gamma`` and the log-standard deviation for
    ``lognormal``; it is ignored for ``dirac``.
    """

    family: str = "gamma"
    shape: float = 4.0

    def __post_init__(self):
        if self.family not in ("dirac", "gamma", "lognormal"):
            raise ValueError(f"unknown noise family {self.family!r}")
        if self.family != "dirac" and not self.shape > 0:
            raise ValueError(f"noise shape must be positive, got {self.shape}")

    def unit_quantiles(self, n: int = N_NOISE_QUANTILES) -> np.ndarray:
        """Mid-point quantiles of the unit-mean multiplier Z."""
        u = (np.arange(n) + 0.5) / n
        if self.family == "dirac":
            return np.ones(n)
        if self.family == "gamma":
            return stats.gamma.ppf(u, a=self.shape, scale=1.0 / self.shape)
        s = self.shape
        return stats.lognorm.ppf(u, s=s, scale=np.exp(-0.5 * s * s))

    def sample(self, rng: np.random.Generator, cv, size=None) -> np.ndarray:
        cv = np.asarray(cv, dtype=float)
        if self.family == "dirac":
            return np.broadcast_to(cv, size if size is not None else cv.shape).astype(float)
        if self.family == "gamma":
            return rng.gamma(self.shape, 1.0 / self.shape, size=size) * cv
        s = self.shape
        return rng.lognormal(-0.5 * s * s, s, size=size) * cv


DIRAC = BidNoise("dirac", 0.0)


class BidLandscape:
    """Competing-bid distribution on a price grid.

    ``cdf[k]`` is the probability that the highest competing bid is at most
    ``grid.edges[k]``; ``spend[k]`` is the expected payment per impression
    when bidding ``grid.edges[k]``.
    """

    __slots__ = ("grid", "cdf", "spend", "smoothed")

    def __init__(self, grid: PriceGrid, cdf, spend=None, smoothed: bool = False):
        cdf = np.array(cdf, dtype=float)
        if cdf.shape != (grid.n_bins,):
            raise ValueError(f"cdf has shape {cdf.shape}, expected ({grid.n_bins},)")
        if np.any(cdf < 0) or np.any(cdf > 1) or np.any(np.diff(cdf) < 0):
            raise ValueError("cdf must be non-decreasing within [0, 1]")
        if not smoothed and cdf[-1] != 1.0:
            raise ValueError(f"raw landscape cdf must reach 1 at max_price, got {cdf[-1]!r}")
        if spend is None:
            if smoothed:
                raise ValueError("smoothed landscape requires an explicit spend curve")
            spend = np.cumsum(np.diff(cdf, prepend=0.0) * grid.edges)
        spend = np.array(spend, dtype=float)
        cdf.setflags(write=False)
        spend.setflags(write=False)
        self.grid = grid
        self.cdf = cdf
        self.spend = spend
        self.smoothed = smoothed

    @property
    def pdf(self) -> np.ndarray:
        return np.diff(self.cdf, prepend=0.0)

    @property
    def mean_price(self) -> float:
        return float(np.dot(self.pdf, self.grid.edges))

    def _step(self, table: np.ndarray, bid) -> np.ndarray:
        idx = np.searchsorted(self.grid.edges, bid, side="right") - 1
        out = np.where(idx >= 0, table[np.clip(idx, 0, None)], 0.0)
        return out

    def _linear(self, table: np.ndarray, bid) -> np.ndarray:
        xs = np.concatenate(([0.0], self.grid.edges))
        ys = np.concatenate(([0.0], table))
        return np.interp(bid, xs, ys)

    def win_probability(self, bid):
        bid = np.asarray(bid, dtype=float)
        if self.smoothed:
            return self._linear(self.cdf, bid)
        return self._step(self.cdf, bid)

    def spend_per_impression(self, bid):
        bid = np.asarray(bid, dtype=float)
        if self.smoothed:
            return self._linear(self.spend, bid)
        return self._step(self.spend, bid)

    def __repr__(self) -> str:
        kind = "smoothed" if self.smoothed else "raw"
        return f"BidLandscape({kind}, n_bins={self.grid.n_bins}, mean_price={self.mean_price:.4g})"


def _check_bid(bid) -> np.ndarray:
    bid = np.asarray(bid, dtype=float)
    if np.any(bid < 0) or np.any(np.isnan(bid)):
        raise ValueError("bid must be non-negative")
    return bid


def _check_intensity(intensity) -> np.ndarray:
    intensity = np.asarray(intensity, dtype=float)
    if np.any(intensity < 0):
        raise ValueError("intensity must be non-negative")
    return intensity


def cdf_at(landscape: BidLandscape, bid):
    """Win probability at ``bid``; 0 below the grid, 1 at or above ``max_price``."""
    out = landscape.win_probability(_check_bid(bid))
    return float(out) if np.ndim(out) == 0 else out


def expected_volume(landscape: BidLandscape, intensity, bid):
    out = _check_intensity(intensity) * landscape.win_probability(_check_bid(bid))
    return float(out) if np.ndim(out) == 0 else out


def expected_spend(landscape: BidLandscape, intensity, bid):
    out = _check_intensity(intensity) * landscape.spend_per_impression(_check_bid(bid))
    return float(out) if np.ndim(out) == 0 else out


def smoothing_weights(grid: PriceGrid, noise: BidNoise, n_quantiles: int = N_NOISE_QUANTILES) -> np.ndarray:
    """Matrix ``W`` with ``W[j, k]`` = P(randomized bid around level j wins level k's mass).

    Smoothed cdf is ``W @ pdf`` and smoothed spend is ``W @ (pdf * edges)``.
    """
    z = noise.unit_quantiles(n_quantiles)
    drawn = grid.edges[:, None] * z[None, :]
    # bin reached by each drawn bid: the largest level <= drawn bid
    reach = np.searchsorted(grid.edges, drawn, side="right") - 1
    counts = np.zeros((grid.n_bins, grid.n_bins + 1))
    rows = np.repeat(np.arange(grid.n_bins), n_quantiles)
    np.add.at(counts, (rows, reach.ravel() + 1), 1.0)
    # a bid reaching level r wins every level k <= r
    won_share = counts[:, ::-1].cumsum(axis=1)[:, ::-1][:, 1:]
    return won_share / n_quantiles


def smooth_landscape(landscape: BidLandscape, noise: BidNoise, weights: np.ndarray | None = None) -> BidLandscape:
    """Response to bids drawn from ``noise`` with mean equal to each grid level."""
    if noise.family == "dirac":
        return landscape
    if landscape.smoothed:
        raise ValueError("landscape is already smoothed")
    if weights is None:
        weights = smoothing_weights(landscape.grid, noise)
    pdf = landscape.pdf
    cdf = np.clip(weights @ pdf, 0.0, 1.0)
    cdf = np.maximum.accumulate(cdf)
    spend = weights @ (pdf * landscape.grid.edges)
    return BidLandscape(landscape.grid, cdf, spend=spend, smoothed=True)


def landscape_from_samples(winning_bids: Sequence[float], grid: PriceGrid) -> BidLandscape:
    bids = np.asarray(winning_bids, dtype=float)
    if bids.size == 0:
        raise ValueError("need at least one winning bid sample")
    counts = np.bincount(grid.nearest_bin(bids), minlength=grid.n_bins)
    cdf = np.cumsum(counts) / bids.size
    cdf[-1] = 1.0
    return BidLandscape(grid, cdf)


def landscape_from_atoms(grid: PriceGrid, prices: Iterable[float], probs: Iterable[float]) -> BidLandscape:
    """Place point masses on the nearest grid levels."""
    mass = np.zeros(grid.n_bins)
    np.add.at(mass, grid.nearest_bin(list(prices)), list(probs))
    cdf = np.minimum(np.cumsum(mass), 1.0)
    if abs(cdf[-1] - 1.0) > 1e-9:
        raise ValueError("atom probabilities must sum to 1")
    cdf[-1] = 1.0
    return BidLandscape(grid, cdf)


def lognormal_landscape(grid: PriceGrid, median: float, log_sd: float) -> BidLandscape:
    """Log-normal winning bids discretized onto the grid cells."""
    if not median > 0 or not log_sd > 0:
        raise ValueError("median and log_sd must be positive")
    r = np.sqrt(grid.ratio)
    upper = grid.edges * r
    cdf = stats.norm.cdf(np.log(upper / median) / log_sd)
    cdf[-1] = 1.0
    return BidLandscape(grid, cdf)


class LandscapeProcess:
    """One raw landscape per period on a shared grid."""

    def __init__(self, grid: PriceGrid, cdfs):
        cdfs = np.atleast_2d(np.asarray(cdfs, dtype=float))
        if cdfs.shape[1] != grid.n_bins:
            raise ValueError(f"cdf rows have {cdfs.shape[1]} columns, expected {grid.n_bins}")
        self.grid = grid
        self.cdfs = cdfs
        for row in cdfs:
            BidLandscape(grid, row)

    @classmethod
    def constant(cls, landscape: BidLandscape, periods: int = 1) -> "LandscapeProcess":
        return cls(landscape.grid, np.tile(landscape.cdf, (periods, 1)))

    def __len__(self) -> int:
        return self.cdfs.shape[0]

    def at(self, t: int) -> BidLandscape:
        """Landscape for period ``t``; a short process holds its last snapshot."""
        return BidLandscape(self.grid, self.cdfs[min(t, len(self) - 1)])

    def to_csv(self, path: str | Path | None = None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        g = self.grid
        w.writerow(["grid", repr(g.min_price), repr(g.max_price), g.n_bins])
        for t, row in enumerate(self.cdfs):
            w.writerow([t, *(repr(float(v)) for v in row)])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_csv(cls, path: str | Path) -> "LandscapeProcess":
        return cls.parse_csv(Path(path).read_text())

    @classmethod
    def parse_csv(cls, text: str) -> "LandscapeProcess":
        rows = list(csv.reader(io.StringIO(text)))
        head = rows[0]
        if head[0] != "grid" or len(head) != 4:
            raise ValueError("landscape file must start with a 'grid,min,max,n_bins' row")
        grid = make_price_grid(float(head[1]), float(head[2]), int(head[3]))
        body = rows[1:]
        for i, r in enumerate(body):
            if int(r[0]) != i:
                raise ValueError(f"period index {r[0]} out of order at row {i + 1}")
        cdfs = np.array([[float(v) for v in r[1:]] for r in body])
        return cls(grid, cdfs)


def _hermite(s: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Cubic Hermite basis (p0, m0, p1, m1) and its derivative, stacked on the last axis."""
    s = np.asarray(s, dtype=float)
    s2 = s * s
    s3 = s2 * s
    w = np.stack([2 * s3 - 3 * s2 + 1, s3 - 2 * s2 + s, 3 * s2 - 2 * s3, s3 - s2], axis=-1)
    dw = np.stack([6 * s2 - 6 * s, 3 * s2 - 4 * s + 1, 6 * s - 6 * s2, 3 * s2 - 2 * s], axis=-1)
    return w, dw


class NoiseKernel:
    """Exact win share of a randomized bid, tabulated on the grid's index scale.

    A bid drawn as ``cv * Z`` wins level ``k`` with probability
    ``P(Z >= edges[k] / cv) = phi(k - u)`` where ``u`` is the fractional grid
    index of ``cv``.  ``phi`` depends only on the grid ratio and the noise, so
    it is tabulated once (``resolution`` nodes per grid step) and evaluated by
    cubic Hermite interpolation with its exact slope.  The result is smooth in
    ``cv`` between grid levels, unlike linear interpolation of grid values.
    """

    def __init__(self, grid: PriceGrid, noise: BidNoise, resolution: int = 64):
        if noise.family == "dirac":
            raise ValueError("a Dirac bid has no smoothing kernel")
        self.log_ratio = float(np.log(grid.ratio))
        self.min_price = grid.min_price
        self.resolution = resolution
        dist = self._dist(noise)
        lo = np.floor(np.log(dist.ppf(1e-15)) / self.log_ratio)
        hi = np.ceil(np.log(dist.isf(1e-15)) / self.log_ratio)
        self.d0 = float(lo)
        d = lo + np.arange(int((hi - lo) * resolution) + 1) / resolution
        x = np.exp(d * self.log_ratio)
        self.phi = dist.sf(x)
        self.dphi = -dist.pdf(x) * x * self.log_ratio
        # saturate the ends so clamped lookups need no masks
        self.phi[0], self.phi[-1] = 1.0, 0.0
        self.dphi[[0, -1]] = 0.0
        self.d1 = float(d[-1])
        # padded node table (value, slope per node step), one saturated node each side
        h = 1.0 / resolution
        nodes = np.column_stack([np.r_[1.0, self.phi, 0.0], np.r_[0.0, self.dphi * h, 0.0]])
        # row i holds both ends of interval i: (p_i, m_i, p_i+1, m_i+1)
        self._spans = np.concatenate([nodes[:-1], nodes[1:]], axis=1)

    @staticmethod
    def _dist(noise: BidNoise):
        if noise.family == "gamma":
            return stats.gamma(a=noise.shape, scale=1.0 / noise.shape)
        s = noise.shape
        return stats.lognorm(s=s, scale=np.exp(-0.5 * s * s))

    def __call__(self, d: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """``phi(d)`` and ``dphi/dd``; 1 below the table, 0 above."""
        pos = (np.clip(d, self.d0, self.d1) - self.d0) * self.resolution
        i = np.minimum(pos.astype(int), self.phi.size - 2)
        w, dw = _hermite(pos - i)
        ends = self._spans[i + 1]
        return (ends * w).sum(-1), (ends * dw).sum(-1) * self.resolution

    def contract(self, u: np.ndarray, weights: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """``sum_k weights[..., r, k] * phi(k - u[r])`` and the same sum over ``phi'``.

        For one row every level shares the fractional table offset, so the
        Hermite basis is computed once per row and the levels only gather nodes.
        """
        n = weights.shape[-1]
        q = np.clip((-u - self.d0) * self.resolution, -(n + 2.0) * self.resolution, self.phi.size + 2.0)
        i0 = np.floor(q)
        w, dw = _hermite(q - i0)
        idx = i0.astype(np.int64)[:, None] + (1 + self.resolution * np.arange(n))
        g = np.take(self._spans, idx, axis=0, mode="clip")   # (rows, n, 4)
        proj = np.einsum("...rk,rkj->...rj", weights, g)
        return (proj * w).sum(-1), (proj * dw).sum(-1) * self.resolution

    def index(self, bids: np.ndarray) -> np.ndarray:
        """Fractional grid index of each bid (``-inf`` for a zero bid)."""
        with np.errstate(divide="ignore"):
            return np.log(bids / self.min_price) / self.log_ratio


class ResponseTable:
    """Per-period responses for a collection of landscape processes.

    Stores the per-level masses, shape ``(n_processes, n_periods, n_bins)``;
    a process shorter than the longest one holds its last snapshot.  With
    bid noise, lookups use the exact randomized response through a
    :class:`NoiseKernel`; without, the raw step response.
    """

    def __init__(self, grid: PriceGrid, pdf, noise: BidNoise = DIRAC):
        self.grid = grid
        self.pdf = np.asarray(pdf, dtype=float)
        self.noise = noise
        self.smoothed = noise.family != "dirac"
        self.kernel = NoiseKernel(grid, noise) if self.smoothed else None

    @classmethod
    def build(cls, processes: Sequence[LandscapeProcess], noise: BidNoise = DIRAC) -> "ResponseTable":
        grid = processes[0].grid
        if any(p.grid != grid for p in processes):
            raise ValueError("all processes must share one price grid")
        periods = max(len(p) for p in processes)
        pdf = np.empty((len(processes), periods, grid.n_bins))
        for i, p in enumerate(processes):
            pdf[i, : len(p)] = np.diff(p.cdfs, axis=-1, prepend=0.0)
            pdf[i, len(p):] = pdf[i, len(p) - 1]
        return cls(grid, pdf, noise)

    @property
    def n_periods(self) -> int:
        return self.pdf.shape[1]

    def raw_cdf(self, rows, t: int) -> np.ndarray:
        return np.cumsum(self.pdf[rows, min(t, self.n_periods - 1)], axis=-1)

    def landscape(self, process: int, t: int) -> BidLandscape:
        """The response at period ``t`` evaluated on the grid levels."""
        t = min(t, self.n_periods - 1)
        levels = self.grid.edges
        if not self.smoothed:
            return BidLandscape(self.grid, np.minimum(np.cumsum(self.pdf[process, t]), 1.0))
        w, s, _, _ = self.lookup(levels, t, np.full(levels.size, process))
        return BidLandscape(self.grid, np.clip(w, 0.0, 1.0), s, smoothed=True)

    def lookup(self, bids, t: int, rows):
        """Return ``(win, spend, d_win, d_spend)`` per row at period ``t``.

        ``win`` is the probability of winning an impression and ``spend`` the
        expected payment per impression; the derivatives are with respect to
        the bid (zero for the raw step response).
        """
        bids = np.asarray(bids, dtype=float)
        t = min(t, self.n_periods - 1)
        pdf = self.pdf[rows, t]
        pay = pdf * self.grid.edges
        if not self.smoothed:
            idx = np.searchsorted(self.grid.edges, bids, side="right")
            mask = np.arange(self.grid.n_bins)[None, :] < idx[:, None]
            zero = np.zeros_like(bids)
            return (pdf * mask).sum(axis=1), (pay * mask).sum(axis=1), zero, zero
        positive = bids > 0
        safe = np.where(positive, bids, 1.0)
        # a zero bid sits far above the table, where phi vanishes
        u = np.where(positive, self.kernel.index(safe), -np.inf)
        (win, spend), (dw, ds) = self.kernel.contract(u, np.stack([pdf, pay]))
        du = np.where(positive, 1.0 / (safe * self.kernel.log_ratio), 0.0)
        d_win, d_spend = -dw * du, -ds * du
        return win, spend, d_win, d_spend
