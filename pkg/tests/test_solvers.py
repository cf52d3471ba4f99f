import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, stats

from bidlab.landscape import landscape_from_atoms, make_price_grid
from bidlab.solvers import (CFLError, GaussianKernel, GaussianResponse, GridWarning, PolicyField,
                            brute_force_cost, deterministic_bid, reachable_goals, rollout_policy,
                            solve_bellman, solve_pde, stable_dt, terminal_bid, terminal_cost)

K = 5.0
RESP = GaussianResponse(2.0, 1.0)


def atom_instance(seed):
    """Random deterministic instance on a power-of-two price grid."""
    r = np.random.default_rng(seed)
    grid = make_price_grid(2.0**-6, 2.0**6, 13)
    n = r.integers(1, 4)
    prices = r.choice(grid.edges[3:10], n, replace=False)
    L = landscape_from_atoms(grid, prices, r.dirichlet(np.ones(n)))
    T = int(r.integers(1, 5))
    bids = np.sort(r.choice(np.linspace(0.1, 4.0, 40), int(r.integers(1, 6)), replace=False))
    intensity = r.uniform(0.5, 3.0, T)
    return L, T, bids, intensity, float(r.uniform(0.0, 2.0 * intensity.sum())), float(r.uniform(1.0, 10.0))


class TestTerminal:
    def test_cost_examples(self):
        assert terminal_cost(3.0, 10.0) == 30.0
        assert terminal_cost(-5.0, 10.0) == 0.0

    def test_ramp(self):
        G = np.linspace(-2, 8, 6)
        a = terminal_bid(G, K)
        assert np.all(a[G < 0] == 0) and np.all(a[G > 0] == K)

    def test_ramp_node_at_zero(self):
        assert terminal_bid(np.array([-1.0, 0.0, 1.0]), 4.0).tolist() == [0.0, 2.0, 4.0]


class TestBellman:
    def test_one_period_atom(self, pow2_grid):
        L = landscape_from_atoms(pow2_grid, [0.5], [1.0])
        bids = [0.3, 0.6, 0.9]
        G = reachable_goals(1.0, 1, bids, L, 1.0, 10.0)
        f = solve_bellman(1, G, np.array([1.0]), L, GaussianKernel(0.0), 10.0, bids)
        i = int(np.flatnonzero(G == 1.0)[0])
        assert f.cost[0, i, 0] == pytest.approx(0.5, abs=1e-12)
        assert f.bid[0, i, 0] == 0.6
        assert brute_force_cost(1, bids, L, 1.0, 1.0, 10.0) == pytest.approx(0.5, abs=1e-12)

    def test_tie_is_a_win(self, pow2_grid):
        # a bid equal to the atom wins it, so 0.5 itself is the cheapest sufficient bid
        L = landscape_from_atoms(pow2_grid, [0.5], [1.0])
        G = np.array([-1.0, 0.0, 1.0])
        f = solve_bellman(1, G, np.array([1.0]), L, GaussianKernel(0.0), 10.0, [0.25, 0.5, 0.75])
        assert f.bid[0, 2, 0] == 0.5

    def test_zero_goal(self, L2):
        assert brute_force_cost(3, [0.5, 1.0, 2.0], L2, 1.0, 0.0, 4.0) == 0.0

    def test_too_large(self, L2):
        with pytest.raises(ValueError):
            brute_force_cost(5, [0.5, 1.0], L2, 1.0, 1.0, 4.0)
        with pytest.raises(ValueError):
            brute_force_cost(4, np.linspace(0.1, 4, 40), L2, 1.0, 1.0, 4.0)

    def test_bad_inputs(self, L2):
        with pytest.raises(ValueError):
            solve_bellman(1, [0.0, 1.0], [1.0], L2, GaussianKernel(), 0.0, [1.0])
        with pytest.raises(ValueError):
            solve_bellman(1, [], [1.0], L2, GaussianKernel(), 1.0, [1.0])

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10**6))
    def test_matches_brute_force(self, seed):
        L, T, bids, intensity, goal, Kp = atom_instance(seed)
        H = float(intensity[0])
        I = np.full(T, H)
        G = reachable_goals(goal, T, bids, L, I, Kp)
        f = solve_bellman(T, G, np.array([H]), L, GaussianKernel(0.0), Kp, bids)
        i = int(np.flatnonzero(G == goal)[0])
        assert f.cost[0, i, 0] == pytest.approx(brute_force_cost(T, bids, L, I, goal, Kp), abs=1e-9)

    def test_clamp_warning(self):
        with pytest.warns(GridWarning):
            solve_bellman(2, np.linspace(-1, 10, 12), np.linspace(5, 10, 3), RESP, GaussianKernel(3.0), K,
                          np.linspace(0, K, 6))


@pytest.fixture(scope="module")
def noisy_field():
    G = np.linspace(-5, 60, 27)
    H = np.linspace(0, 20, 11)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", GridWarning)
        return solve_bellman(6, G, H, RESP, GaussianKernel(2.0), K, np.linspace(0, K, 21))


class TestBellmanInvariants:
    def test_bid_bound(self, noisy_field):
        assert np.all((noisy_field.bid >= 0) & (noisy_field.bid <= K))

    def test_cost_monotone_with_bounded_slope(self, noisy_field):
        slope = np.diff(noisy_field.cost, axis=1) / np.diff(noisy_field.G_grid)[None, :, None]
        assert np.all(slope >= -1e-12) and np.all(slope <= K + 1e-12)

    def test_met_goal_costs_nothing(self, noisy_field):
        met = noisy_field.G_grid <= 0
        assert np.all(noisy_field.cost[:, met] == 0) and np.all(noisy_field.bid[:-1, met] == 0)

    def test_cost_non_negative(self, noisy_field):
        assert np.all(noisy_field.cost >= 0)

    def test_terminal_slice(self, noisy_field):
        assert np.array_equal(noisy_field.cost[-1], terminal_cost(noisy_field.G_grid, K)[:, None]
                              * np.ones(noisy_field.H_grid.size))


class TestGaussianResponse:
    @pytest.mark.parametrize("b", [0.0, 0.7, 2.0, 3.9])
    def test_spend_is_truncated_integral(self, b):
        # second price: pay the competing bid when it is below b; negative prices pay 0
        num, _ = integrate.quad(lambda p: p * stats.norm.pdf(p, 2.0, 1.0), 0.0, b) if b > 0 else (0.0, 0)
        assert RESP.spend_per_impression(b) == pytest.approx(num, abs=1e-10)

    def test_inverse(self):
        p = np.array([0.1, 0.5, 0.9])
        assert np.allclose(RESP.win_probability(RESP.inverse(p)), p)


class TestPolicyField:
    def test_csv_round_trip(self, noisy_field, tmp_path):
        text = noisy_field.to_csv(tmp_path / "f.csv")
        back = PolicyField.from_csv(tmp_path / "f.csv")
        assert back.to_csv() == text
        assert np.array_equal(back.bid, noisy_field.bid)

    def test_decimation_keeps_terminal(self, noisy_field, tmp_path):
        noisy_field.to_csv(tmp_path / "f.csv", decimate=4)
        back = PolicyField.from_csv(tmp_path / "f.csv")
        assert back.t_grid.tolist() == [0.0, 4.0, 6.0]
        assert np.array_equal(back.bid[-1], noisy_field.bid[-1])

    def test_bid_at_nodes_and_clamp(self, noisy_field):
        assert noisy_field.bid_at(2, noisy_field.G_grid[5], noisy_field.H_grid[3]) == noisy_field.bid[2, 5, 3]
        with pytest.warns(GridWarning):
            noisy_field.bid_at(2, 1e4, 5.0)


def pde_grids(nG=120, gmax=1500.0):
    dG = gmax / (nG - 3)
    return np.linspace(-2 * dG, gmax, nG)


class TestPDE:
    def test_terminal_ramp(self):
        G = pde_grids(40, 100.0)
        f = solve_pde(0.0, [0.0, 1.0], G, np.array([10.0]), RESP, K)
        assert np.all(f.bid[-1][G > 0] == K) and np.all(f.bid[-1][G < 0] == 0)

    def test_cfl_refused(self):
        G = pde_grids(40, 100.0)
        H = np.linspace(0, 50, 11)
        with pytest.raises(CFLError) as e:
            solve_pde(1.0, [0.0, 1.0], G, H, RESP, K, substeps=1)
        assert e.value.suggested_dt == pytest.approx(stable_dt(G, H, 1.0))
        n = math.ceil(1.0 / e.value.suggested_dt)
        solve_pde(1.0, [0.0, 1.0], G, H, RESP, K, substeps=n)

    def test_non_monotone_rejected(self):
        with pytest.raises(ValueError):
            solve_pde(0.0, [0.0, 1.0], pde_grids(10, 10.0), np.array([1.0]), lambda a: np.cos(a) ** 2, K)

    def test_deterministic_rollout_flat(self):
        T, H0 = 40, 20.0
        G = pde_grids(300, 500.0)
        f = solve_pde(0.0, np.arange(T + 1.0), G, np.array([H0 - 1, H0, H0 + 1]), RESP, K)
        assert np.all((f.bid >= 0) & (f.bid <= K))
        tr = rollout_policy(f, np.full(T, H0), 0.5 * H0 * T, K, RESP)
        assert tr.bid.max() / tr.bid.min() - 1 < 0.02
        assert np.allclose(tr.remaining_goal, 0.5 * H0 * (T - np.arange(T)), atol=0.02 * 0.5 * H0 * T)

    def test_refinement_moves_toward_closed_form(self):
        # mean error over the fan interior; the sup sits on the fan edges and converges slowly
        T, H0 = 30, 20.0
        errs = []
        for nG in (60, 240, 960):
            G = pde_grids(nG, 600.0)
            H = np.array([H0])
            f = solve_pde(0.0, np.arange(T + 1.0), G, H, RESP, K)
            tt, gg, hh = np.meshgrid(f.t_grid, G, H, indexing="ij")
            rho = gg / np.maximum(hh * (T - tt), 1e-9)
            m = (tt <= 0.8 * T) & (rho > 0.2) & (rho < 0.8)
            errs.append(np.abs(f.bid - deterministic_bid(tt, gg, hh, T, RESP, K))[m].mean())
        assert errs[0] > 1.5 * errs[1] > 2.25 * errs[2]


@pytest.fixture(scope="module")
def shocked_fields():
    T, H0 = 40, 20.0
    G = pde_grids(120, 1.2 * H0 * T)
    H = np.linspace(0.0, 3 * H0, 40)
    return T, H0, {s: solve_pde(s, np.arange(T + 1.0), G, H, RESP, K) for s in (0.0, 3.0)}


class TestRollout:
    def test_volume_drop_raises_bid(self, shocked_fields):
        T, H0, f = shocked_fields
        path = np.full(T, H0)
        path[30:] *= 0.6
        tr = rollout_policy(f[0.0], path, 0.5 * H0 * T, K, RESP)
        assert tr.bid[31] > tr.bid[29] * 1.05
        assert np.all((tr.bid >= 0) & (tr.bid <= K))

    def test_noise_front_loads(self, shocked_fields):
        T, H0, f = shocked_fields
        goal = 0.5 * H0 * T
        calm = rollout_policy(f[0.0], np.full(T, H0), goal, K, RESP)
        noisy = rollout_policy(f[3.0], np.full(T, H0), goal, K, RESP)
        assert noisy.bid[0] > calm.bid[0]
        assert noisy.bid[0] > noisy.bid[T // 2] > noisy.bid[T - 5]
