import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bidlab.landscape import BidNoise, LandscapeProcess, ResponseTable, lognormal_landscape, make_price_grid
from bidlab.market import (ConstantBid, ControllerError, EpisodeTrace, Shock, VolumeScenario, apply_shock,
                           final_cost, run_episode, simulate_batch, step_volume)


class TestVolume:
    @pytest.mark.parametrize("H,mu,sigma,draw,want", [(5, 0, 0, 0.7, 5), (5, 1, 0, 0.0, 6), (0.1, -1, 0, 0.0, 0)])
    def test_step_examples(self, H, mu, sigma, draw, want):
        assert step_volume(H, 0, mu, sigma, draw) == want

    def test_step_uses_sqrt_dt(self):
        assert step_volume(5.0, 0, 0.0, 2.0, 1.0, dt=0.25) == pytest.approx(6.0)

    @pytest.mark.parametrize("t,factor,want", [(70, 2, 50), (64, 2, 100), (70, 1, 100)])
    def test_shock_examples(self, t, factor, want):
        assert apply_shock(100.0, t, [Shock(65, factor)]) == want

    def test_bad_shock(self):
        with pytest.raises(ValueError):
            Shock(3, 0.5)

    @settings(max_examples=30, deadline=None)
    @given(a=st.floats(1, 10), b=st.floats(1, 10), t=st.integers(10, 50))
    def test_shocks_compose(self, a, b, t):
        two = apply_shock(apply_shock(100.0, t, [Shock(5, a)]), t, [Shock(10, b)])
        assert two == pytest.approx(apply_shock(100.0, t, [Shock(5, a * b)]), rel=1e-12)
        assert two == pytest.approx(apply_shock(100.0, t, [Shock(5, a), Shock(10, b)]), rel=1e-12)

    def test_deterministic_scenario_is_base(self):
        sc = VolumeScenario.linear(10, 20, 11)
        assert np.allclose(sc.paths(3), np.linspace(10, 20, 11))

    def test_random_walk_variance(self):
        sc = VolumeScenario.constant(1000.0, 51, vol=2.0)
        h = sc.paths(20000, np.random.default_rng(0))
        var = h[:, 50].var()
        assert var == pytest.approx(4.0 * 50, rel=0.05)

    def test_paths_non_negative(self):
        h = VolumeScenario.constant(1.0, 100, vol=5.0).paths(200, np.random.default_rng(1))
        assert np.all(h >= 0)

    def test_noisy_scenario_needs_rng(self):
        with pytest.raises(ValueError):
            VolumeScenario.constant(1.0, 5, vol=1.0).paths(2)

    def test_shared_draws(self):
        draws = np.random.default_rng(3).standard_normal((4, 9))
        lo = VolumeScenario.constant(100.0, 10, vol=0.5).paths(4, draws=draws)
        hi = VolumeScenario.constant(100.0, 10, vol=5.0).paths(4, draws=draws)
        assert np.allclose(hi - 100.0, 10 * (lo - 100.0))


class TestEpisode:
    def test_l2_two_periods(self, L2):
        tr = run_episode(ConstantBid(1.0, K=10), VolumeScenario.constant(10, 2), L2, goal=10, penalty=10)
        assert tr.total_spend == 5.0 and tr.total_volume == 10.0 and tr.final_cost == 5.0

    def test_bid_above_max_wins_everything(self, L2):
        sc = VolumeScenario.linear(3, 7, 5)
        tr = run_episode(ConstantBid(1000.0), sc, L2, goal=20, penalty=10)
        assert tr.total_volume == pytest.approx(25.0) and tr.penalty_paid == 0.0

    def test_zero_bid(self, L2):
        tr = run_episode(ConstantBid(0.0), VolumeScenario.constant(10, 4), L2, goal=30, penalty=7)
        assert tr.total_volume == 0 and tr.total_spend == 0 and tr.final_cost == 7 * 30

    def test_final_cost_cases(self):
        z = np.zeros(2)
        met = EpisodeTrace(z, np.array([5.0, 5.0]), np.array([1.0, 2.0]), z, 10.0, 4.0)
        over = EpisodeTrace(z, np.array([50.0, 5.0]), np.array([1.0, 2.0]), z, 10.0, 4.0)
        none = EpisodeTrace(z, z, np.array([1.0, 2.0]), z, 10.0, 4.0)
        assert final_cost(met, 10, 4) == 3.0
        assert final_cost(over, 10, 4) == 3.0
        assert final_cost(none, 10, 4) == 3.0 + 40.0

    def test_remaining_goal_bookkeeping(self, L2):
        sc = VolumeScenario.constant(10.0, 30, vol=1.0)
        tr = run_episode(ConstantBid(1.0), sc, L2, goal=100, penalty=5, seed=4)
        assert tr.remaining_goal[0] == 100
        assert np.all(np.diff(tr.remaining_goal) <= 0)
        assert np.allclose(tr.remaining_goal, 100 - np.concatenate(([0], np.cumsum(tr.volume)[:-1])), atol=1e-12)

    def test_expected_mode_bit_reproducible(self, L2):
        sc = VolumeScenario.constant(10.0, 20, vol=1.0)
        a = run_episode(ConstantBid(1.0), sc, L2, 50, 5, seed=9, noise=BidNoise())
        b = run_episode(ConstantBid(1.0), sc, L2, 50, 5, seed=9, noise=BidNoise())
        assert a.to_csv() == b.to_csv()

    @pytest.mark.parametrize("noise", [BidNoise("dirac", 0.0), BidNoise("gamma", 4.0)])
    def test_sampled_converges_to_expected(self, noise):
        grid = make_price_grid()
        L = lognormal_landscape(grid, 1.0, 0.7)
        table = ResponseTable.build([LandscapeProcess.constant(L)], noise)
        N, T = 1000, 5
        intensity = np.full((N, T), 20.0)
        ctrl = ConstantBid(1.2)
        exp = simulate_batch(ctrl, intensity, table, 1e9, 5.0).total_volume[0]
        smp = simulate_batch(ctrl, intensity, table, 1e9, 5.0, mode="sampled", rng=np.random.default_rng(0))
        sd = smp.total_volume.std(ddof=1)
        # the smoothed table carries its 512-point quadrature error on top of sampling noise
        slack = 0.0 if noise.family == "dirac" else 2e-3 * exp
        assert abs(smp.total_volume.mean() - exp) < 3 * sd / np.sqrt(N) + slack

    def test_nan_bid_aborts(self, L2):
        class Bad(ConstantBid):
            def act(self, state, obs):
                return np.full(obs.remaining_goal.shape, np.nan), state

        with pytest.raises(ControllerError, match="period 0"):
            run_episode(Bad(1.0), VolumeScenario.constant(1, 3), L2, 1, 1)

    def test_invalid_inputs(self, L2):
        with pytest.raises(ValueError):
            run_episode(ConstantBid(1.0), VolumeScenario.constant(1, 3), L2, -1, 1)
        with pytest.raises(ValueError):
            run_episode(ConstantBid(1.0), VolumeScenario.constant(1, 3), L2, 1, 0)

    def test_trace_csv(self, L2):
        tr = run_episode(ConstantBid(1.0, K=10), VolumeScenario.constant(10, 2), L2, goal=12, penalty=10)
        lines = tr.to_csv().splitlines()
        assert lines[0] == "t,bid,volume,spend,remaining_goal"
        assert lines[-1] == "final_cost,25.0,penalty_paid,20.0"
        assert len(lines) == 4
