import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import special, stats

from bidlab.landscape import (DIRAC, BidLandscape, BidNoise, LandscapeProcess, ResponseTable, cdf_at,
                              expected_spend, expected_volume, landscape_from_atoms,
                              landscape_from_samples, lognormal_landscape, make_price_grid,
                              smooth_landscape)


def random_landscape(seed, grid=None):
    grid = grid or make_price_grid()
    r = np.random.default_rng(seed)
    mass = r.dirichlet(np.full(grid.n_bins, 0.3))
    cdf = np.cumsum(mass)
    cdf[-1] = 1.0
    return BidLandscape(grid, np.minimum(cdf, 1.0))


class TestGrid:
    def test_paper_grid_endpoints(self):
        g = make_price_grid(0.01, 100, 100)
        assert g.edges[0] == 0.01 and g.edges[99] == 100.0

    def test_two_bin_grid(self):
        assert make_price_grid(1, 1e9, 2).edges.tolist() == [1.0, 1e9]

    def test_edge_33(self):
        g = make_price_grid(0.01, 100, 100)
        assert g.edges[33] == pytest.approx(0.01 * 10 ** (4 * 33 / 99), rel=1e-13)
        assert g.edges[33] == pytest.approx(0.21544, abs=5e-6)

    def test_geometric_spacing(self):
        e = make_price_grid().edges
        ratios = e[1:] / e[:-1]
        assert np.all(np.diff(e) > 0)
        assert np.max(np.abs(ratios / ratios[0] - 1)) < 1e-12

    @pytest.mark.parametrize("args", [(0.0, 1.0, 10), (-1.0, 1.0, 10), (1.0, 1.0, 10), (0.01, 100, 1)])
    def test_invalid(self, args):
        with pytest.raises(ValueError):
            make_price_grid(*args)


class TestResponse:
    def test_cdf_examples(self, L2):
        assert cdf_at(L2, 0.0) == 0.0
        assert cdf_at(L2, 1.0) == 0.5
        assert cdf_at(L2, 200.0) == 1.0

    def test_tie_is_win(self, L2):
        assert cdf_at(L2, 0.5) == 0.5
        assert cdf_at(L2, np.nextafter(0.5, 0)) == 0.0

    def test_volume_examples(self, L2):
        assert expected_volume(L2, 10, 0.0) == 0.0
        assert expected_volume(L2, 10, 1.0) == 5.0
        assert expected_volume(L2, 10, 100.0) == 10.0

    def test_spend_examples(self, L2):
        # oracle: enumerate the two atoms
        atoms = [(0.5, 0.5), (2.0, 0.5)]
        oracle = lambda bid: 10 * sum(p * b for b, p in atoms if b <= bid)
        for bid, want in [(0.0, 0.0), (1.0, 2.5), (100.0, 12.5)]:
            assert expected_spend(L2, 10, bid) == pytest.approx(oracle(bid), abs=1e-12)
            assert expected_spend(L2, 10, bid) == pytest.approx(want, abs=1e-12)

    def test_default_grid_atoms_round_to_nearest_level(self):
        g = make_price_grid()
        L = landscape_from_atoms(g, [0.5, 2.0], [0.5, 0.5])
        lvl = g.edges[g.nearest_bin([0.5, 2.0])]
        assert cdf_at(L, 1.0) == 0.5
        assert expected_spend(L, 10, 100.0) == pytest.approx(10 * 0.5 * lvl.sum())
        assert abs(math.log(lvl[0] / 0.5)) <= 0.5 * math.log(g.ratio) + 1e-12

    @pytest.mark.parametrize("fn", [expected_volume, expected_spend])
    def test_negative_intensity(self, L2, fn):
        with pytest.raises(ValueError):
            fn(L2, -1.0, 1.0)

    def test_negative_bid(self, L2):
        with pytest.raises(ValueError):
            cdf_at(L2, -0.1)

    def test_invalid_cdf(self):
        g = make_price_grid(1, 10, 3)
        with pytest.raises(ValueError):
            BidLandscape(g, [0.5, 0.4, 1.0])
        with pytest.raises(ValueError):
            BidLandscape(g, [0.1, 0.4, 0.9])

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 10**6), bids=st.lists(st.floats(0, 150), min_size=2, max_size=20))
    def test_monotone_and_second_price(self, seed, bids):
        b = np.sort(np.array(bids))
        raw = random_landscape(seed)
        for L in (raw, smooth_landscape(raw, BidNoise())):
            assert np.all(np.diff(expected_volume(L, 1.0, b)) >= -1e-12)
            assert np.all(np.diff(expected_spend(L, 1.0, b)) >= -1e-12)
        # price paid never exceeds the submitted bid (a randomized bid may exceed its control level)
        assert np.all(expected_spend(raw, 1.0, b) <= b * expected_volume(raw, 1.0, b) + 1e-12)

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 10**6))
    def test_pdf_sums_to_one(self, seed):
        L = random_landscape(seed)
        assert abs(L.pdf.sum() - 1) < 1e-9
        assert L.cdf[-1] == 1.0


class TestSmoothing:
    def test_dirac_identity(self, L2):
        out = smooth_landscape(L2, DIRAC)
        assert np.array_equal(out.cdf, L2.cdf)

    def test_gamma_closed_form(self, L2):
        k, cv = 4.0, 1.0
        theta = cv / k

        def survival(x):  # Erlang survival, e^{-x/θ} Σ (x/θ)^j / j!
            return math.exp(-x / theta) * sum((x / theta) ** j / math.factorial(j) for j in range(int(k)))

        closed = 0.5 * survival(0.5) + 0.5 * survival(2.0)
        assert closed == pytest.approx(0.4498, abs=1e-4)
        mc_bids = np.random.default_rng(7).gamma(k, theta, 10**6)
        mc = 0.5 * np.mean(mc_bids >= 0.5) + 0.5 * np.mean(mc_bids >= 2.0)
        assert mc == pytest.approx(closed, abs=3e-3)
        sm = smooth_landscape(L2, BidNoise("gamma", 4.0))
        # cv = 1.0 is a grid level of the power-of-two grid; 512-point quadrature
        assert cdf_at(sm, 1.0) == pytest.approx(closed, abs=2e-3)

    def test_monotone_in_monotone_out(self):
        L = lognormal_landscape(make_price_grid(), 1.0, 1.0)
        for noise in (BidNoise("gamma", 4.0), BidNoise("lognormal", 0.3)):
            sm = smooth_landscape(L, noise)
            assert np.all(np.diff(sm.cdf) >= 0)
            assert np.all((sm.cdf >= 0) & (sm.cdf <= 1))

    @pytest.mark.parametrize("family", ["gamma", "lognormal"])
    def test_noise_mean_is_control_level(self, family, rng):
        noise = BidNoise(family, 4.0 if family == "gamma" else 0.5)
        z = noise.unit_quantiles()
        assert z.mean() == pytest.approx(1.0, abs=2e-3)
        for cv in (0.1, 3.0):
            assert noise.sample(rng, cv, 200000).mean() == pytest.approx(cv, rel=1e-2)

    @pytest.mark.parametrize("shape", [0.0, -1.0])
    def test_degenerate_noise(self, shape):
        with pytest.raises(ValueError):
            BidNoise("gamma", shape)

    def test_smoothing_is_linear_in_pdf(self):
        g = make_price_grid()
        a, b = random_landscape(1, g), random_landscape(2, g)
        mix = BidLandscape(g, np.minimum(0.3 * a.cdf + 0.7 * b.cdf, 1.0))
        n = BidNoise()
        lhs = smooth_landscape(mix, n).spend
        rhs = 0.3 * smooth_landscape(a, n).spend + 0.7 * smooth_landscape(b, n).spend
        assert np.allclose(lhs, rhs, atol=1e-12)

    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 10**6), shape=st.floats(0.5, 20))
    def test_smoothed_values_in_unit_interval(self, seed, shape):
        sm = smooth_landscape(random_landscape(seed), BidNoise("gamma", shape))
        assert np.all(sm.cdf >= 0) and np.all(sm.cdf <= 1)


class TestSamples:
    def test_single_sample(self):
        g = make_price_grid()
        L = landscape_from_samples([1.0], g)
        k = g.nearest_bin(1.0)
        assert np.all(L.cdf[:k] == 0) and np.all(L.cdf[k:] == 1)

    def test_counts_give_L2(self, pow2_grid, L2):
        L = landscape_from_samples([0.5, 0.5, 2.0, 2.0], pow2_grid)
        assert np.array_equal(L.cdf, L2.cdf)

    def test_clamping(self):
        L = landscape_from_samples([1000.0], make_price_grid())
        assert L.pdf[-1] == 1.0 and L.pdf[:-1].sum() == 0

    def test_empty(self):
        with pytest.raises(ValueError):
            landscape_from_samples([], make_price_grid())

    @settings(max_examples=30, deadline=None)
    @given(samples=st.lists(st.floats(0.01, 100), min_size=1, max_size=50), bid=st.floats(0.01, 100))
    def test_empirical_fraction_within_one_bin(self, samples, bid):
        g = make_price_grid()
        L = landscape_from_samples(samples, g)
        s = np.array(samples)
        lo = np.mean(s <= bid / g.ratio)
        hi = np.mean(s <= bid * g.ratio)
        assert lo - 1e-12 <= cdf_at(L, bid) <= hi + 1e-12


class TestFiles:
    def test_round_trip_bit_exact(self, tmp_path):
        g = make_price_grid()
        proc = LandscapeProcess(g, np.stack([random_landscape(s, g).cdf for s in range(3)]))
        text = proc.to_csv(tmp_path / "a.csv")
        back = LandscapeProcess.from_csv(tmp_path / "a.csv")
        assert back.to_csv() == text
        assert np.array_equal(back.cdfs, proc.cdfs)
        assert text.splitlines()[0] == "grid,0.01,100.0,100"

    def test_bad_header(self):
        with pytest.raises(ValueError):
            LandscapeProcess.parse_csv("0,0.5,1.0\n")

    def test_response_table_matches_landscape(self):
        # kernel vs 512-quantile quadrature: agree to the quadrature error
        g = make_price_grid()
        L = lognormal_landscape(g, 1.0, 0.8)
        table = ResponseTable.build([LandscapeProcess.constant(L)], BidNoise())
        sm = smooth_landscape(L, BidNoise())
        bids = np.array([0.0, 0.005, 0.3, 1.0, 7.7, 150.0])
        w, s, _, _ = table.lookup(bids, 0, np.zeros(len(bids), int))
        assert np.allclose(w, sm.win_probability(bids), atol=2e-3)
        assert np.allclose(s, sm.spend_per_impression(bids), rtol=5e-3, atol=2e-3)
        raw = ResponseTable.build([LandscapeProcess.constant(L)])
        w, s, dw, _ = raw.lookup(bids, 0, np.zeros(len(bids), int))
        assert np.array_equal(w, L.win_probability(bids)) and not dw.any()

    @pytest.mark.parametrize("noise", [BidNoise("gamma", 4.0), BidNoise("lognormal", 0.3)])
    def test_table_exact_for_randomized_bid(self, L2, pow2_grid, noise):
        # one atom at price p: win = P(cv * Z >= p), spend = p * win
        table = ResponseTable.build([LandscapeProcess.constant(L2)], noise)
        bids = np.array([0.3, 0.5, 0.77, 1.0, 1.9, 3.3])
        w, s, _, _ = table.lookup(bids, 0, np.zeros(len(bids), int))
        if noise.family == "gamma":
            sf = lambda x: special.gammaincc(4.0, 4.0 * x)
        else:
            sf = lambda x: stats.norm.sf((np.log(x) + 0.045) / 0.3)
        win = 0.5 * sf(0.5 / bids) + 0.5 * sf(2.0 / bids)
        spend = 0.5 * 0.5 * sf(0.5 / bids) + 0.5 * 2.0 * sf(2.0 / bids)
        assert np.allclose(w, win, atol=1e-7)
        assert np.allclose(s, spend, atol=1e-7)

    @settings(max_examples=40, deadline=None)
    @given(st.floats(0.02, 50.0))
    def test_table_derivative(self, bid):
        g = make_price_grid()
        table = ResponseTable.build([LandscapeProcess.constant(lognormal_landscape(g, 2.0, 1.0))], BidNoise())
        row = np.zeros(1, int)
        h = 1e-5 * bid
        w, s, dw, ds = table.lookup(np.array([bid]), 0, row)
        wp, sp, _, _ = table.lookup(np.array([bid + h]), 0, row)
        wm, sm, _, _ = table.lookup(np.array([bid - h]), 0, row)
        assert dw[0] == pytest.approx((wp[0] - wm[0]) / (2 * h), rel=1e-4, abs=1e-7)
        assert ds[0] == pytest.approx((sp[0] - sm[0]) / (2 * h), rel=1e-4, abs=1e-7)
