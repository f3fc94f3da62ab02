import numpy as np
import pytest

from textdiffusion import schedule as sch
from textdiffusion.schedule import (
    LossLedger,
    NoiseSchedule,
    ScheduleError,
    adapt,
    coarsen,
    fit_mapping,
    pool_adjacent_violators,
    sqrt_init,
)


def reference_piecewise_linear(x, knot_losses, knot_alphas):
    """Independent rendering of the interpolation rule: within each knot
    interval the mapping is the straight line through its endpoints,
    clamped outside the knot range."""
    if x <= knot_losses[0]:
        return knot_alphas[0]
    if x >= knot_losses[-1]:
        return knot_alphas[-1]
    for k in range(1, len(knot_losses)):
        if x < knot_losses[k]:
            l0, l1 = knot_losses[k - 1], knot_losses[k]
            a0, a1 = knot_alphas[k - 1], knot_alphas[k]
            return (a1 - a0) / (l1 - l0) * (x - l0) + a0
    return knot_alphas[-1]


def affine_schedule(T, n, start=0.95, end=0.05):
    """Strictly decreasing affine column, identical across positions."""
    column = np.linspace(start, end, T + 1)
    return NoiseSchedule(np.repeat(column[:, None], n, axis=1))


def filled_ledger(schedule, loss_fn):
    """Ledger with one sample per (t, i): value loss_fn(t)."""
    ledger = LossLedger(schedule.T, schedule.n)
    no_pad = np.zeros(schedule.n, dtype=bool)
    for t in range(1, schedule.T + 1):
        ledger.record(t, np.full(schedule.n, loss_fn(t)), no_pad)
    return ledger


class TestSqrtInit:
    def test_t0_level(self):
        s = sqrt_init(T=2000, n=4, s0=1e-4)
        np.testing.assert_allclose(s.alpha_bar[0], 0.99, rtol=1e-12)

    def test_final_level_clips_to_floor(self):
        s = sqrt_init(T=2000, n=4, s0=1e-4, alpha_min=1e-4)
        assert np.all(s.alpha_bar[-1] > 1e-4)
        np.testing.assert_allclose(s.alpha_bar[-1], 1e-4, rtol=1e-3)

    def test_positions_identical_at_init(self):
        s = sqrt_init(T=100, n=8)
        for i in range(1, 8):
            np.testing.assert_array_equal(s.alpha_bar[:, i], s.alpha_bar[:, 0])

    def test_closed_form_midpoint(self):
        s = sqrt_init(T=100, n=1, s0=1e-4)
        assert s.alpha_bar[50, 0] == pytest.approx(1 - np.sqrt(0.5 + 1e-4), rel=1e-12)

    def test_monotone_and_bounded(self):
        s = sqrt_init(T=500, n=3)
        s.validate()

    def test_bad_parameters_rejected(self):
        with pytest.raises(ScheduleError):
            sqrt_init(T=1, n=4)
        with pytest.raises(ScheduleError):
            sqrt_init(T=10, n=0)
        with pytest.raises(ScheduleError):
            sqrt_init(T=10, n=2, s0=0.0)


class TestCoefficients:
    @pytest.fixture
    def schedule(self):
        return sqrt_init(T=200, n=6)

    def test_product_identity_every_cell(self, schedule):
        for t in range(1, schedule.T + 1):
            c = schedule.coefficients(t)
            np.testing.assert_allclose(c.alpha_t * c.alpha_bar_prev, c.alpha_bar_t, rtol=1e-12)

    def test_variance_inequality_every_cell(self, schedule):
        for t in range(1, schedule.T + 1):
            c = schedule.coefficients(t)
            assert np.all(c.beta_tilde_t <= 1.0 - c.alpha_bar_prev + 1e-15)

    def test_first_step_posterior_variance_is_small(self, schedule):
        c = schedule.coefficients(1)
        assert np.all(c.beta_tilde_t < 0.02)

    def test_ranges(self, schedule):
        for t in (1, 50, 200):
            c = schedule.coefficients(t)
            for arr in (c.alpha_t, c.beta_t, c.beta_tilde_t):
                assert np.all(arr > 0) and np.all(arr < 1)

    def test_out_of_range_rejected(self, schedule):
        with pytest.raises(ScheduleError):
            schedule.coefficients(0)
        with pytest.raises(ScheduleError):
            schedule.coefficients(201)


class TestLossLedger:
    def test_always_padded_position_stays_sentinel(self):
        ledger = LossLedger(T=10, n=3)
        mask = np.array([False, False, True])
        for t in range(1, 11):
            ledger.record(t, np.array([0.1, 0.2, 0.9]), mask)
        assert np.all(ledger.values[:, 2] == LossLedger.SENTINEL)
        assert np.all(ledger.counts[:, 2] == 0)

    def test_ema_arithmetic_decay_half(self):
        ledger = LossLedger(T=5, n=1, decay=0.5)
        no_pad = np.array([False])
        ledger.record(3, np.array([4.0]), no_pad)
        assert ledger.values[3, 0] == 4.0  # first sample seeds the mean
        ledger.record(3, np.array([8.0]), no_pad)
        assert ledger.values[3, 0] == pytest.approx(0.5 * 4.0 + 0.5 * 8.0)

    def test_repeated_zeros_drive_entry_to_zero(self):
        ledger = LossLedger(T=5, n=1, decay=0.5)
        no_pad = np.array([False])
        ledger.record(1, np.array([1.0]), no_pad)
        for _ in range(60):
            ledger.record(1, np.array([0.0]), no_pad)
        assert ledger.values[1, 0] == pytest.approx(0.0, abs=1e-12)

    def test_negative_loss_rejected(self):
        ledger = LossLedger(T=5, n=1)
        with pytest.raises(ScheduleError):
            ledger.record(1, np.array([-0.5]), np.array([False]))


class TestCoarsen:
    def test_knot_count_matches_stride(self):
        s = sqrt_init(T=2000, n=2)
        ledger = filled_ledger(s, lambda t: t / 2000)
        knots = coarsen(ledger, s, K=20)
        assert all(len(k) == 100 for k in knots)

    def test_window_means_of_increasing_losses_preserved(self):
        s = affine_schedule(T=40, n=1)
        ledger = filled_ledger(s, lambda t: float(t))
        knots = coarsen(ledger, s, K=10)[0]
        # windows are t=1..10, 11..20, ...: means 5.5, 15.5, 25.5, 35.5
        np.testing.assert_allclose(knots.losses, [5.5, 15.5, 25.5, 35.5])
        mapping = fit_mapping(knots)
        np.testing.assert_allclose(mapping.losses[1:-1], knots.losses)

    def test_unvisited_position_skips_round(self):
        s = sqrt_init(T=20, n=2)
        ledger = LossLedger(20, 2)
        for t in range(1, 21):
            ledger.record(t, np.array([0.5 * t, 0.0]), np.array([False, True]))
        knots = coarsen(ledger, s, K=5)
        assert knots[0] is not None
        assert knots[1] is None

    def test_holes_filled_by_interpolation_along_t(self):
        s = affine_schedule(T=10, n=1)
        ledger = LossLedger(10, 1)
        no_pad = np.array([False])
        ledger.record(1, np.array([1.0]), no_pad)
        ledger.record(9, np.array([9.0]), no_pad)  # cells 2..8 unvisited
        knots = coarsen(ledger, s, K=5)[0]
        # linear fill gives loss=t for t=1..9, clamped to 9 at t=10:
        # window means are mean(1..5)=3 and mean(6,7,8,9,9)=7.8
        np.testing.assert_allclose(knots.losses, [3.0, 7.8], rtol=1e-12)


class TestFitMapping:
    def test_constant_losses_collapse_to_noop(self):
        s = sqrt_init(T=40, n=1)
        ledger = filled_ledger(s, lambda t: 0.7)
        knots = coarsen(ledger, s, K=10)[0]
        assert fit_mapping(knots) is None
        adapted = adapt(s, ledger, K=10)
        np.testing.assert_array_equal(adapted.alpha_bar, s.alpha_bar)

    def test_query_below_all_knots_clamps(self):
        s = affine_schedule(T=40, n=1)
        ledger = filled_ledger(s, lambda t: float(t))
        mapping = fit_mapping(coarsen(ledger, s, K=10)[0])
        assert mapping(-100.0) == mapping.alphas[0]
        assert mapping(1e9) == mapping.alphas[-1]

    def test_matches_reference_interpolation(self):
        s = sqrt_init(T=60, n=1)
        rng = np.random.default_rng(0)
        noise = rng.normal(scale=0.02, size=61)
        ledger = filled_ledger(s, lambda t: t / 60 + noise[t])
        mapping = fit_mapping(coarsen(ledger, s, K=10)[0])
        for q in np.linspace(-0.2, 1.3, 37):
            expected = reference_piecewise_linear(q, mapping.losses, mapping.alphas)
            assert mapping(q) == pytest.approx(expected, abs=1e-12)

    def test_pava_oracle_brute_force(self):
        # PAVA solution must be non-decreasing and no worse (weighted L2)
        # than any non-decreasing candidate from a coarse search.
        rng = np.random.default_rng(5)
        values = rng.normal(size=6)
        weights = rng.uniform(0.5, 2.0, size=6)
        fitted = pool_adjacent_violators(values, weights)
        assert np.all(np.diff(fitted) >= 0)
        cost = np.sum(weights * (fitted - values) ** 2)
        for _ in range(2000):
            candidate = np.sort(rng.normal(size=6))
            alt = np.sum(weights * (candidate - values) ** 2)
            assert cost <= alt + 1e-9


class TestAdapt:
    def test_affine_fixed_point(self):
        """Affine losses against an affine schedule: adapt is the identity
        up to interpolation rounding (<= 1e-9)."""
        s = affine_schedule(T=200, n=4)
        ledger = filled_ledger(s, lambda t: 0.01 + 0.002 * t)
        adapted = adapt(s, ledger, K=20)
        np.testing.assert_allclose(adapted.alpha_bar, s.alpha_bar, atol=1e-9)

    def test_concave_losses_flatten_early_decay(self):
        """A loss curve that rises fast early means the current schedule
        destroys signal too quickly there; the recalibrated alpha_bar holds
        more signal (decays slower, i.e. is flatter) at small t."""
        s = sqrt_init(T=100, n=1)
        ledger = filled_ledger(s, lambda t: np.sqrt(t / 100.0))
        adapted = adapt(s, ledger, K=10)
        t_probe = 10
        assert adapted.alpha_bar[t_probe, 0] > s.alpha_bar[t_probe, 0]
        # Hand-built knot oracle: new alpha at t comes from evaluating the
        # reference interpolation at the evenly spaced target.
        knots = coarsen(ledger, s, K=10)[0]
        mapping = fit_mapping(knots)
        targets = np.linspace(mapping.losses[0], mapping.losses[-1], 100)
        expected = reference_piecewise_linear(targets[t_probe - 1], mapping.losses, mapping.alphas)
        assert adapted.alpha_bar[t_probe, 0] == pytest.approx(expected, abs=1e-12)

    def test_invariants_hold_after_every_adapt(self):
        rng = np.random.default_rng(11)
        s = sqrt_init(T=80, n=5)
        for round_idx in range(4):
            ledger = LossLedger(80, 5)
            for t in range(1, 81):
                # noisy, loosely increasing losses; random pads
                losses = np.clip(t / 80 + rng.normal(scale=0.1, size=5), 0, None)
                pads = rng.random(5) < 0.2
                ledger.record(t, losses, pads)
            s = adapt(s, ledger, K=8)
            s.validate()
            for t in range(1, 81):
                c = s.coefficients(t)
                assert np.all(c.beta_tilde_t <= 1.0 - c.alpha_bar_prev + 1e-15)

    def test_t0_level_held_fixed(self):
        s = sqrt_init(T=50, n=2)
        ledger = filled_ledger(s, lambda t: t * 0.01)
        adapted = adapt(s, ledger, K=10)
        np.testing.assert_array_equal(adapted.alpha_bar[0], s.alpha_bar[0])

    def test_positions_can_diverge(self):
        """Different per-position loss shapes are allowed to produce
        different columns (nothing forces them equal)."""
        s = sqrt_init(T=60, n=2)
        ledger = LossLedger(60, 2)
        no_pad = np.array([False, False])
        for t in range(1, 61):
            ledger.record(t, np.array([t / 60.0, (t / 60.0) ** 3]), no_pad)
        adapted = adapt(s, ledger, K=10)
        assert not np.allclose(adapted.alpha_bar[:, 0], adapted.alpha_bar[:, 1])


class TestPersistence:
    def test_binary_round_trip(self, tmp_path):
        s = sqrt_init(T=64, n=5)
        path = tmp_path / "schedule.bin"
        s.save(path)
        loaded = NoiseSchedule.load(path)
        np.testing.assert_array_equal(loaded.alpha_bar, s.alpha_bar)
        assert loaded.alpha_min == s.alpha_min
        # byte-identical re-save
        assert path.read_bytes() == loaded.to_bytes()

    def test_bad_magic_rejected(self):
        with pytest.raises(ScheduleError, match="magic"):
            NoiseSchedule.from_bytes(b"NOTMAGIC" + b"\0" * 64)

    def test_csv_export_row_count(self, tmp_path):
        s = sqrt_init(T=20, n=6)
        path = tmp_path / "curves.csv"
        rows = s.export_csv(path, positions=[0, 3])
        assert rows == 21 * 2
        header = path.read_text().splitlines()[0]
        assert header == "t,i,alpha_bar,loss_mean"
