import numpy as np
import pytest
from scipy import stats
from scipy.integrate import cumulative_trapezoid, trapezoid

from error_handling import EmptyLevelSetError, PreconditionError, ValidationError
from level_oracle import (OracleConfig, _weighted_pieces, cdf_oracle, counterfactual_density, ecou_curve, ecou_oracle,
                          observational_density, trace_level_set)
from scm_core import Arm, Scm2D, box_muller, m1, m2, m_perp, oscillating_box_muller

COARSE = OracleConfig(grid_resolution=128)


def triangular_pdf(y, low):
    t = np.asarray(y, dtype=float) - low
    return np.clip(1.0 - np.abs(t - 1.0), 0.0, None)


class TestOracleConfig:
    def test_defaults(self):
        cfg = OracleConfig()
        assert cfg.grid_resolution == 512
        assert cfg.refine_tol == 1e-8
        assert cfg.min_component_length == 1e-6

    def test_rejects_coarse_grid(self):
        with pytest.raises(ValidationError):
            OracleConfig(grid_resolution=8)

    def test_rejects_nonpositive_tolerance(self):
        with pytest.raises(ValidationError):
            OracleConfig(refine_tol=0.0)


class TestTraceLevelSet:
    def test_m1_untreated_diagonal(self):
        polyline = trace_level_set(m1(), 0, 0.0)
        assert len(polyline.segments) == 1
        assert polyline.total_length == pytest.approx(np.sqrt(2.0), abs=1e-3)

    def test_m1_treated_diagonal(self):
        polyline = trace_level_set(m1(), 1, 1.0)
        assert polyline.total_length == pytest.approx(np.sqrt(2.0), abs=1e-3)

    def test_off_grid_level_length(self):
        polyline = trace_level_set(m1(), 0, 0.1)
        assert polyline.total_length == pytest.approx(0.9 * np.sqrt(2.0), abs=1e-6)

    def test_vertices_lie_on_the_level(self):
        scm = m2()
        polyline = trace_level_set(scm, 1, 1.3, COARSE)
        for points in polyline.segments:
            np.testing.assert_allclose(scm.values(Arm.TREATED, points), 1.3, atol=1e-8)

    def test_consecutive_vertices_within_a_cell(self):
        polyline = trace_level_set(box_muller(), 0, 0.5, COARSE)
        cell = 1.0 / COARSE.grid_resolution
        for points in polyline.segments:
            steps = np.abs(np.diff(points, axis=0))
            assert np.all(steps <= cell + 1e-12)

    def test_box_muller_matches_parametrization(self):
        y = 0.5
        polyline = trace_level_set(box_muller(), 0, y)
        points = np.concatenate(polyline.segments)
        expected_u1 = np.exp(-y * y / (2.0 * np.cos(np.pi * points[:, 1]) ** 2))
        assert np.max(np.abs(points[:, 0] - expected_u1)) <= 2.0 / 512

    def test_level_outside_support(self):
        with pytest.raises(PreconditionError):
            trace_level_set(m1(), 0, 1.5)
        with pytest.raises(PreconditionError):
            trace_level_set(m1(), 0, -1.0)

    def test_unreached_level_is_empty(self):
        scm = Scm2D(name='narrow', f=lambda a, u: 0.1 * u[..., 0], support=((-1.0, 1.0), (-1.0, 1.0)))
        with pytest.raises(EmptyLevelSetError):
            trace_level_set(scm, 0, 0.5, COARSE)

    def test_oscillating_fixture_traces_many_components(self):
        polyline = trace_level_set(oscillating_box_muller(), 0, 0.3, COARSE)
        assert len(polyline.segments) > 1


class TestObservationalDensity:
    def test_m1_peak(self):
        assert observational_density(m1(), 0, 0.0) == pytest.approx(1.0, abs=1e-3)

    def test_m1_mid_slope(self):
        assert observational_density(m1(), 1, 0.5) == pytest.approx(0.5, abs=1e-3)

    def test_box_muller_standard_normal(self):
        assert observational_density(box_muller(), 0, 1.0) == pytest.approx(stats.norm.pdf(1.0), abs=1e-3)

    def test_box_muller_on_symmetric_grid(self):
        ys = np.linspace(-3.0, 3.0, 20)
        values = np.array([observational_density(box_muller(), 0, y) for y in ys])
        assert np.max(np.abs(values - stats.norm.pdf(ys))) <= 0.01

    @pytest.mark.parametrize('a,low', [(0, -1.0), (1, 0.0)])
    def test_m1_triangular_closed_form(self, a, low):
        ys = np.linspace(low, low + 2.0, 101)[1:-1]
        values = np.array([observational_density(m1(), a, y, COARSE) for y in ys])
        assert np.max(np.abs(values - triangular_pdf(ys, low))) <= 0.01

    def test_normalization_and_cdf_consistency(self):
        ys = np.linspace(-1.0, 1.0, 101)
        values = np.concatenate([[0.0], [observational_density(m2(), 0, y, COARSE) for y in ys[1:-1]], [0.0]])
        assert trapezoid(values, ys) == pytest.approx(1.0, abs=5e-3)
        cumulative = cumulative_trapezoid(values, ys, initial=0.0)
        for k in range(0, 101, 5):
            assert cumulative[k] == pytest.approx(cdf_oracle(m2(), 0, ys[k], 1_000_000, seed=k), abs=0.01)

    @pytest.mark.parametrize('scm,a,low,high,tol', [
        (m2(), 1, 0.0, 2.0, 5e-3),
        (m_perp(), 0, 1.0 - np.e, 0.0, 5e-3),
        (m_perp(), 1, 0.0, 2.0, 5e-3),
        # mass in strips thinner than a grid cell is not traced
        (oscillating_box_muller(), 0, -4.0, 0.0, 0.05),
    ], ids=['m2-treated', 'mperp-untreated', 'mperp-treated', 'oscillating'])
    def test_density_integrates_to_one(self, scm, a, low, high, tol):
        ys = np.linspace(low + 1e-3, high - 1e-3, 101)
        values = np.array([observational_density(scm, a, y, OracleConfig(grid_resolution=256)) for y in ys])
        assert trapezoid(values, ys) == pytest.approx(1.0, abs=tol)

    def test_m2_treated_is_triangular(self):
        ys = np.linspace(0.0, 2.0, 101)[1:-1]
        values = np.array([observational_density(m2(), 1, y, COARSE) for y in ys])
        assert np.max(np.abs(values - triangular_pdf(ys, 0.0))) <= 0.02

    def test_m_perp_closed_form(self):
        # Y = u1^2 + u1 has density 1 / sqrt(1 + 4y)
        for y in (0.1, 0.7, 1.5):
            assert observational_density(m_perp(), 1, y, COARSE) == pytest.approx(1.0 / np.sqrt(1.0 + 4.0 * y), abs=1e-3)

    def test_piece_weights_use_trapezoidal_rule(self):
        scm = box_muller()
        polyline = trace_level_set(scm, 0, 0.8, COARSE)
        starts, ends, w_start, w_end = _weighted_pieces(scm, Arm.UNTREATED, polyline)
        lengths = np.linalg.norm(ends - starts, axis=1)
        inv_start = 1.0 / np.linalg.norm(scm.gradients(Arm.UNTREATED, starts), axis=1)
        inv_end = 1.0 / np.linalg.norm(scm.gradients(Arm.UNTREATED, ends), axis=1)
        np.testing.assert_allclose(w_start, 0.5 * lengths * inv_start, rtol=1e-12)
        np.testing.assert_allclose(w_end, 0.5 * lengths * inv_end, rtol=1e-12)


class TestEcouOracle:
    def test_m1_golden_value(self):
        assert ecou_oracle(m1(), 0, 0.0, 1) == pytest.approx(1.0, abs=1e-3)

    def test_m2_golden_value(self):
        assert ecou_oracle(m2(), 0, 0.0, 1) == pytest.approx(1.114, abs=0.01)

    def test_m_perp_is_mean_of_treated_map(self):
        assert ecou_oracle(m_perp(), 0, -0.5, 1) == pytest.approx(5.0 / 6.0, rel=1e-4)

    def test_result_within_counterfactual_support(self):
        for y_prime in (-0.8, -0.3, 0.2, 0.9):
            q = ecou_oracle(m2(), 0, y_prime, 1, COARSE)
            low, high = m2().support_of(Arm.TREATED)
            assert low <= q <= high

    @pytest.mark.parametrize('scm', [m1(), m2()], ids=['m1', 'm2'])
    def test_refinement_converges(self, scm):
        coarse = ecou_oracle(scm, 0, 0.3, 1, OracleConfig(grid_resolution=256))
        fine = ecou_oracle(scm, 0, 0.3, 1, OracleConfig(grid_resolution=512))
        assert abs(coarse - fine) <= 1e-3

    def test_same_arm_rejected(self):
        with pytest.raises(PreconditionError):
            ecou_oracle(m1(), 0, 0.0, 0)

    def test_curve_is_ordered_and_matches_pointwise(self):
        grid = np.linspace(-0.9, 0.9, 7)
        serial = ecou_curve(m2(), 0, grid, 1, COARSE, max_workers=1)
        parallel = ecou_curve(m2(), 0, grid, 1, COARSE, max_workers=3)
        np.testing.assert_array_equal(serial, parallel)
        assert serial[3] == ecou_oracle(m2(), 0, grid[3], 1, COARSE)


class TestCounterfactualDensity:
    def test_m1_uniform_on_treated_support(self):
        grid = np.linspace(0.0, 2.0, 101)
        density = counterfactual_density(m1(), 0, 0.0, 1, grid)
        np.testing.assert_allclose(density, 0.5, atol=0.02)

    def test_m2_lower_half(self):
        grid = np.linspace(0.0, 2.0, 101)
        density = counterfactual_density(m2(), 0, 0.0, 1, grid)
        assert density[25] == pytest.approx(0.5, abs=0.05)

    def test_integrates_to_one(self):
        grid = np.linspace(-0.5, 2.5, 301)
        density = counterfactual_density(m2(), 0, 0.4, 1, grid, COARSE)
        assert trapezoid(density, grid) == pytest.approx(1.0, abs=1e-3)
        assert np.all(density >= 0)

    def test_same_arm_rejected(self):
        with pytest.raises(PreconditionError):
            counterfactual_density(m1(), 1, 1.0, 1, np.linspace(0, 2, 11))

    def test_grid_must_increase(self):
        with pytest.raises(PreconditionError):
            counterfactual_density(m1(), 0, 0.0, 1, [1.0, 0.5, 0.0])


class TestCdfOracle:
    def test_upper_support_bound(self):
        assert cdf_oracle(m1(), 0, 1.0, 10_000, seed=0) == 1.0

    def test_m1_median(self):
        assert cdf_oracle(m1(), 0, 0.0, 1_000_000, seed=0) == pytest.approx(0.5, abs=0.002)

    def test_m2_treated_median(self):
        assert cdf_oracle(m2(), 1, 1.0, 1_000_000, seed=0) == pytest.approx(0.5, abs=0.002)

    def test_rejects_empty_sample(self):
        with pytest.raises(PreconditionError):
            cdf_oracle(m1(), 0, 0.0, 0, seed=0)
