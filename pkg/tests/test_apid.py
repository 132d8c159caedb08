import numpy as np
import pytest
from dataclasses import replace
from scipy.special import logit

from apid import (LOGISTIC_STD, ApidModel, CurvatureMode, abduct, augment, augmentation_mean, curvature_at,
                  curvature_from_derivatives, curvature_penalty, ecou_estimate, init_model, level_set_curvature,
                  load_checkpoint, log_likelihood, masked_record_mean, outcome_curvature_logits, sample_outcomes,
                  save_checkpoint)
from autodiff import MlpParams, Tape, bind, init_mlp, named_parameters
from error_handling import (DataFormatError, DegenerateGradientError, EvidenceOutsideModelError, PreconditionError,
                            ValidationError)
from resflow import Flow, forward, init_flow


def zero_net(hidden=5):
    return MlpParams(weights=[np.zeros((hidden, 1)), np.zeros((1, hidden))], biases=[np.zeros(hidden), np.zeros(1)])


def zero_block_model(outcome_scale, outcome_loc=0.0, eps2=0.25):
    """Flows without blocks: logistic outcome and augmentation coordinates."""
    eps = np.sqrt(eps2)
    flows = [Flow(blocks=[], scale=np.array([eps / LOGISTIC_STD, outcome_scale]), shift=np.array([0.0, outcome_loc]))
             for _ in (0, 1)]
    return ApidModel(flow0=flows[0], flow1=flows[1], g0=zero_net(), g1=zero_net(), eps2=eps2)


@pytest.fixture
def model():
    return init_model(np.random.default_rng(0), loc=(0.0, 0.5), std=(1.0, 1.5), n_blocks=4, hidden=5)


class TestModel:
    def test_init_places_outcome_scale(self, model):
        assert model.flow1.shift[1] == 0.5
        assert model.flow1.scale[1] == pytest.approx(1.5 / LOGISTIC_STD)
        assert model.flow0.scale[0] == pytest.approx(model.eps / LOGISTIC_STD)

    def test_rejects_nonpositive_variance(self, model):
        with pytest.raises(ValidationError):
            replace(model, eps2=0.0)

    def test_rejects_wrong_augmentation_shape(self, model):
        with pytest.raises(PreconditionError):
            replace(model, g0=init_mlp((2, 3, 1), np.random.default_rng(0)))

    def test_with_arm_replaces_one_side(self, model):
        other = init_flow(np.random.default_rng(9), n_blocks=1)
        swapped = model.with_arm(1, flow=other)
        assert swapped.flow1 is other
        assert swapped.flow0 is model.flow0

    def test_names_cover_both_arms(self, model):
        names = named_parameters(model)
        assert any(n.startswith('flow0.') for n in names)
        assert any(n.startswith('g1.') for n in names)
        assert 'eps2' not in names


class TestAugmentation:
    def test_small_noise_recovers_mean(self, model):
        tight = replace(model, eps2=1e-24)
        pairs = augment(tight, 0, 0.7, 5, seed=0)
        np.testing.assert_allclose(pairs[:, 0], 0.7)
        np.testing.assert_allclose(pairs[:, 1], augmentation_mean(model.g0, [0.7])[0], atol=1e-9)

    def test_mean_of_many_draws(self, model):
        n = 100_000
        pairs = augment(model, 1, -0.3, n, seed=1)
        mean = augmentation_mean(model.g1, [-0.3])[0]
        assert abs(pairs[:, 1].mean() - mean) <= 4 * model.eps / np.sqrt(n)

    def test_rejects_empty_draw_count(self, model):
        with pytest.raises(PreconditionError):
            augment(model, 0, 0.0, 0, seed=0)


class TestLikelihood:
    def test_calibrated_zero_block_flow(self):
        peak_matched = zero_block_model(outcome_scale=np.sqrt(2 * np.pi) / 4)
        assert log_likelihood(peak_matched, 0, 0.0, 256, seed=0) == pytest.approx(-0.9189, abs=0.05)

    def test_location_shift_moves_the_maximizer(self):
        ys = np.linspace(-2.0, 2.0, 41)
        curves = []
        for loc in (0.0, 0.5):
            candidate = zero_block_model(outcome_scale=0.6, outcome_loc=loc)
            curves.append([log_likelihood(candidate, 1, y, 32, seed=3) for y in ys])
        assert np.argmax(curves[1]) - np.argmax(curves[0]) == 5

    def test_single_and_many_draws_are_finite(self, model):
        assert np.isfinite(log_likelihood(model, 0, 0.2, 1, seed=0))
        assert np.isfinite(log_likelihood(model, 0, 0.2, 64, seed=0))

    def test_masked_mean_drops_failed_draws(self):
        terms = np.array([1.0, 3.0, 10.0, 20.0])
        converged = np.array([True, False, True, True])
        mean, kept = masked_record_mean(terms, converged, 2)
        assert kept == 2
        assert mean == pytest.approx((1.0 + 15.0) / 2)

    def test_masked_mean_with_nothing_converged(self):
        with pytest.raises(EvidenceOutsideModelError):
            masked_record_mean(np.zeros(4), np.zeros(4, dtype=bool), 2)


class TestQuery:
    def test_identical_flows_return_the_evidence(self, model):
        same = model.with_arm(1, flow=model.flow0)
        for y_prime in np.random.default_rng(7).uniform(-2.0, 2.0, 20):
            result = ecou_estimate(same, 0, y_prime, 1, 16, seed=4)
            assert result.q_hat == pytest.approx(y_prime, abs=10 * 1e-4 * (1 + abs(y_prime)))

    def test_abducted_points_reproduce_the_evidence(self, model):
        u = abduct(model, 1, 0.8, 32, seed=2)
        assert np.all((u > 0) & (u < 1))
        x, _ = forward(model.flow1, u)
        np.testing.assert_allclose(x[:, 1], 0.8, atol=1e-3)

    def test_result_shape(self, model):
        result = ecou_estimate(model, 1, 0.4, 0, 12, seed=5)
        assert result.b == 12
        assert result.latent_points.shape == (12, 2)
        assert np.isfinite(result.q_hat)

    def test_same_arm_rejected(self, model):
        with pytest.raises(PreconditionError):
            ecou_estimate(model, 0, 0.0, 0, 8, seed=0)

    def test_query_gradient_reaches_only_the_counterfactual_flow(self, model):
        tape = Tape()
        bound, leaves = bind(tape, model)
        result = ecou_estimate(bound, 0, 0.2, 1, 16, seed=3)
        names = sorted(leaves)
        grads = dict(zip(names, tape.gradient(result.q_hat, [leaves[n] for n in names])))
        assert all(not np.any(grads[n]) for n in names if n.startswith(('flow0.', 'g0.')))
        assert any(np.any(grads[n]) for n in names if n.startswith('flow1.'))


class TestCurvature:
    def test_circle(self):
        center, r = np.array([0.3, 0.4]), 0.25
        angles = np.linspace(0, 2 * np.pi, 7, endpoint=False)
        u = center + r * np.stack([np.cos(angles), np.sin(angles)], axis=1)

        def circle(d):
            return (d[..., 0] - center[0]) ** 2 + (d[..., 1] - center[1]) ** 2

        np.testing.assert_allclose(np.abs(level_set_curvature(circle, u)), 1.0 / r, rtol=1e-9)

    def test_lines_are_flat(self):
        u = np.array([[0.2, 0.3], [0.6, 0.9]])
        np.testing.assert_allclose(level_set_curvature(lambda d: d[..., 0], u), 0.0, atol=1e-12)
        np.testing.assert_allclose(level_set_curvature(lambda d: d[..., 0] + d[..., 1], u), 0.0, atol=1e-12)

    def test_degenerate_gradient(self):
        with pytest.raises(DegenerateGradientError):
            level_set_curvature(lambda d: (d[..., 0] - 0.5) ** 2 + (d[..., 1] - 0.5) ** 2, np.array([[0.5, 0.5]]))

    def test_formula_sign(self):
        assert curvature_from_derivatives(1.0, 0.0, 0.0, 0.0, 2.0) == -2.0

    def test_blockless_flow_has_flat_level_sets(self):
        flat = zero_block_model(outcome_scale=1.0)
        u = np.array([[0.2, 0.3], [0.5, 0.5], [0.9, 0.1]])
        np.testing.assert_allclose(curvature_at(flat, 0, u), 0.0, atol=1e-9)
        assert curvature_penalty(flat, 0, 0.3, 16, seed=0) == pytest.approx(0.0, abs=1e-9)

    def test_negated_outcome_flips_the_sign(self, model):
        flow = model.flow1
        negated = model.with_arm(1, flow=replace(flow, scale=flow.scale * np.array([1.0, -1.0])))
        u = np.array([[0.3, 0.6], [0.7, 0.4]])
        np.testing.assert_allclose(curvature_at(negated, 1, u), -curvature_at(model, 1, u), rtol=1e-9)

    def test_finite_difference_mode_agrees(self, model):
        z = logit(np.random.default_rng(1).uniform(0.1, 0.9, size=(20, 2)))
        taped, ok_t = outcome_curvature_logits(model.flow0, z, CurvatureMode.TAPED)
        fd, ok_f = outcome_curvature_logits(model.flow0, z, CurvatureMode.FINITE_DIFFERENCE)
        assert ok_t.all() and ok_f.all()
        np.testing.assert_allclose(fd, taped, rtol=1e-3, atol=1e-4)

    def test_single_point_and_domain(self, model):
        assert isinstance(curvature_at(model, 0, [0.4, 0.4]), float)
        with pytest.raises(PreconditionError):
            curvature_at(model, 0, [0.0, 0.4])

    def test_unknown_mode(self, model):
        with pytest.raises(ValidationError):
            outcome_curvature_logits(model.flow0, np.zeros((1, 2)), 'symbolic')

    def test_penalty_is_nonnegative(self, model):
        assert curvature_penalty(model, 1, 0.5, 16, seed=3) >= 0.0


class TestSamplingAndCheckpoints:
    def test_samples_follow_the_outcome_scale(self):
        flat = zero_block_model(outcome_scale=1.0, outcome_loc=2.0)
        samples = sample_outcomes(flat.flow1, 50_000, seed=0)
        assert np.median(samples) == pytest.approx(2.0, abs=0.05)
        assert np.std(samples) == pytest.approx(LOGISTIC_STD, rel=0.03)

    def test_roundtrip_is_exact(self, model, tmp_path):
        path = save_checkpoint(model, tmp_path / 'm.npz', extra={'lambda_kappa': 1.0})
        again = load_checkpoint(path)
        before, after = named_parameters(model), named_parameters(again)
        assert set(before) == set(after)
        for name, array in before.items():
            np.testing.assert_array_equal(after[name], array)
        assert again.eps2 == model.eps2
        assert again.flow0.blocks[0].lipschitz_target == model.flow0.blocks[0].lipschitz_target

    def test_rejects_unknown_version(self, model, tmp_path):
        path = tmp_path / 'old.npz'
        arrays = {name: np.asarray(v) for name, v in named_parameters(model).items()}
        np.savez(path, **arrays, **{'meta.format_version': np.array(99)})
        with pytest.raises(DataFormatError):
            load_checkpoint(path)

    def test_rejects_foreign_archive(self, tmp_path):
        path = tmp_path / 'other.npz'
        np.savez(path, weights=np.zeros(3))
        with pytest.raises(DataFormatError):
            load_checkpoint(path)
