"""Unit tests for scenario objectives and consistency regularizers."""

import math
from typing import Dict, List, Optional

import numpy as np
import pytest
from pydantic import ValidationError

from crossfact.core import DataError, Label, Regularizer, Scenario
from crossfact.data import Example
from crossfact.losses import (
    LossSpec,
    UpstreamGradients,
    batch_average,
    j_rearranged,
    loss_confidence_penalty,
    loss_parallel,
    loss_single,
    loss_zero_shot,
    one_hot,
    regularizer_value,
)
from crossfact.model import ForwardTrace, ModelParams, forward_batch

ALL_REGS = [reg for reg in Regularizer if reg is not Regularizer.NONE]


def make_trace(
    logits: np.ndarray, feature: Optional[np.ndarray] = None, penultimate: Optional[np.ndarray] = None
) -> ForwardTrace:
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    b = logits.shape[0]
    return ForwardTrace(
        token_ids=[np.array([0])] * b,
        pooled=np.zeros((b, 2)),
        feature=np.ones((b, 2)) if feature is None else feature,
        penultimate=np.ones((b, 2)) if penultimate is None else penultimate,
        logits=logits,
    )


def parallel_spec(reg: Regularizer = Regularizer.NONE, lam: float = 1.0, **kwargs: object) -> LossSpec:
    return LossSpec(scenario=Scenario.PARALLEL, regularizer=reg, lam=lam, **kwargs)


class TestLossSpec:
    """Test LossSpec validation and defaults."""

    def test_defaults(self) -> None:
        """Test the default loss specification."""
        spec = LossSpec()
        assert spec.scenario is Scenario.ZERO_SHOT
        assert spec.regularizer is Regularizer.NONE
        assert spec.strength == 1.0

    def test_j_defaults_to_quarter_strength(self) -> None:
        """Test that J defaults to lambda 0.25."""
        assert LossSpec(scenario=Scenario.PARALLEL, regularizer=Regularizer.J).strength == 0.25
        assert LossSpec(scenario=Scenario.PARALLEL, regularizer=Regularizer.JS).strength == 1.0

    def test_explicit_lambda_wins(self) -> None:
        """Test that an explicit lambda overrides the default."""
        spec = LossSpec.model_validate({"scenario": "parallel", "regularizer": "j", "lambda": 2.0})
        assert spec.strength == 2.0

    @pytest.mark.parametrize("scenario", [Scenario.ZERO_SHOT, Scenario.NON_PARALLEL])
    def test_regularizer_requires_parallel(self, scenario: Scenario) -> None:
        """Test that regularizers need the parallel scenario."""
        with pytest.raises(ValidationError, match="parallel scenario"):
            LossSpec(scenario=scenario, regularizer=Regularizer.KL)

    def test_negative_lambda_rejected(self) -> None:
        """Test that lambda must be non-negative."""
        with pytest.raises(ValidationError):
            parallel_spec(Regularizer.JS, lam=-0.1)

    def test_secondary_needs_primary_and_must_differ(self) -> None:
        """Test the rules for a secondary regularizer."""
        with pytest.raises(ValidationError, match="primary"):
            LossSpec(scenario=Scenario.PARALLEL, secondary_regularizer=Regularizer.MSE_FEATURE)
        with pytest.raises(ValidationError, match="differ"):
            parallel_spec(Regularizer.JS, secondary_regularizer=Regularizer.JS)

    def test_describe_lists_terms(self) -> None:
        """Test the objective description string."""
        spec = parallel_spec(Regularizer.JS, secondary_regularizer=Regularizer.MSE_FEATURE, secondary_lam=0.5)
        assert spec.describe() == "parallel+js@1+mse-feat@0.5"
        assert LossSpec(confidence_penalty=0.1).describe() == "zero-shot+cp@0.1"


class TestZeroShotAndPenalty:
    """Test the single-example cross-entropy objectives."""

    def test_confident_correct_prediction_costs_nothing(self) -> None:
        """Test zero cross-entropy for a confident correct prediction."""
        values, _ = loss_zero_shot(make_trace([60.0, 0.0, 0.0]), Label.SUP)
        assert values[0] == pytest.approx(0.0, abs=1e-12)

    def test_uniform_prediction_costs_ln3(self) -> None:
        """Test that a uniform prediction costs ln 3."""
        values, _ = loss_zero_shot(make_trace([0.0, 0.0, 0.0]), Label.NEI)
        assert values[0] == pytest.approx(math.log(3))

    def test_logit_gradient_is_p_minus_q(self) -> None:
        """Test the logit gradient p - q."""
        trace = make_trace([0.2, -0.4, 1.0])
        _, grads = loss_zero_shot(trace, Label.REF)
        np.testing.assert_allclose(grads.logits, trace.distribution - one_hot(np.array([1])))

    def test_zero_penalty_equals_cross_entropy(self) -> None:
        """Test that beta 0 reduces to cross-entropy."""
        trace = make_trace([0.3, 0.1, -0.2])
        a, ga = loss_zero_shot(trace, Label.SUP)
        b, gb = loss_confidence_penalty(trace, Label.SUP, 0.0)
        np.testing.assert_array_equal(a, b)
        np.testing.assert_array_equal(ga.logits, gb.logits)

    def test_penalty_at_uniform(self) -> None:
        """Test the confidence penalty at the uniform prediction."""
        values, _ = loss_confidence_penalty(make_trace([0.0, 0.0, 0.0]), Label.SUP, 0.3)
        assert values[0] == pytest.approx(math.log(3) - 0.3 * math.log(3))

    def test_penalty_gradient_matches_finite_differences(self, rng: np.random.Generator) -> None:
        """Test the penalty gradient against central differences."""
        z = rng.normal(size=3)
        _, grads = loss_confidence_penalty(make_trace(z), Label.NEI, 0.4)
        h = 1e-6
        for i in range(3):
            step = np.zeros(3)
            step[i] = h
            up = loss_confidence_penalty(make_trace(z + step), Label.NEI, 0.4)[0][0]
            down = loss_confidence_penalty(make_trace(z - step), Label.NEI, 0.4)[0][0]
            assert grads.logits[0, i] == pytest.approx((up - down) / (2 * h), rel=1e-4, abs=1e-9)

    def test_loss_single_uses_penalty_when_configured(self) -> None:
        """Test that loss_single applies a configured penalty."""
        trace = make_trace([0.5, 0.0, 0.0])
        values, _ = loss_single(trace, [Label.SUP], LossSpec(confidence_penalty=0.2))
        expected, _ = loss_confidence_penalty(trace, Label.SUP, 0.2)
        np.testing.assert_array_equal(values, expected)

    def test_label_count_mismatch_rejected(self) -> None:
        """Test that labels must match the batch size."""
        with pytest.raises(DataError, match="labels"):
            loss_zero_shot(make_trace(np.zeros((2, 3))), [Label.SUP, Label.REF, Label.NEI])


class TestParallel:
    """Test the regularized pair loss."""

    def test_zero_lambda_is_two_cross_entropies(self, rng: np.random.Generator) -> None:
        """Test that lambda 0 leaves two cross-entropies."""
        to, tt = make_trace(rng.normal(size=3)), make_trace(rng.normal(size=3))
        values, _, _ = loss_parallel(to, tt, Label.REF, parallel_spec(Regularizer.JS, lam=0.0))
        ce = loss_zero_shot(to, Label.REF)[0] + loss_zero_shot(tt, Label.REF)[0]
        assert values[0] == ce[0]

    @pytest.mark.parametrize("reg", ALL_REGS)
    def test_identical_traces_contribute_nothing(self, reg: Regularizer, rng: np.random.Generator) -> None:
        """Test that identical traces give a zero regularizer."""
        trace = make_trace(rng.normal(size=(2, 3)), rng.normal(size=(2, 2)), rng.normal(size=(2, 2)))
        assert np.all(np.abs(regularizer_value(reg, trace, trace)) <= 1e-12)

    def test_j_matches_rearranged_form(self, rng: np.random.Generator) -> None:
        """Test the J loss against its cross/self entropy rearrangement."""
        to, tt = make_trace(rng.normal(size=(5, 3))), make_trace(rng.normal(size=(5, 3)))
        labels = [Label.SUP, Label.REF, Label.NEI, Label.SUP, Label.NEI]
        values, _, _ = loss_parallel(to, tt, labels, parallel_spec(Regularizer.J, lam=0.25))
        np.testing.assert_allclose(values, j_rearranged(to, tt, labels, 0.25), atol=1e-10, rtol=0)

    def test_mismatched_labels_rejected(self) -> None:
        """Test that pair batches need matching label counts."""
        trace = make_trace(np.zeros((2, 3)))
        with pytest.raises(DataError, match="position 1"):
            loss_parallel(trace, trace, [Label.SUP, Label.REF], parallel_spec(), translated_labels=[Label.SUP, Label.NEI])

    def test_strictly_increasing_in_lambda(self, rng: np.random.Generator) -> None:
        """Test that the loss grows with lambda when traces differ."""
        to, tt = make_trace(rng.normal(size=3)), make_trace(rng.normal(size=3))
        values = [loss_parallel(to, tt, Label.SUP, parallel_spec(Regularizer.JS, lam=lam))[0][0] for lam in (0.0, 0.5, 1.0, 2.0)]
        assert values == sorted(values)
        assert len(set(values)) == 4

    def test_kl_direction(self) -> None:
        """Test that KL is taken from the original to the translation."""
        to, tt = make_trace([2.0, 0.0, 0.0]), make_trace([0.0, 0.0, 0.0])
        forward_kl = regularizer_value(Regularizer.KL, to, tt, parallel_spec(Regularizer.KL))
        backward_kl = regularizer_value(
            Regularizer.KL, to, tt, parallel_spec(Regularizer.KL, kl_direction="translated_to_original")
        )
        swapped = regularizer_value(Regularizer.KL, tt, to, parallel_spec(Regularizer.KL))
        assert forward_kl[0] != pytest.approx(backward_kl[0])
        assert backward_kl[0] == pytest.approx(swapped[0], abs=1e-15)

    def test_stop_gradient_zeroes_original_path(self) -> None:
        """Test that stop-gradient removes the regularizer gradient on the original."""
        to, tt = make_trace([1.0, 0.0, -1.0]), make_trace([0.0, 0.5, 0.0])
        spec = parallel_spec(Regularizer.KL, stop_gradient_on_p=True)
        _, g_o, g_t = loss_parallel(to, tt, Label.SUP, spec)
        ce_o = loss_zero_shot(to, Label.SUP)[1]
        np.testing.assert_allclose(g_o.logits, ce_o.logits)
        assert np.any(g_t.logits != loss_zero_shot(tt, Label.SUP)[1].logits)

    def test_representation_regularizer_routes_to_its_level(self, rng: np.random.Generator) -> None:
        """Test that feature and penultimate regularizers enter at their own level."""
        to = make_trace(rng.normal(size=3), rng.normal(size=(1, 2)), rng.normal(size=(1, 2)))
        tt = make_trace(rng.normal(size=3), rng.normal(size=(1, 2)), rng.normal(size=(1, 2)))
        _, g_feat, _ = loss_parallel(to, tt, Label.SUP, parallel_spec(Regularizer.MSE_FEATURE))
        _, g_pen, _ = loss_parallel(to, tt, Label.SUP, parallel_spec(Regularizer.COS_PENULTIMATE))
        assert g_feat.feature is not None and g_feat.penultimate is None
        assert g_pen.penultimate is not None and g_pen.feature is None
        np.testing.assert_allclose(g_feat.feature, 2.0 * (to.feature - tt.feature))

    def test_mse_is_squared_distance(self) -> None:
        """Test the MSE regularizer value."""
        to = make_trace([0.0, 0.0, 0.0], feature=np.array([[1.0, 2.0]]))
        tt = make_trace([0.0, 0.0, 0.0], feature=np.array([[4.0, -2.0]]))
        assert regularizer_value(Regularizer.MSE_FEATURE, to, tt)[0] == pytest.approx(25.0)

    def test_cosine_scale_invariant_mse_not(self, rng: np.random.Generator) -> None:
        """Test that cosine ignores scale while MSE does not."""
        h, h2 = rng.normal(size=(1, 2)), rng.normal(size=(1, 2))
        base = regularizer_value(Regularizer.COS_FEATURE, make_trace(np.zeros(3), h), make_trace(np.zeros(3), h2))
        scaled = regularizer_value(Regularizer.COS_FEATURE, make_trace(np.zeros(3), 3.5 * h), make_trace(np.zeros(3), h2))
        assert scaled[0] == pytest.approx(base[0], abs=1e-12)
        mse = regularizer_value(Regularizer.MSE_FEATURE, make_trace(np.zeros(3), h), make_trace(np.zeros(3), h2))
        mse_scaled = regularizer_value(Regularizer.MSE_FEATURE, make_trace(np.zeros(3), 3.5 * h), make_trace(np.zeros(3), h2))
        assert mse_scaled[0] != pytest.approx(mse[0])

    def test_cosine_zero_vector_convention(self) -> None:
        """Test the zero-vector convention for cosine distance."""
        to = make_trace(np.zeros(3), feature=np.zeros((1, 2)))
        tt = make_trace(np.zeros(3), feature=np.array([[1.0, 1.0]]))
        _, g_o, g_t = loss_parallel(to, tt, Label.SUP, parallel_spec(Regularizer.COS_FEATURE, lam=1.0))
        assert regularizer_value(Regularizer.COS_FEATURE, to, tt)[0] == 1.0
        np.testing.assert_array_equal(g_o.feature, 0.0)
        np.testing.assert_array_equal(g_t.feature, 0.0)

    @pytest.mark.parametrize("reg", ALL_REGS)
    def test_assembled_loss_nonnegative(self, reg: Regularizer, rng: np.random.Generator) -> None:
        """Test that every assembled pair loss is non-negative."""
        to = make_trace(rng.normal(size=(4, 3)), rng.normal(size=(4, 2)), rng.normal(size=(4, 2)))
        tt = make_trace(rng.normal(size=(4, 3)), rng.normal(size=(4, 2)), rng.normal(size=(4, 2)))
        values, _, _ = loss_parallel(to, tt, [Label.SUP] * 4, parallel_spec(reg, lam=0.7))
        assert np.all(values >= 0.0)

    def test_combined_terms_add(self, rng: np.random.Generator) -> None:
        """Test that primary and secondary regularizers add."""
        to = make_trace(rng.normal(size=3), rng.normal(size=(1, 2)))
        tt = make_trace(rng.normal(size=3), rng.normal(size=(1, 2)))
        combined = parallel_spec(Regularizer.JS, secondary_regularizer=Regularizer.MSE_FEATURE, secondary_lam=0.5)
        values, _, _ = loss_parallel(to, tt, Label.NEI, combined)
        base, _, _ = loss_parallel(to, tt, Label.NEI, parallel_spec())
        expected = base + regularizer_value(Regularizer.JS, to, tt) + 0.5 * regularizer_value(Regularizer.MSE_FEATURE, to, tt)
        np.testing.assert_allclose(values, expected, atol=1e-12)


class TestBatchAverage:
    """Test batch normalization of per-example losses."""

    def test_single_element(self) -> None:
        """Test the mean of one value."""
        assert batch_average([1.7]) == 1.7

    def test_mean(self) -> None:
        """Test the mean of several values."""
        assert batch_average([1.0, 3.0]) == 2.0

    def test_empty_rejected(self) -> None:
        """Test that an empty batch is rejected."""
        with pytest.raises(DataError, match="empty"):
            batch_average([])

    def test_identity_pool_equals_zero_shot_loss(
        self, small_params: ModelParams, identity_corpus: Dict[str, List[Example]]
    ) -> None:
        """Pooling identical translations with the originals leaves the mean loss unchanged."""
        spec = LossSpec(scenario=Scenario.NON_PARALLEL)
        pool = identity_corpus["train"]
        originals = [ex for ex in pool if ex.lang == "src"]
        assert len(pool) == 4 * len(originals)
        pooled = batch_average(loss_single(forward_batch(small_params, pool), [ex.label for ex in pool], spec)[0])
        source = batch_average(loss_zero_shot(forward_batch(small_params, originals), [ex.label for ex in originals])[0])
        assert pooled == pytest.approx(source, abs=1e-12)


class TestUpstreamGradients:
    """Test upstream gradient arithmetic."""

    def test_add_merges_optional_levels(self) -> None:
        """Test that upstream gradients add level by level."""
        a = UpstreamGradients(logits=np.ones((1, 3)), feature=np.ones((1, 2)))
        b = UpstreamGradients(logits=np.ones((1, 3)), penultimate=np.ones((1, 2)))
        total = (a + b).scale(0.5)
        np.testing.assert_array_equal(total.logits, np.ones((1, 3)))
        np.testing.assert_array_equal(total.feature, 0.5 * np.ones((1, 2)))
        np.testing.assert_array_equal(total.penultimate, 0.5 * np.ones((1, 2)))
