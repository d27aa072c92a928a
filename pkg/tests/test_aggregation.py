"""Aggregation strategy tests against hand-computed values and oracles."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedsilo.aggregation import (
    Algorithm,
    AggregatorHyper,
    AggregatorState,
    ClientUpdate,
    TrainingMetrics,
    aggregate,
    pseudo_gradient,
    step_fedadaptive,
    step_fedasync,
    step_fedavg,
    step_fedavgm,
    step_fedbuff,
)
from fedsilo.errors import (
    AlgorithmArityMismatch,
    EmptyUpdateSet,
    LayoutMismatch,
    NegativeStaleness,
)
from fedsilo.params import ModelLayout, ParameterVector

METRICS = TrainingMetrics(loss=0.5, accuracy=0.8, train_seconds=1.0)


def layout(dim):
    return ModelLayout((("w", (dim,)),))


def update(values, n=1, base_round=0, endpoint="ep", lo=None):
    lo = lo or layout(len(values))
    return ClientUpdate(
        endpoint_id=endpoint,
        base_round=base_round,
        weights=ParameterVector(lo, values),
        sample_count=n,
        metrics=METRICS,
    )


def state(global_values, algorithm=Algorithm.FEDAVG, **kwargs):
    lo = layout(len(global_values))
    return AggregatorState(
        algorithm=algorithm,
        global_model=ParameterVector(lo, global_values),
        **kwargs,
    )


class TestPseudoGradient:
    def test_single_client_at_global_is_zero(self):
        s = state([1.0, 2.0])
        d = pseudo_gradient(s, [update([1.0, 2.0])])
        np.testing.assert_array_equal(d.values, [0.0, 0.0])

    def test_hand_example(self):
        # global [1,1]; deltas [-0.5,-0.3] and [0.5,0.1]; equal-count mean [0,-0.1]
        s = state([1.0, 1.0])
        d = pseudo_gradient(s, [update([0.5, 0.7]), update([1.5, 1.1])])
        np.testing.assert_allclose(d.values, [0.0, -0.1], atol=1e-15)

    def test_sample_count_weighting(self):
        # deltas [0,0] (n=1) and [2,2] (n=3): weighted mean [1.5, 1.5]
        s = state([1.0, 2.0])
        d = pseudo_gradient(s, [update([1.0, 2.0], n=1), update([3.0, 4.0], n=3)])
        np.testing.assert_allclose(d.values, [1.5, 1.5], atol=1e-15)

    def test_empty_updates(self):
        with pytest.raises(EmptyUpdateSet):
            pseudo_gradient(state([0.0]), [])

    def test_layout_mismatch(self):
        with pytest.raises(LayoutMismatch):
            pseudo_gradient(state([0.0, 0.0]), [update([1.0])])


class TestFedAvg:
    def test_identical_clients(self):
        s = state([0.0, 0.0])
        out = step_fedavg(s, [update([1.0, 2.0], n=3), update([1.0, 2.0], n=9)])
        np.testing.assert_array_equal(out.global_model.values, [1.0, 2.0])

    def test_weighted_mean_example(self):
        s = state([0.0, 0.0])
        out = step_fedavg(s, [update([1.0, 2.0], n=1), update([3.0, 4.0], n=3)])
        np.testing.assert_array_equal(out.global_model.values, [2.5, 3.5])

    def test_equals_global_plus_pseudo_gradient_on_equal_counts(self):
        rng = np.random.default_rng(0)
        s = state(rng.normal(size=6).tolist())
        ups = [update(rng.normal(size=6).tolist(), n=2) for _ in range(4)]
        via_delta = s.global_model.values + pseudo_gradient(s, ups).values
        out = step_fedavg(s, ups)
        np.testing.assert_allclose(out.global_model.values, via_delta, atol=1e-12)

    def test_round_increments_and_inputs_untouched(self):
        s = state([0.0], round=4)
        out = step_fedavg(s, [update([1.0])])
        assert out.round == 5
        assert s.round == 4
        np.testing.assert_array_equal(s.global_model.values, [0.0])

    def test_optimizer_state_untouched(self):
        s = state([0.0])
        out = step_fedavg(s, [update([1.0])])
        assert out.momentum is None and out.second_moment is None


class TestFedAvgM:
    def test_hand_example_single_step(self):
        # delta [-0.5,-0.3]; m0=0, beta=0.9, lr=1: m=delta, global [0.5,0.7]
        s = state([1.0, 1.0], algorithm=Algorithm.FEDAVGM)
        out = step_fedavgm(s, [update([0.5, 0.7])])
        np.testing.assert_allclose(out.momentum.values, [-0.5, -0.3], atol=1e-15)
        np.testing.assert_allclose(out.global_model.values, [0.5, 0.7], atol=1e-15)

    def test_two_steps_constant_delta(self):
        # m2 = 0.9*[-0.5,-0.3] + [-0.5,-0.3] = [-0.95,-0.57]
        s = state([1.0, 1.0], algorithm=Algorithm.FEDAVGM)
        s1 = step_fedavgm(s, [update([0.5, 0.7])])
        delta = np.array([-0.5, -0.3])
        s2 = step_fedavgm(s1, [update((s1.global_model.values + delta).tolist())])
        np.testing.assert_allclose(s2.momentum.values, [-0.95, -0.57], atol=1e-15)

    def test_beta_zero_reduces_to_fedavg(self):
        rng = np.random.default_rng(1)
        hyper = AggregatorHyper(server_lr=1.0, server_momentum=0.0)
        for _ in range(20):
            g = rng.normal(size=8)
            ups = [update(rng.normal(size=8).tolist(), n=3) for _ in range(5)]
            s = state(g.tolist(), algorithm=Algorithm.FEDAVGM, hyper=hyper)
            avg = step_fedavg(s, ups).global_model.values
            avgm = step_fedavgm(s, ups).global_model.values
            np.testing.assert_allclose(avgm, avg, atol=1e-12)


class TestAdaptive:
    def test_adagrad_hand_example(self):
        hyper = AggregatorHyper(beta1=0.0, adaptivity=1e-3, server_lr=1.0)
        s = state(
            [0.0],
            algorithm=Algorithm.FEDADAGRAD,
            hyper=hyper,
            second_moment=ParameterVector(layout(1), [0.0]),
        )
        out = step_fedadaptive(s, [update([0.5])], "adagrad")
        np.testing.assert_allclose(out.second_moment.values, [0.25], atol=1e-15)
        np.testing.assert_allclose(out.global_model.values, [0.5 / 0.501], atol=1e-12)

    def test_yogi_sign_rule(self):
        # v = 0.01 - 0.01*0.25*sign(0.01-0.25) = 0.0125
        hyper = AggregatorHyper(beta2=0.99)
        s = state(
            [0.0],
            algorithm=Algorithm.FEDYOGI,
            hyper=hyper,
            second_moment=ParameterVector(layout(1), [0.01]),
        )
        out = step_fedadaptive(s, [update([0.5])], "yogi")
        np.testing.assert_allclose(out.second_moment.values, [0.0125], atol=1e-15)

    def test_adam_moving_average(self):
        hyper = AggregatorHyper(beta2=0.99)
        s = state(
            [0.0],
            algorithm=Algorithm.FEDADAM,
            hyper=hyper,
            second_moment=ParameterVector(layout(1), [1.0]),
        )
        out = step_fedadaptive(s, [update([0.5])], "adam")
        np.testing.assert_allclose(out.second_moment.values, [0.99 + 0.01 * 0.25], atol=1e-15)

    @pytest.mark.parametrize("variant", ["adagrad", "adam", "yogi"])
    def test_zero_delta_leaves_global_unchanged(self, variant):
        g = [1.5, -2.0]
        s = state(g, algorithm=Algorithm.FEDADAM)
        out = step_fedadaptive(s, [update(g)], variant)
        np.testing.assert_array_equal(out.global_model.values, g)

    @pytest.mark.parametrize("variant", ["adagrad", "adam", "yogi"])
    def test_second_moment_stays_nonnegative(self, variant):
        rng = np.random.default_rng(2)
        s = state(rng.normal(size=5).tolist(), algorithm=Algorithm.FEDADAM)
        for _ in range(50):
            s = step_fedadaptive(s, [update(rng.normal(size=5).tolist())], variant)
            assert np.all(s.second_moment.values >= 0)

    def test_unknown_variant(self):
        with pytest.raises(ValueError):
            step_fedadaptive(state([0.0]), [update([1.0])], "rmsprop")


class TestFedAsync:
    def test_full_mixing(self):
        hyper = AggregatorHyper(async_alpha=1.0)
        s = state([5.0], algorithm=Algorithm.FEDASYNC, hyper=hyper)
        out = step_fedasync(s, update([1.0]))
        np.testing.assert_array_equal(out.global_model.values, [1.0])

    def test_fresh_update_hand_example(self):
        hyper = AggregatorHyper(async_alpha=0.9, staleness_exponent=0.5)
        s = state([0.0], algorithm=Algorithm.FEDASYNC, hyper=hyper)
        out = step_fedasync(s, update([1.0]))
        np.testing.assert_allclose(out.global_model.values, [0.9], atol=1e-15)

    def test_stale_update_hand_example(self):
        # s=3: alpha_s = 0.9 * 4^-0.5 = 0.45
        hyper = AggregatorHyper(async_alpha=0.9, staleness_exponent=0.5)
        s = state([0.0], algorithm=Algorithm.FEDASYNC, round=3, hyper=hyper)
        out = step_fedasync(s, update([1.0], base_round=0))
        np.testing.assert_allclose(out.global_model.values, [0.45], atol=1e-15)

    def test_negative_staleness_rejected(self):
        s = state([0.0], algorithm=Algorithm.FEDASYNC, round=1)
        with pytest.raises(NegativeStaleness):
            step_fedasync(s, update([1.0], base_round=2))

    @given(st.randoms(use_true_random=False))
    @settings(max_examples=100, deadline=None)
    def test_convexity(self, rng):
        hyper = AggregatorHyper(
            async_alpha=rng.uniform(0.01, 1.0),
            staleness_exponent=rng.uniform(0.0, 2.0),
        )
        staleness = rng.randint(0, 10)
        g = [rng.uniform(-5, 5) for _ in range(4)]
        c = [rng.uniform(-5, 5) for _ in range(4)]
        s = state(g, algorithm=Algorithm.FEDASYNC, round=staleness, hyper=hyper)
        out = step_fedasync(s, update(c, base_round=0))
        lo = np.minimum(g, c) - 1e-12
        hi = np.maximum(g, c) + 1e-12
        assert np.all(out.global_model.values >= lo)
        assert np.all(out.global_model.values <= hi)

    @given(st.randoms(use_true_random=False))
    @settings(max_examples=100, deadline=None)
    def test_mixing_weight_nonincreasing_in_staleness(self, rng):
        alpha = rng.uniform(0.01, 1.0)
        a = rng.uniform(0.0, 3.0)
        weights = [alpha * (s + 1) ** (-a) for s in range(12)]
        assert all(w1 >= w2 for w1, w2 in zip(weights, weights[1:]))


class TestFedBuff:
    def hyper(self, k):
        return AggregatorHyper(buffer_size=k, server_lr=1.0)

    def test_k1_every_call_emits_client_weights(self):
        rng = np.random.default_rng(3)
        s = state(rng.normal(size=4).tolist(), algorithm=Algorithm.FEDBUFF, hyper=self.hyper(1))
        w = rng.normal(size=4).tolist()
        out, emitted = step_fedbuff(s, update(w))
        assert emitted
        np.testing.assert_allclose(out.global_model.values, w, atol=1e-12)

    def test_non_emitting_calls_leave_global_untouched(self):
        s = state([1.0], algorithm=Algorithm.FEDBUFF, hyper=self.hyper(3))
        s1, e1 = step_fedbuff(s, update([2.0]))
        s2, e2 = step_fedbuff(s1, update([3.0]))
        assert not e1 and not e2
        np.testing.assert_array_equal(s2.global_model.values, [1.0])
        assert s2.round == s.round
        assert len(s2.buffer) == 2

    def test_k2_mean_of_recorded_deltas(self):
        # deltas [1] and [3] against global [0]: mean [2]
        s = state([0.0], algorithm=Algorithm.FEDBUFF, hyper=self.hyper(2))
        s1, _ = step_fedbuff(s, update([1.0]))
        s2, emitted = step_fedbuff(s1, update([3.0]))
        assert emitted
        np.testing.assert_allclose(s2.global_model.values, [2.0], atol=1e-15)
        assert s2.buffer == () and s2.round == 1

    def test_negative_staleness_rejected(self):
        s = state([0.0], algorithm=Algorithm.FEDBUFF)
        with pytest.raises(NegativeStaleness):
            step_fedbuff(s, update([1.0], base_round=5))


class TestAggregateFacade:
    def test_fedavg_delegation(self):
        s = state([0.0, 0.0])
        ups = [update([float(i), 1.0]) for i in range(5)]
        out = aggregate(s, ups)
        np.testing.assert_array_equal(
            out.global_model.values, step_fedavg(s, ups).global_model.values
        )

    def test_async_arity_enforced(self):
        s = state([0.0], algorithm=Algorithm.FEDASYNC)
        with pytest.raises(AlgorithmArityMismatch):
            aggregate(s, [update([1.0]), update([2.0])])

    def test_sync_empty_rejected(self):
        with pytest.raises(AlgorithmArityMismatch):
            aggregate(state([0.0]), [])

    def test_fedbuff_delegation(self):
        s = state([0.0], algorithm=Algorithm.FEDBUFF, hyper=AggregatorHyper(buffer_size=1))
        out = aggregate(s, [update([2.0])])
        expect, _ = step_fedbuff(s, update([2.0]))
        np.testing.assert_array_equal(out.global_model.values, expect.global_model.values)

    @pytest.mark.parametrize(
        "algo",
        [Algorithm.FEDAVG, Algorithm.FEDAVGM, Algorithm.FEDADAGRAD,
         Algorithm.FEDADAM, Algorithm.FEDYOGI],
    )
    def test_round_strictly_increments(self, algo):
        s = state([0.0, 0.0], algorithm=algo)
        for expected in (1, 2, 3):
            s = aggregate(s, [update([0.5, 0.5])])
            assert s.round == expected


class TestHyperValidation:
    def test_defaults_in_range(self):
        AggregatorHyper()

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"server_lr": 0.0},
            {"server_momentum": 1.0},
            {"beta1": -0.1},
            {"beta2": 1.5},
            {"adaptivity": 0.0},
            {"async_alpha": 0.0},
            {"async_alpha": 1.1},
            {"staleness_exponent": -1.0},
            {"buffer_size": 0},
        ],
    )
    def test_out_of_range_rejected(self, kwargs):
        with pytest.raises(ValueError):
            AggregatorHyper(**kwargs)


class TestClientUpdateValidation:
    def test_sample_count_positive(self):
        with pytest.raises(ValueError):
            update([1.0], n=0)

    def test_metrics_accuracy_range(self):
        with pytest.raises(ValueError):
            TrainingMetrics(loss=0.1, accuracy=1.2)
