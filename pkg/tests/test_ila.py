import dataclasses
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ilabench import engine as E
from ilabench.attacks import AttackConfig, PerturbationBudget, ifgsm
from ilabench.data import synthetic_dataset
from ilabench.engine import Tape, Tensor
from ilabench.errors import ConfigError, DegenerateError, DimensionError, EndpointError, SelectionError
from ilabench.ila import (
    DisturbanceCurve,
    FeatureDelta,
    IlaConfig,
    auto_select_layer,
    curves_to_csv,
    disturbance_curve,
    disturbance_from_deltas,
    find_peaks,
    ila_attack,
    ila_step,
    ilaf_loss,
    ilap_loss,
    select_layer,
)
from ilabench.models import ModelSpec, build_model


@pytest.fixture(scope="module")
def model():
    return build_model(ModelSpec("mini_resnet", width_multiplier=0.25), seed=0).freeze()


@pytest.fixture(scope="module")
def data():
    ds = synthetic_dataset(10, seed=5)
    return ds.images, ds.labels


@pytest.fixture(scope="module")
def seed_batch(model, data):
    x, y = data
    return ifgsm(model, x, y, AttackConfig(n_iters=10))


def value(t):
    return float(t.data)


class TestIlapLoss:
    def test_hand_value(self):
        assert value(ilap_loss(FeatureDelta([3.0, 4.0], [1.0, 2.0]))) == pytest.approx(-11.0, abs=1e-6)

    def test_zero_current(self):
        assert value(ilap_loss(FeatureDelta([3.0, 4.0], [0.0, 0.0]))) == 0.0

    def test_length_mismatch(self):
        with pytest.raises(DimensionError):
            FeatureDelta([1.0, 2.0, 3.0], [1.0, 2.0])

    def test_rows_are_summed(self):
        d = FeatureDelta([[3.0, 4.0], [1.0, 0.0]], [[1.0, 2.0], [2.0, 5.0]])
        assert value(ilap_loss(d)) == pytest.approx(-13.0)

    def test_stored_norms(self):
        d = FeatureDelta([3.0, 4.0], [0.0, 2.0])
        np.testing.assert_allclose(d.reference_norms, [5.0], rtol=1e-6)
        np.testing.assert_allclose(d.current_norms, [2.0], rtol=1e-6)

    def test_input_gradient_nonzero_at_start(self, model, data, seed_batch):
        """At x'' = x the loss is linear in the delta, so the input gradient is generic."""
        x, _ = data
        x = x[:1].astype(np.float64)
        m = build_model(ModelSpec("mini_resnet", width_multiplier=0.25), seed=0)
        from ilabench.models import to_dtype

        to_dtype(m, np.float64).freeze()
        with E.precision(np.float64), E.no_grad():
            y0 = m.forward_to_endpoint(x, 3).data
            ref = m.forward_to_endpoint(seed_batch.adversarials[:1].astype(np.float64), 3).data - y0

        def f(t):
            cur = E.sub(m.forward_to_endpoint(t, 3), Tensor(y0, dtype=np.float64))
            return ilap_loss(FeatureDelta(ref, cur))

        with E.precision(np.float64):
            g = E.grad_of(f, x)
            err = E.finite_difference_check(f, x, n_coords=40, h=1e-5)
        assert np.abs(g).max() > 0
        assert err < 1e-6


class TestIlafLoss:
    def test_colinear(self):
        assert value(ilaf_loss(FeatureDelta([1.0, 0.0], [2.0, 0.0]), 1.0)) == pytest.approx(-3.0, abs=1e-6)

    def test_zero_current_under_guard(self):
        assert value(ilaf_loss(FeatureDelta([1.0, 0.0], [0.0, 0.0]), 1.0)) == pytest.approx(0.0, abs=1e-6)

    def test_orthogonal(self):
        assert value(ilaf_loss(FeatureDelta([1.0, 0.0], [0.0, 3.0]), 1.0)) == pytest.approx(-3.0, abs=1e-6)

    def test_zero_reference(self):
        with pytest.raises(DegenerateError):
            ilaf_loss(FeatureDelta([0.0, 0.0], [1.0, 1.0]), 1.0)

    def test_zero_current_gradient_finite(self):
        with Tape():
            cur = Tensor(np.zeros((1, 2)), requires_grad=True, dtype=np.float64)
            E.backward(ilaf_loss(FeatureDelta(np.array([[1.0, 0.0]]), cur), 1.0))
        assert np.isfinite(cur.grad).all()

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 100_000), dim=st.integers(2, 40))
    def test_large_alpha_approaches_disturbance_direction(self, seed, dim):
        rng = np.random.default_rng(seed)
        ref = rng.standard_normal((1, dim))
        cur0 = rng.standard_normal((1, dim))
        with Tape():
            cur = Tensor(cur0, requires_grad=True, dtype=np.float64)
            E.backward(ilaf_loss(FeatureDelta(ref, cur), 1e6))
        g_ilaf = cur.grad.ravel()
        with Tape():
            cur = Tensor(cur0, requires_grad=True, dtype=np.float64)
            E.backward(E.neg(E.sum(E.row_norm(cur))))
        g_dist = cur.grad.ravel()
        cos = g_ilaf @ g_dist / (np.linalg.norm(g_ilaf) * np.linalg.norm(g_dist))
        assert cos > 0.999


class TestConfig:
    def test_validation(self):
        with pytest.raises(ConfigError):
            IlaConfig(0, loss_kind="ilax")
        with pytest.raises(ConfigError):
            IlaConfig(0, n_iters=0)
        with pytest.raises(ConfigError):
            IlaConfig(0, loss_kind="ilaf", alpha=0)

    def test_defaults(self):
        cfg = IlaConfig(2)
        assert cfg.lr == 0.006 and cfg.denom_guard == 1e-12 and cfg.budget.epsilon == 0.015

    def test_dict_round_trip(self):
        cfg = IlaConfig(3, "ilaf", 2.5, PerturbationBudget(0.02), 0.01, 7)
        assert IlaConfig.from_dict(cfg.to_dict()) == cfg

    def test_invalid_layer(self, model, data):
        x, y = data
        with pytest.raises(EndpointError):
            ila_attack(model, x, x, y, IlaConfig(11))


class TestIlaAttack:
    def test_null_reference_is_degenerate(self, model, data):
        x, y = data
        out = ila_attack(model, x, x, y, IlaConfig(3, n_iters=2))
        assert out.extras["degenerate"].all()
        np.testing.assert_array_equal(out.adversarials, x)

    @pytest.mark.parametrize("loss_kind", ["ilap", "ilaf"])
    def test_invariants(self, model, data, seed_batch, loss_kind):
        x, y = data
        out = ila_attack(model, x, seed_batch.adversarials, y, IlaConfig(2, loss_kind, lr=0.05, n_iters=4))
        assert out.check_invariants(0.015) == 0
        assert len(out.extras["loss_trajectory"]) == 4

    def test_first_loss_is_zero(self, model, data, seed_batch):
        x, y = data
        out = ila_attack(model, x, seed_batch.adversarials, y, IlaConfig(4, n_iters=2))
        assert out.extras["loss_trajectory"][0] == 0.0

    def test_projection_growth(self, model, data, seed_batch):
        x, y = data
        out = ila_attack(model, x, seed_batch.adversarials, y, IlaConfig(3))
        ok = ~out.extras["degenerate"]
        grew = out.extras["final_projection"][ok] > out.extras["seed_projection"][ok]
        assert grew.mean() >= 0.95

    def test_outside_reference_warns_and_projects(self, model, data):
        x, y = data
        far = np.clip(x + 0.1, 0, 1)
        with pytest.warns(UserWarning, match="epsilon ball"):
            out = ila_attack(model, x, far, y, IlaConfig(2, n_iters=1))
        assert out.check_invariants(0.015) == 0

    def test_mixed_degenerate(self, model, data, seed_batch):
        x, y = data
        ref = seed_batch.adversarials.copy()
        ref[0] = x[0]
        out = ila_attack(model, x, ref, y, IlaConfig(3, n_iters=2))
        assert out.extras["degenerate"].tolist() == [True] + [False] * (len(x) - 1)
        np.testing.assert_array_equal(out.adversarials[0], x[0])

    @pytest.mark.parametrize("c", [0.25, 2.0, 8.0])
    def test_reference_scale_equivariance(self, model, data, seed_batch, c):
        x, _ = data
        cfg = IlaConfig(3)
        with E.no_grad():
            y0 = model.forward_to_endpoint(x, 3).data
            ref = model.forward_to_endpoint(seed_batch.adversarials, 3).data - y0
        start = seed_batch.adversarials
        a, _ = ila_step(model, start, x, ref, cfg, y0)
        b, _ = ila_step(model, start, x, ref * np.float32(c), cfg, y0)
        np.testing.assert_array_equal(a, b)

    def test_deterministic(self, model, data, seed_batch):
        x, y = data
        cfg = IlaConfig(2, n_iters=3)
        a = ila_attack(model, x, seed_batch.adversarials, y, cfg)
        b = ila_attack(model, x, seed_batch.adversarials, y, cfg)
        assert a.adversarials.tobytes() == b.adversarials.tobytes()


class TestDisturbance:
    def test_self_ratio(self, model, data, seed_batch):
        x, _ = data
        c = disturbance_curve(model, x, seed_batch.adversarials, seed_batch.adversarials)
        np.testing.assert_allclose(c.values, 1.0, rtol=1e-12)
        assert len(c) == len(model.endpoints)

    def test_norm_ratio(self):
        c = disturbance_from_deltas([np.array([[3.0, 4.0]])], [np.array([[0.0, 2.0]])])
        assert c.values == [pytest.approx(2.5)]

    def test_per_image_then_mean(self):
        c = disturbance_from_deltas([np.array([[1.0], [4.0]])], [np.array([[1.0], [1.0]])])
        assert c.values[0] == pytest.approx(2.5)

    def test_zero_reference_flagged(self):
        c = disturbance_from_deltas([np.ones((2, 3)), np.ones((2, 3))], [np.zeros((2, 3)), np.ones((2, 3))])
        assert c.flagged == [0] and np.isnan(c.values[0]) and c.n_valid == [0, 2]

    def test_targeted_layer_amplified(self, model, data, seed_batch):
        x, y = data
        out = ila_attack(model, x, seed_batch.adversarials, y, IlaConfig(3))
        c = disturbance_curve(model, x, out.adversarials, seed_batch.adversarials)
        assert c.values[3] > 1.0

    def test_values_nonnegative(self, model, data, seed_batch):
        x, _ = data
        c = disturbance_curve(model, x, x, seed_batch.adversarials)
        assert min(c.values) >= 0

    def test_csv(self):
        c = DisturbanceCurve([1.0, float("nan")], [3, 0], target_layer=1)
        lines = curves_to_csv([c]).splitlines()
        assert lines == ["target_layer,eval_layer,mean_ratio,n_valid_images", "1,0,1.0000,3", "1,1,nan,0"]


def curve(values, target):
    return DisturbanceCurve(list(values), [1] * len(values), target)


class TestSelectLayer:
    def test_summarized_example(self):
        f = [1.0, 1.4, 1.2, 1.5, 1.3, 0.9, 0.8]
        assert find_peaks(f) == [1, 3]
        assert select_layer(f) == 3

    def test_monotone_fallback(self):
        assert find_peaks([1, 2, 3, 4]) == []
        assert select_layer([1.0, 2.0, 3.0, 4.0]) == 3

    def test_too_short(self):
        with pytest.raises(SelectionError):
            select_layer([1.0, 2.0])
        with pytest.raises(SelectionError):
            select_layer({0: curve([1.0, 2.0], 0)})

    def test_plateau_counts_once(self):
        assert find_peaks([1.0, 2.0, 2.0, 1.0]) == [1]

    def test_latest_candidate_with_peak(self):
        curves = {
            1: curve([1.0, 1.5, 1.2, 1.1, 1.0], 1),
            2: curve([1.0, 1.3, 1.6, 1.2, 1.0], 2),
            3: curve([1.0, 1.1, 1.2, 1.3, 1.4], 3),  # no peak
        }
        assert select_layer(curves) == 2

    def test_peak_one_before_target_counts(self):
        curves = {3: curve([1.0, 1.2, 1.5, 1.3, 1.0], 3)}
        assert select_layer(curves) == 3

    def test_early_peak_does_not_count(self):
        curves = {
            1: curve([1.0, 1.6, 1.2, 1.0, 1.0], 1),
            4: curve([1.0, 1.9, 1.2, 1.3, 1.4], 4),  # peak at 1 < 4 - 1
        }
        assert select_layer(curves) == 1

    def test_no_peak_fallback_uses_own_value(self):
        curves = {
            1: curve([1.0, 1.1, 1.2, 1.3, 1.4], 1),
            2: curve([1.0, 1.1, 1.5, 1.6, 1.7], 2),
        }
        assert select_layer(curves) == 2

    def test_auto_selection_trace(self, model, data, seed_batch):
        x, y = data
        layer, trace = auto_select_layer(model, x, seed_batch.adversarials, y, IlaConfig(0, n_iters=2),
                                         candidates=[1, 2, 3])
        assert set(trace) == {1, 2, 3} and layer in trace
        assert all(len(t["curve"]) == len(model.endpoints) for t in trace.values())

    def test_explicit_matches_auto(self, model, data, seed_batch):
        x, y = data
        base = IlaConfig(0, n_iters=2)
        layer, trace = auto_select_layer(model, x, seed_batch.adversarials, y, base, candidates=[2, 3],
                                         keep_batches=True)
        explicit = ila_attack(model, x, seed_batch.adversarials, y, dataclasses.replace(base, layer=layer))
        np.testing.assert_array_equal(explicit.adversarials, trace[layer]["batch"].adversarials)


def test_no_warning_inside_ball(model, data, seed_batch):
    x, y = data
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        ila_attack(model, x, seed_batch.adversarials, y, IlaConfig(1, n_iters=1))
