import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dnnfm.nn import (
    NetworkParams,
    NetworkSpec,
    ShapeError,
    clip_weights,
    forward,
    init_params,
    param_count,
    relu,
    sparsity_report,
    stack,
    stacked_forward,
)

from conftest import random_params


def single_unit():
    spec = NetworkSpec(1, 1, (1,))
    return NetworkParams(spec, ((np.array([[1.0]]), np.array([-0.5])), (np.array([[2.0]]), np.array([1.0]))))


class TestRelu:
    def test_values(self):
        np.testing.assert_array_equal(relu(np.array([-1.0, 2.0, 0.0])), [0.0, 2.0, 0.0])


class TestForward:
    def test_zero_network(self, rng):
        spec = NetworkSpec(3, 2, (4, 4))
        p = init_params(spec, 0).map(np.zeros_like)
        assert forward(p, rng.standard_normal(3)) == 0.0

    def test_hand_evaluation(self):
        p = single_unit()
        assert forward(p, np.array([2.0])) == 4.0
        assert forward(p, np.array([0.0])) == 1.0

    def test_batch_matches_rows(self, rng):
        p = random_params(rng)
        X = rng.standard_normal((7, 3))
        out = forward(p, X)
        np.testing.assert_allclose(out, [forward(p, x) for x in X], rtol=0, atol=1e-14)

    def test_against_explicit_loop(self, rng):
        p = random_params(rng, d=2, widths=(3, 5, 2))
        x = rng.standard_normal(2)
        h = x
        for W, b in p.layers[:-1]:
            h = np.maximum(W @ h + b, 0)
        W, b = p.layers[-1]
        np.testing.assert_allclose(forward(p, x), (W @ h + b)[0], rtol=1e-14)

    def test_shape_error(self):
        with pytest.raises(ShapeError):
            forward(single_unit(), np.ones(3))

    def test_piecewise_linear_along_segment(self, rng):
        p = random_params(rng, d=2, widths=(6, 6))
        x1, x2 = rng.standard_normal(2), rng.standard_normal(2)
        a = np.linspace(0, 1, 2001)
        vals = forward(p, np.outer(a, x1) + np.outer(1 - a, x2))
        second = np.abs(np.diff(vals, 2))
        # second differences vanish except near a bounded number of kinks
        kinks = np.count_nonzero(second > 1e-10)
        assert kinks <= 2 * (6 + 6 * 7)
        assert np.max(np.abs(np.diff(vals))) < 1.0


class TestParamCount:
    @pytest.mark.parametrize("d,widths,expected", [(2, (3, 3), 25), (1, (1,), 4), (3, (4, 5), 47)])
    def test_examples(self, d, widths, expected):
        assert param_count(NetworkSpec(d, len(widths), widths)) == expected

    @settings(max_examples=200, deadline=None)
    @given(st.integers(1, 6), st.lists(st.integers(1, 8), min_size=1, max_size=4))
    def test_matches_entries(self, d, widths):
        spec = NetworkSpec(d, len(widths), tuple(widths))
        assert param_count(spec) == init_params(spec, 1).flat().size


class TestInit:
    def test_deterministic(self):
        spec = NetworkSpec(4, 2, (8, 3))
        np.testing.assert_array_equal(init_params(spec, 5).flat(), init_params(spec, 5).flat())

    def test_biases_zero(self):
        p = init_params(NetworkSpec(4, 3, (8, 3, 2)), 1)
        assert all(not b.any() for b in p.biases)

    @pytest.mark.parametrize("d", [1, 2, 100])
    def test_weight_bound(self, d):
        for seed in range(20):
            assert sparsity_report(init_params(NetworkSpec(d, 1, (1,)), seed)).max_abs_weight <= 1.0

    def test_scale(self):
        p = init_params(NetworkSpec(50, 1, (200,)), 3)
        assert np.max(np.abs(p.weights[0])) <= np.sqrt(2 / 50)
        assert np.max(np.abs(p.weights[0])) > 0.9 * np.sqrt(2 / 50)


class TestClip:
    def test_clamp(self):
        spec = NetworkSpec(3, 1, (1,))
        p = NetworkParams(spec, ((np.array([[-2.0, 0.3, 1.5]]), np.zeros(1)), (np.ones((1, 1)), np.zeros(1))))
        np.testing.assert_array_equal(clip_weights(p, 1.0).weights[0], [[-1.0, 0.3, 1.0]])

    def test_identity_inside_bound(self, rng):
        p = random_params(rng).map(lambda a: np.clip(a, -0.9, 0.9))
        np.testing.assert_array_equal(clip_weights(p, 1.0).flat(), p.flat())

    def test_uniform(self):
        p = init_params(NetworkSpec(2, 1, (3,)), 0).map(lambda a: np.full(a.shape, 0.7))
        np.testing.assert_array_equal(clip_weights(p, 0.5).flat(), 0.5)

    @settings(max_examples=200, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.floats(0.01, 3.0))
    def test_idempotent(self, seed, bound):
        r = np.random.default_rng(seed)
        p = random_params(r).map(lambda a: 3 * a)
        once = clip_weights(p, bound)
        np.testing.assert_array_equal(clip_weights(once, bound).flat(), once.flat())

    def test_rejects_nonpositive_bound(self, rng):
        with pytest.raises(ValueError):
            clip_weights(random_params(rng), 0.0)


class TestSparsity:
    def test_zero(self):
        p = init_params(NetworkSpec(2, 2, (3, 3)), 0).map(np.zeros_like)
        r = sparsity_report(p)
        assert (r.nonzero_count, r.total_count) == (0, 25)

    def test_count(self):
        p = init_params(NetworkSpec(2, 2, (3, 3)), 0).map(np.zeros_like)
        flat = p.flat()
        flat[[0, 5, 20]] = 0.9
        q = from_flat(p, flat)
        assert sparsity_report(q, 1e-8).nonzero_count == 3

    def test_tolerance(self):
        spec = NetworkSpec(1, 1, (1,))
        p = NetworkParams(spec, ((np.array([[1e-9]]), np.array([0.1])), (np.zeros((1, 1)), np.zeros(1))))
        assert sparsity_report(p, 1e-8).nonzero_count == 1


def from_flat(p, flat):
    layers, i = [], 0
    for W, b in p.layers:
        Wn = flat[i:i + W.size].reshape(W.shape)
        i += W.size
        layers.append((Wn, flat[i:i + b.size]))
        i += b.size
    return NetworkParams(p.spec, tuple(layers))


class TestParams:
    def test_immutable(self, rng):
        p = random_params(rng)
        with pytest.raises(ValueError):
            p.weights[0][0, 0] = 1.0

    def test_shape_validation(self):
        spec = NetworkSpec(2, 1, (3,))
        with pytest.raises(ShapeError):
            NetworkParams(spec, ((np.zeros((3, 3)), np.zeros(3)), (np.zeros((1, 3)), np.zeros(1))))

    def test_json_round_trip(self, rng):
        p = random_params(rng)
        q = NetworkParams.from_json(p.to_json())
        np.testing.assert_array_equal(q.flat(), p.flat())
        assert q.spec == p.spec
        assert json.loads(p.to_json())["spec"]["widths"] == [5, 4]

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            NetworkSpec(2, 2, (3,))
        with pytest.raises(ValueError):
            NetworkSpec(0, 1, (3,))


class TestStacked:
    def test_stack_matches_individual(self, rng):
        ps = [random_params(rng) for _ in range(4)]
        Ws, bs = stack(ps)
        X = rng.standard_normal((4, 6, 3))
        out, _ = stacked_forward(Ws, bs, X)
        for i, p in enumerate(ps):
            np.testing.assert_allclose(out[i], forward(p, X[i]), rtol=1e-14, atol=1e-14)
