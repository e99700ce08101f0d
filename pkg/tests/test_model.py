import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stgia.errors import ConfigurationError, InputError
from stgia.model import (
    CellGrid,
    ModelSpec,
    TrainingWindow,
    attack_gradient,
    attack_objective,
    forward,
    gradient_distance,
    init_params,
    loss,
    pack_params,
    param_gradient,
    predict_ranking,
    read_params,
    recall_at_k,
    softmax,
    unpack_params,
    write_params,
)

from oracles import fd_attack_gradient, fd_param_gradient, loop_forward

SPEC = ModelSpec(window_len=3, hidden_units=5, num_cells=7, coordinate_scale=1000.0)


def random_window(rng, spec=SPEC, soft=False):
    inputs = rng.uniform(-spec.coordinate_scale, spec.coordinate_scale, size=(spec.window_len, 2))
    if soft:
        return TrainingWindow(inputs, rng.standard_normal(spec.num_cells))
    return TrainingWindow(inputs, int(rng.integers(0, spec.num_cells)))


class TestSpec:
    def test_param_count(self):
        assert SPEC.num_params == 5 * 6 + 5 + 7 * 5 + 7

    @pytest.mark.parametrize("k,h,g,s", [(0, 1, 2, 1.0), (1, 0, 2, 1.0), (1, 1, 1, 1.0), (1, 1, 2, 0.0)])
    def test_invalid_spec(self, k, h, g, s):
        with pytest.raises(InputError):
            ModelSpec(k, h, g, s)

    def test_pack_unpack_round_trip(self):
        rng = np.random.default_rng(0)
        vec = rng.standard_normal(SPEC.num_params)
        w1, b1, w2, b2 = unpack_params(SPEC, vec)
        assert np.array_equal(pack_params(SPEC, w1, b1, w2, b2), vec)


class TestForward:
    def test_zero_params_give_zero_logits(self):
        rng = np.random.default_rng(1)
        win = random_window(rng)
        logits = forward(SPEC, np.zeros(SPEC.num_params), win.inputs)
        assert np.array_equal(logits, np.zeros(SPEC.num_cells))

    def test_constant_head(self):
        rng = np.random.default_rng(2)
        params = np.zeros(SPEC.num_params)
        w1, b1, w2, b2 = unpack_params(SPEC, params)
        c = rng.standard_normal(SPEC.num_cells)
        params = pack_params(SPEC, rng.standard_normal(w1.shape), rng.standard_normal(5), np.zeros(w2.shape), c)
        for _ in range(3):
            logits = forward(SPEC, params, random_window(rng).inputs)
            assert np.allclose(logits, c)

    def test_matches_loop_reimplementation(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            params = rng.standard_normal(SPEC.num_params)
            win = random_window(rng)
            mine = forward(SPEC, params, win.inputs)
            oracle = loop_forward(SPEC, params, win.inputs)
            assert np.max(np.abs(mine - oracle)) <= 1e-12

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ConfigurationError):
            forward(SPEC, np.zeros(SPEC.num_params), np.zeros((2, 2)))
        with pytest.raises(ConfigurationError):
            forward(SPEC, np.zeros(3), np.zeros((3, 2)))


class TestLoss:
    def test_uniform_logits_one_hot(self):
        win = TrainingWindow(np.zeros((3, 2)), 4)
        assert loss(SPEC, np.zeros(SPEC.num_params), win) == pytest.approx(math.log(7))

    def test_binary_uniform(self):
        spec = ModelSpec(1, 2, 2, 1.0)
        win = TrainingWindow(np.zeros((1, 2)), 0)
        assert loss(spec, np.zeros(spec.num_params), win) == pytest.approx(math.log(2), abs=1e-12)

    def test_cross_entropy_identity(self):
        # label distribution equal to the model's softmax makes loss = entropy
        rng = np.random.default_rng(4)
        params = rng.standard_normal(SPEC.num_params)
        inputs = rng.uniform(-1000, 1000, size=(3, 2))
        logits = forward(SPEC, params, inputs)
        win = TrainingWindow(inputs, logits.copy())
        p = softmax(logits)
        entropy = -float(p @ np.log(p))
        assert loss(SPEC, params, win) == pytest.approx(entropy, rel=1e-12)

    def test_softmax_sums_to_one(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            v = rng.standard_normal(9) * rng.uniform(0.1, 30)
            assert abs(float(softmax(v).sum()) - 1.0) <= 1e-12


class TestParamGradient:
    def test_zero_residual_gives_zero_gradient(self):
        rng = np.random.default_rng(6)
        params = rng.standard_normal(SPEC.num_params)
        inputs = rng.uniform(-1000, 1000, size=(3, 2))
        logits = forward(SPEC, params, inputs)
        g = param_gradient(SPEC, params, TrainingWindow(inputs, logits.copy()))
        assert np.max(np.abs(g)) <= 1e-12

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(7)
        for trial in range(10):
            params = rng.standard_normal(SPEC.num_params)
            win = random_window(rng, soft=bool(trial % 2))
            g = param_gradient(SPEC, params, win)
            gfd = fd_param_gradient(SPEC, params, win)
            rel = np.linalg.norm(g - gfd) / max(np.linalg.norm(gfd), 1e-12)
            assert rel <= 1e-4

    def test_scale_invariance(self):
        # doubling the scale with doubled inputs leaves the gradient unchanged
        rng = np.random.default_rng(8)
        params = rng.standard_normal(SPEC.num_params)
        win = random_window(rng)
        double = ModelSpec(3, 5, 7, 2000.0)
        g1 = param_gradient(SPEC, params, win)
        g2 = param_gradient(double, params, TrainingWindow(2.0 * win.inputs, win.label))
        assert np.allclose(g1, g2, atol=1e-12)

    def test_bad_label_rejected(self):
        with pytest.raises(InputError):
            param_gradient(SPEC, np.zeros(SPEC.num_params), TrainingWindow(np.zeros((3, 2)), 7))


class TestAttackGradient:
    def test_zero_at_global_minimum(self):
        rng = np.random.default_rng(9)
        params = rng.standard_normal(SPEC.num_params)
        win = random_window(rng, soft=True)
        tg = param_gradient(SPEC, params, win)
        value, dx, dy = attack_objective(SPEC, params, win, tg)
        assert value == 0.0
        assert np.max(np.abs(dx)) == 0.0
        assert np.max(np.abs(dy)) == 0.0

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(10)
        for _ in range(8):
            params = rng.standard_normal(SPEC.num_params)
            truth = random_window(rng, soft=True)
            tg = param_gradient(SPEC, params, truth)
            dummy = random_window(rng, soft=True)
            dx, dy = attack_gradient(SPEC, params, dummy, tg)
            fdx, fdy = fd_attack_gradient(SPEC, params, dummy, tg)
            num = np.linalg.norm(np.concatenate([(dx - fdx).ravel(), dy - fdy]))
            den = max(np.linalg.norm(np.concatenate([fdx.ravel(), fdy])), 1e-12)
            assert num / den <= 1e-3

    def test_first_order_expansion(self):
        # true_grad = grad(dummy) + v for small v makes the gradient -2 J^T v
        rng = np.random.default_rng(11)
        params = rng.standard_normal(SPEC.num_params)
        dummy = random_window(rng, soft=True)
        g0 = param_gradient(SPEC, params, dummy)
        v = 1e-7 * rng.standard_normal(SPEC.num_params)
        dx, dy = attack_gradient(SPEC, params, dummy, g0 + v)
        h_m = 1e-4 * SPEC.coordinate_scale
        jt_v = np.zeros((3, 2))
        for i in range(3):
            for j in range(2):
                up = dummy.inputs.copy()
                up[i, j] += h_m
                down = dummy.inputs.copy()
                down[i, j] -= h_m
                gu = param_gradient(SPEC, params, TrainingWindow(up, dummy.label))
                gd = param_gradient(SPEC, params, TrainingWindow(down, dummy.label))
                jt_v[i, j] = ((gu - gd) / (2 * h_m)) @ v
        expected = -2.0 * jt_v
        denom = max(float(np.abs(expected).max()), 1e-18)
        assert np.max(np.abs(dx - expected)) / denom <= 1e-3

    def test_objective_nonnegative(self):
        rng = np.random.default_rng(12)
        params = rng.standard_normal(SPEC.num_params)
        truth = random_window(rng, soft=True)
        tg = param_gradient(SPEC, params, truth)
        for _ in range(10):
            dummy = random_window(rng, soft=True)
            assert gradient_distance(SPEC, params, dummy, tg) >= 0.0

    def test_one_hot_dummy_rejected(self):
        rng = np.random.default_rng(13)
        params = rng.standard_normal(SPEC.num_params)
        tg = param_gradient(SPEC, params, random_window(rng))
        with pytest.raises(InputError):
            attack_gradient(SPEC, params, random_window(rng, soft=False), tg)


class TestRecall:
    def test_all_first(self):
        assert recall_at_k([[3, 1], [2, 0]], [3, 2], 1) == 1.0

    def test_never_in_top_k(self):
        assert recall_at_k([[1, 2], [0, 2]], [5, 5], 2) == 0.0

    def test_two_of_three(self):
        ranked = [[0, 1, 2, 3, 4], [5, 6, 1, 2, 3], [4, 3, 2, 1, 0]]
        assert recall_at_k(ranked, [2, 9, 4], 5) == pytest.approx(2 / 3)

    def test_empty_rejected(self):
        with pytest.raises(InputError):
            recall_at_k([], [], 5)

    def test_length_mismatch_rejected(self):
        with pytest.raises(InputError):
            recall_at_k([[0]], [0, 1], 1)

    def test_ranking_is_descending(self):
        rng = np.random.default_rng(14)
        params = init_params(SPEC, rng)
        inputs = rng.uniform(-500, 500, size=(3, 2))
        ranked = predict_ranking(SPEC, params, inputs)
        logits = forward(SPEC, params, inputs)
        assert sorted(ranked) == list(range(7))
        assert all(logits[ranked[i]] >= logits[ranked[i + 1]] for i in range(6))


class TestCellGrid:
    def test_exact_cell_count(self):
        for g in [2, 9, 12, 13, 16, 25]:
            grid = CellGrid.from_bbox((0, 0, 100, 100), g)
            assert grid.num_cells == g

    def test_indices_cover_range(self):
        grid = CellGrid.from_bbox((0, 0, 100, 50), 12)
        rng = np.random.default_rng(15)
        seen = set()
        for _ in range(2000):
            x, y = rng.uniform(0, 100), rng.uniform(0, 50)
            idx = grid.cell_index(x, y)
            assert 0 <= idx < 12
            seen.add(idx)
        assert seen == set(range(12))

    def test_out_of_box_clamps(self):
        grid = CellGrid.from_bbox((0, 0, 100, 100), 4)
        assert grid.cell_index(-50, -50) == 0
        assert grid.cell_index(500, 500) == 3


class TestParamsIO:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(16)
        params = init_params(SPEC, rng)
        path = tmp_path / "params.bin"
        write_params(SPEC, params, path)
        spec2, loaded = read_params(path)
        assert spec2 == SPEC
        assert np.array_equal(loaded, params)

    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(min_value=0, max_value=2**31 - 1))
    def test_round_trip_random_vectors(self, tmp_path_factory, seed):
        rng = np.random.default_rng(seed)
        params = rng.standard_normal(SPEC.num_params) * rng.uniform(0.1, 100)
        path = tmp_path_factory.mktemp("p") / "params.bin"
        write_params(SPEC, params, path)
        _, loaded = read_params(path)
        assert np.array_equal(loaded, params)
