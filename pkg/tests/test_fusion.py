"""Fusion head: forward against a high-precision oracle, exact backprop against
finite differences, init statistics, dropout behavior, checkpoints."""

from __future__ import annotations

import numpy as np
import pytest
from mpmath import mp, mpf

from maple.fusion import (
    HeadConfig,
    HeadParams,
    ShapeError,
    assemble_z,
    backward,
    forward,
    init_params,
    load_checkpoint,
    save_checkpoint,
)

from test_proto import max_rel_err


def make_params(config: HeadConfig, seed: int = 0, bias_scale: float = 0.5) -> HeadParams:
    rng = np.random.default_rng(seed)
    params = init_params(config, rng)
    params.b_1[...] = bias_scale * rng.standard_normal(config.z_dim)
    params.b_2[...] = bias_scale * rng.standard_normal(config.d)
    return params


def mp_forward(params: HeadParams, config: HeadConfig, z: np.ndarray) -> np.ndarray:
    """Step-by-step recomputation at 50 significant digits."""
    mp.dps = 50

    def mat_vec(m, v):
        return [sum(mpf(m[i, j]) * v[j] for j in range(len(v))) for i in range(m.shape[0])]

    zv = [mpf(x) for x in z]
    a = mat_vec(params.w_z, zv)
    g = [1 / (1 + mp.e ** (-x)) for x in a]
    h = [zi * gi for zi, gi in zip(zv, g)]
    s = [x + mpf(b) for x, b in zip(mat_vec(params.w_1, h), params.b_1)]
    r = [x if x > 0 else mpf(0) for x in s]
    out = [x + mpf(b) for x, b in zip(mat_vec(params.w_2, r), params.b_2)]
    return np.array([float(x) for x in out])


class TestForward:
    def test_zero_gate_weights_halve_z(self):
        config = HeadConfig(d=3, use_context=False, dropout_rate=0.0)
        params = HeadParams.zeros(config)
        params.w_1[...] = np.eye(3)
        params.w_2[...] = np.eye(3)
        x = np.array([2.0, -4.0, 6.0])
        out, trace = forward(params, config, x)
        np.testing.assert_allclose(trace.h, [[1.0, -2.0, 3.0]], rtol=0, atol=0)
        np.testing.assert_allclose(out, np.maximum(x / 2, 0.0))

    def test_dead_projection_returns_bias(self):
        config = HeadConfig(d=2, use_context=False, dropout_rate=0.0)
        params = HeadParams.zeros(config)
        params.b_1[...] = [-1.0, 0.0]
        params.b_2[...] = [3.5, -1.25]
        out, _ = forward(params, config, np.array([0.7, -0.2]))
        np.testing.assert_array_equal(out, [3.5, -1.25])

    def test_matches_high_precision_oracle(self):
        config = HeadConfig(d=2, d_u=0, use_context=True, dropout_rate=0.0)
        assert config.z_dim == 6
        params = make_params(config, seed=1)
        rng = np.random.default_rng(2)
        essay, prompt, rubric = rng.standard_normal((3, 2))
        out, trace = forward(params, config, essay, prompt, rubric)
        expected = mp_forward(params, config, trace.z[0])
        np.testing.assert_allclose(out, expected, rtol=1e-13, atol=1e-13)

    def test_eval_mode_is_bitwise_repeatable(self):
        config = HeadConfig(d=4, d_u=2, use_context=True)
        params = make_params(config, seed=3)
        rng = np.random.default_rng(4)
        args = (rng.standard_normal(4), rng.standard_normal(4),
                rng.standard_normal(4), rng.standard_normal(2))
        a, _ = forward(params, config, *args, mode="eval")
        b, _ = forward(params, config, *args, mode="eval")
        np.testing.assert_array_equal(a, b)

    def test_train_mode_requires_rng(self):
        config = HeadConfig(d=2, use_context=False, dropout_rate=0.5)
        params = make_params(config)
        with pytest.raises(ValueError, match="rng"):
            forward(params, config, np.zeros(2), mode="train")

    def test_non_finite_input_rejected(self):
        config = HeadConfig(d=2, use_context=False)
        params = make_params(config)
        with pytest.raises(ValueError, match="non-finite"):
            forward(params, config, np.array([np.inf, 0.0]))

    def test_shape_mismatch_rejected(self):
        config = HeadConfig(d=3, use_context=False)
        params = make_params(config)
        with pytest.raises(ShapeError):
            forward(params, config, np.zeros(4))

    def test_batch_rows_match_single_calls(self):
        config = HeadConfig(d=3, d_u=2, use_context=True, dropout_rate=0.0)
        params = make_params(config, seed=6)
        rng = np.random.default_rng(7)
        essay = rng.standard_normal((5, 3))
        prompt = rng.standard_normal((5, 3))
        rubric = rng.standard_normal((5, 3))
        feats = rng.standard_normal((5, 2))
        batch, _ = forward(params, config, essay, prompt, rubric, feats)
        for i in range(5):
            single, _ = forward(params, config, essay[i], prompt[i], rubric[i], feats[i])
            # BLAS may pick different kernels per shape; only last-ulp drift allowed
            np.testing.assert_allclose(batch[i], single, rtol=1e-14, atol=1e-15)


class TestStructuralAblation:
    def test_context_off_rejects_context_inputs(self):
        config = HeadConfig(d=3, d_u=0, use_context=False)
        params = make_params(config)
        with pytest.raises(ShapeError, match="use_context=False"):
            forward(params, config, np.zeros(3), prompt_vec=np.zeros(3),
                    rubric_vec=np.zeros(3))

    def test_features_off_rejects_feature_input(self):
        config = HeadConfig(d=3, d_u=0, use_context=False)
        params = make_params(config)
        with pytest.raises(ShapeError, match="d_u=0"):
            forward(params, config, np.zeros(3), feature_vec=np.zeros(4))

    def test_z_dim_per_flag_combination(self):
        assert HeadConfig(d=6, d_u=0, use_context=False).z_dim == 6
        assert HeadConfig(d=6, d_u=0, use_context=True).z_dim == 18
        assert HeadConfig(d=6, d_u=3, use_context=False).z_dim == 9
        assert HeadConfig(d=6, d_u=3, use_context=True).z_dim == 21

    def test_output_function_of_essay_only(self):
        config = HeadConfig(d=3, d_u=0, use_context=False, dropout_rate=0.0)
        params = make_params(config, seed=8)
        x = np.array([0.1, -0.5, 0.9])
        a, _ = forward(params, config, x)
        b, _ = forward(params, config, x)
        np.testing.assert_array_equal(a, b)
        z, _ = assemble_z(config, x)
        assert z.shape == (1, 3)


class TestBackward:
    def test_zero_upstream_gives_zero_grads(self):
        config = HeadConfig(d=2, d_u=1, use_context=True, dropout_rate=0.0)
        params = make_params(config, seed=9)
        rng = np.random.default_rng(10)
        out, trace = forward(params, config, rng.standard_normal(2),
                             rng.standard_normal(2), rng.standard_normal(2),
                             rng.standard_normal(1))
        grads, input_grads = backward(trace, params, np.zeros(2))
        for arr in grads.arrays():
            assert not arr.any()
        assert not input_grads.essay.any()

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_param_and_input_grads_match_fd(self, seed):
        config = HeadConfig(d=2, d_u=0, use_context=True, dropout_rate=0.0)
        params = make_params(config, seed=seed)
        rng = np.random.default_rng(100 + seed)
        essay, prompt, rubric = rng.standard_normal((3, 2))
        upstream = rng.standard_normal(2)
        out, trace = forward(params, config, essay, prompt, rubric)
        grads, input_grads = backward(trace, params, upstream)

        def scalar(p: HeadParams, e, pr, ru) -> float:
            o, _ = forward(p, config, e, pr, ru)
            return float(np.dot(upstream, o))

        eps = 1e-5
        for field in ("w_z", "w_1", "b_1", "w_2", "b_2"):
            analytic = getattr(grads, field)
            fd = np.zeros_like(analytic)
            for idx in np.ndindex(analytic.shape):
                up = params.copy(); getattr(up, field)[idx] += eps
                dn = params.copy(); getattr(dn, field)[idx] -= eps
                fd[idx] = (scalar(up, essay, prompt, rubric)
                           - scalar(dn, essay, prompt, rubric)) / (2 * eps)
            assert max_rel_err(analytic, fd) < 1e-4, field

        for name, vec, analytic in (
            ("essay", essay, input_grads.essay),
            ("prompt", prompt, input_grads.prompt),
            ("rubric", rubric, input_grads.rubric),
        ):
            fd = np.zeros_like(vec)
            for i in range(vec.shape[0]):
                up, dn = vec.copy(), vec.copy()
                up[i] += eps
                dn[i] -= eps
                args_up = {"essay": [up, prompt, rubric], "prompt": [essay, up, rubric],
                           "rubric": [essay, prompt, up]}[name]
                args_dn = {"essay": [dn, prompt, rubric], "prompt": [essay, dn, rubric],
                           "rubric": [essay, prompt, dn]}[name]
                fd[i] = (scalar(params, *args_up) - scalar(params, *args_dn)) / (2 * eps)
            assert max_rel_err(analytic, fd) < 1e-4, name

    def test_frozen_gate_gradient_formula(self):
        # with W_1 = identity pass-through and no bias/relu cut, the W_z grad
        # reduces to (g (1-g) z * upstream_z) z^T at size 3
        config = HeadConfig(d=3, d_u=0, use_context=False, dropout_rate=0.0)
        params = HeadParams.zeros(config)
        rng = np.random.default_rng(12)
        params.w_z[...] = rng.standard_normal((3, 3)) * 0.3
        params.w_1[...] = np.eye(3)
        params.b_1[...] = 10.0  # keeps every relu unit on
        params.w_2[...] = np.eye(3)
        z = rng.standard_normal(3)
        upstream = rng.standard_normal(3)
        out, trace = forward(params, config, z)
        grads, _ = backward(trace, params, upstream)
        g = trace.gate[0]
        expected = np.outer(g * (1 - g) * z * upstream, z)
        np.testing.assert_allclose(grads.w_z, expected, atol=1e-12, rtol=0)

    def test_stale_trace_rejected(self):
        config = HeadConfig(d=2, d_u=0, use_context=False, dropout_rate=0.0)
        other = HeadConfig(d=2, d_u=2, use_context=True, dropout_rate=0.0)
        params = make_params(config)
        big_params = make_params(other)
        out, trace = forward(params, config, np.zeros(2))
        with pytest.raises(ShapeError):
            backward(trace, big_params, np.zeros(2))


class TestDropout:
    def test_train_mask_average_converges_to_eval(self):
        config = HeadConfig(d=3, d_u=0, use_context=True, dropout_rate=0.5)
        params = make_params(config, seed=13, bias_scale=1.0)
        rng = np.random.default_rng(14)
        essay, prompt, rubric = rng.standard_normal((3, 3)) * 2.0
        eval_out, _ = forward(params, config, essay, prompt, rubric, mode="eval")
        assert np.all(np.abs(eval_out) > 0.05)  # keep relative error meaningful
        mask_rng = np.random.default_rng(15)
        n = 20000
        total = np.zeros(3)
        for _ in range(n):
            out, _ = forward(params, config, essay, prompt, rubric,
                             mode="train", rng=mask_rng)
            total += out
        mean = total / n
        rel = np.abs(mean - eval_out) / np.abs(eval_out)
        assert rel.max() < 0.02

    def test_dropout_off_train_equals_eval(self):
        config = HeadConfig(d=2, d_u=0, use_context=False, dropout_rate=0.0)
        params = make_params(config, seed=16)
        x = np.array([0.5, -1.5])
        a, _ = forward(params, config, x, mode="train", rng=np.random.default_rng(0))
        b, _ = forward(params, config, x, mode="eval")
        np.testing.assert_array_equal(a, b)


class TestInit:
    def test_same_seed_bit_identical(self):
        config = HeadConfig(d=5, d_u=3, use_context=True)
        a = init_params(config, np.random.default_rng(42))
        b = init_params(config, np.random.default_rng(42))
        for x, y in zip(a.arrays(), b.arrays()):
            np.testing.assert_array_equal(x, y)

    def test_within_xavier_bound(self):
        config = HeadConfig(d=4, d_u=2, use_context=True)
        params = init_params(config, np.random.default_rng(1))
        z = config.z_dim
        assert np.all(np.abs(params.w_1) <= np.sqrt(6.0 / (2 * z)))
        assert np.all(np.abs(params.w_2) <= np.sqrt(6.0 / (z + config.d)))
        assert not params.b_1.any() and not params.b_2.any()

    def test_empirical_variance_matches_uniform_moment(self):
        config = HeadConfig(d=100, d_u=0, use_context=True)
        params = init_params(config, np.random.default_rng(2))
        z = config.z_dim
        bound = np.sqrt(6.0 / (2 * z))
        samples = params.w_z.ravel()
        assert samples.size >= 10**5 // 2
        expected = bound**2 / 3.0
        assert abs(samples.var() - expected) / expected < 0.05


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        config = HeadConfig(d=3, d_u=2, use_context=True, dropout_rate=0.5)
        params = make_params(config, seed=17)
        path = tmp_path / "head.mhd1"
        save_checkpoint(path, params, config)
        loaded, loaded_config = load_checkpoint(path)
        assert loaded_config == config
        for a, b in zip(params.arrays(), loaded.arrays()):
            np.testing.assert_array_equal(a, b)

    def test_save_is_deterministic(self, tmp_path):
        config = HeadConfig(d=2, d_u=0, use_context=False)
        params = make_params(config, seed=18)
        save_checkpoint(tmp_path / "a.mhd1", params, config)
        save_checkpoint(tmp_path / "b.mhd1", params, config)
        assert (tmp_path / "a.mhd1").read_bytes() == (tmp_path / "b.mhd1").read_bytes()

    def test_bad_magic_rejected(self, tmp_path):
        p = tmp_path / "x.mhd1"
        p.write_bytes(b"XXXX" + b"\x00" * 8)
        with pytest.raises(ValueError, match="bad magic"):
            load_checkpoint(p)
