"""Numerics: RNG streams, Adam, finite differences, norms, Jacobi SVD."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lorasa.numerics import (
    AdamState,
    RngStream,
    adam_step,
    clip_grads_by_norm,
    finite_diff_gradient,
    frobenius_norm,
    jacobi_svd,
    max_relative_error,
    svd_best_rank_r,
)


class TestRngStream:
    def test_reproducible_across_instances(self):
        a = RngStream(1234, 7).normal((64,))
        b = RngStream(1234, 7).normal((64,))
        assert a.tobytes() == b.tobytes()

    def test_distinct_streams_differ(self):
        a = RngStream(1234, 7).normal((64,))
        b = RngStream(1234, 8).normal((64,))
        assert not np.array_equal(a, b)

    def test_state_roundtrip_continues_identically(self):
        s = RngStream(42, 3)
        s.normal((10,))
        snap = s.get_state()
        expect = s.normal((10,))
        restored = RngStream.from_state(snap)
        assert np.array_equal(restored.normal((10,)), expect)

    def test_state_roundtrip_through_json(self):
        import json

        s = RngStream(9, 0)
        s.uniform(shape=(5,))
        snap = json.loads(json.dumps(s.get_state()))
        expect = s.integers(0, 1000, (8,))
        assert np.array_equal(RngStream.from_state(snap).integers(0, 1000, (8,)), expect)


class TestAdam:
    def test_zero_grads_leave_params_unchanged(self):
        params = {"w": np.array([[1.0, -2.0], [0.5, 3.0]])}
        grads = {"w": np.zeros((2, 2))}
        state = AdamState.for_params(params, lr=1e-3)
        new_params, new_state = adam_step(params, grads, state)
        assert np.array_equal(new_params["w"], params["w"])
        assert new_state.step == 1

    def test_scalar_first_step_matches_hand_formula(self):
        # g=1 at step 1: bias-corrected m_hat = v_hat = 1, so the update is
        # -lr * 1 / (1 + eps).
        params = {"x": np.array([[0.0]])}
        grads = {"x": np.array([[1.0]])}
        state = AdamState.for_params(params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-5)
        new_params, _ = adam_step(params, grads, state)
        expected = -1e-3 * 1.0 / (1.0 + 1e-5)
        assert new_params["x"][0, 0] == pytest.approx(expected, rel=1e-12)

    def test_deterministic(self):
        rng = RngStream(0)
        params = {"w": rng.normal((3, 4))}
        grads = {"w": rng.normal((3, 4))}
        state = AdamState.for_params(params, lr=1e-2)
        out1 = adam_step(params, grads, state)
        out2 = adam_step(params, grads, state)
        assert np.array_equal(out1[0]["w"], out2[0]["w"])
        assert np.array_equal(out1[1].m["w"], out2[1].m["w"])

    def test_shape_mismatch_rejected(self):
        params = {"w": np.zeros((2, 2))}
        grads = {"w": np.zeros((2, 3))}
        with pytest.raises(ValueError, match="shape"):
            adam_step(params, grads, AdamState.for_params(params, lr=1e-3))

    def test_finite_preserving_and_shape_preserving(self):
        rng = RngStream(5)
        params = {"a": rng.normal((4, 3)), "b": rng.normal((3,))}
        grads = {"a": rng.normal((4, 3), 10.0), "b": rng.normal((3,), 10.0)}
        state = AdamState.for_params(params, lr=0.1)
        for _ in range(50):
            params, state = adam_step(params, grads, state)
        for v in params.values():
            assert np.all(np.isfinite(v))
        assert params["a"].shape == (4, 3) and params["b"].shape == (3,)

    def test_clip_grads_by_norm(self):
        grads = {"a": np.array([3.0, 4.0])}
        clipped, norm = clip_grads_by_norm(grads, 1.0)
        assert norm == pytest.approx(5.0)
        assert np.linalg.norm(clipped["a"]) == pytest.approx(1.0)
        same, norm2 = clip_grads_by_norm(grads, 10.0)
        assert np.array_equal(same["a"], grads["a"]) and norm2 == pytest.approx(5.0)


class TestFiniteDiff:
    def test_quadratic_gradient_is_identity(self):
        x = {"v": RngStream(1).normal((3, 2))}
        grad = finite_diff_gradient(lambda p: 0.5 * float(np.sum(p["v"] ** 2)), x, 1e-5)
        assert np.allclose(grad["v"], x["v"], atol=1e-8)

    def test_tanh_sum_at_zero_gives_ones(self):
        x = {"v": np.zeros((4,))}
        grad = finite_diff_gradient(lambda p: float(np.sum(np.tanh(p["v"]))), x, 1e-5)
        assert np.allclose(grad["v"], 1.0, atol=1e-9)

    def test_h_must_be_positive(self):
        with pytest.raises(ValueError):
            finite_diff_gradient(lambda p: 0.0, {"v": np.zeros(1)}, 0.0)

    def test_non_finite_objective_raises(self):
        with pytest.raises(FloatingPointError):
            finite_diff_gradient(lambda p: float("nan"), {"v": np.zeros(2)}, 1e-5)


class TestFrobenius:
    def test_zero_matrix(self):
        assert frobenius_norm(np.zeros((3, 5))) == 0.0

    def test_identity_4(self):
        assert frobenius_norm(np.eye(4)) == pytest.approx(2.0)

    def test_hand_case(self):
        assert frobenius_norm(np.array([[3.0, 4.0], [0.0, 0.0]])) == pytest.approx(5.0)


class TestSvdBestRank:
    def test_identity_full_rank_reproduces_input(self):
        m = np.eye(3)
        out = svd_best_rank_r(m, 3)
        assert np.linalg.norm(out - m) < 1e-12

    def test_exact_low_rank_input_recovered(self):
        rng = RngStream(2)
        m = rng.normal((4, 2)) @ rng.normal((2, 4))  # rank 2 by construction
        out = svd_best_rank_r(m, 2)
        assert frobenius_norm(m - out) < 1e-9

    def test_error_matches_discarded_singular_values(self):
        # Oracle: LAPACK SVD (independent of the one-sided Jacobi under test).
        m = RngStream(3).normal((8, 6))
        sigma = np.linalg.svd(m, compute_uv=False)
        out = svd_best_rank_r(m, 3)
        err = frobenius_norm(m - out)
        expected = float(np.sqrt(np.sum(sigma[3:] ** 2)))
        assert err == pytest.approx(expected, rel=1e-9)

    def test_singular_values_match_lapack(self):
        m = RngStream(4).normal((7, 9))
        _, s, _ = jacobi_svd(m)
        s_np = np.linalg.svd(m, compute_uv=False)
        assert np.allclose(s, s_np, rtol=1e-12, atol=1e-12)

    def test_reconstruction_orthogonality(self):
        m = RngStream(8).normal((6, 5))
        u, s, vt = jacobi_svd(m)
        assert np.allclose(u.T @ u, np.eye(5), atol=1e-10)
        assert np.allclose(vt @ vt.T, np.eye(5), atol=1e-10)
        assert np.allclose((u * s) @ vt, m, atol=1e-10)

    def test_error_non_increasing_in_rank(self):
        m = RngStream(5).normal((9, 7))
        errs = [frobenius_norm(m - svd_best_rank_r(m, r)) for r in range(1, 8)]
        assert all(a >= b - 1e-9 for a, b in zip(errs, errs[1:]))
        assert errs[-1] < 1e-9  # full rank reproduces the input

    def test_rank_out_of_range(self):
        m = np.eye(3)
        for bad in (0, 4):
            with pytest.raises(ValueError, match="rank"):
                svd_best_rank_r(m, bad)

    def test_rejects_non_finite(self):
        m = np.array([[1.0, np.nan], [0.0, 1.0]])
        with pytest.raises(ValueError, match="NaN"):
            svd_best_rank_r(m, 1)


@settings(max_examples=25, deadline=None)
@given(st.integers(min_value=0, max_value=2 ** 32 - 1),
       st.integers(min_value=2, max_value=6),
       st.integers(min_value=2, max_value=6))
def test_svd_rank1_never_beats_full(seed, rows, cols):
    m = RngStream(seed).normal((rows, cols))
    e1 = frobenius_norm(m - svd_best_rank_r(m, 1))
    efull = frobenius_norm(m - svd_best_rank_r(m, min(rows, cols)))
    assert e1 >= efull - 1e-9


def test_max_relative_error_basics():
    a = {"x": np.array([1.0, 0.0])}
    b = {"x": np.array([1.0 + 1e-6, 0.0])}
    assert max_relative_error(a, b) < 2e-6
