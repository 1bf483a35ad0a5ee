"""Kernel interface: dense/causal/blocked agreement and error paths."""

import numpy as np
import pytest

from seqlab.kernels import (
    KernelError,
    blocked_kernel,
    causal_kernel,
    dense_kernel,
    get_kernel,
    masked_attention_backward,
)
from seqlab.tensor import (
    DegenerateRowError,
    Mask,
    causal_block_pattern,
    full_block_pattern,
    matmul,
    row_softmax,
)


def rand_qkv(n, b, hdim, seed=0):
    rng = np.random.default_rng(seed)
    return (rng.standard_normal((n, b, hdim)),
            rng.standard_normal((n, b, hdim)),
            rng.standard_normal((n, b, hdim)))


class TestKernelBasics:
    def test_single_token_context_is_v(self):
        q, k, v = rand_qkv(1, 2, 4)
        out = dense_kernel(q, k, v, Mask.none(), 0.5)
        assert np.array_equal(out, v)

    def test_causal_first_row_is_v0(self):
        q, k, v = rand_qkv(5, 1, 3, seed=2)
        out = causal_kernel(q, k, v, Mask.causal(), 0.7)
        assert np.allclose(out[0], v[0], rtol=0.0, atol=1e-15)

    def test_blocked_full_pattern_equals_dense(self):
        n, b, hdim = 8, 2, 4
        q, k, v = rand_qkv(n, b, hdim, seed=3)
        mask = Mask.blocked(2, full_block_pattern(n, 2))
        sparse = blocked_kernel(q, k, v, mask, 0.5)
        dense = dense_kernel(q, k, v, Mask.none(), 0.5)
        assert np.abs(sparse - dense).max() <= 1e-12

    def test_blocked_equals_dense_evaluation_under_same_mask(self):
        # dual route: sparse evaluation vs full scores + blocked row_softmax
        n, b, hdim, bs = 8, 1, 4, 2
        q, k, v = rand_qkv(n, b, hdim, seed=4)
        mask = Mask.blocked(bs, causal_block_pattern(n, bs))
        sparse = blocked_kernel(q, k, v, mask, 0.5)
        scores = matmul(q[:, 0, :], k[:, 0, :].T) * 0.5
        probs = row_softmax(scores, mask, row_offset=0)
        dense_route = matmul(probs, v[:, 0, :])
        assert np.abs(sparse[:, 0, :] - dense_route).max() <= 1e-12

    def test_banded_pattern_differs_from_dense(self):
        n = 8
        q, k, v = rand_qkv(n, 1, 4, seed=5)
        mask = Mask.blocked(2, causal_block_pattern(n, 2))
        sparse = blocked_kernel(q, k, v, mask, 0.5)
        dense = dense_kernel(q, k, v, Mask.none(), 0.5)
        assert np.abs(sparse - dense).max() > 1e-6


class TestKernelErrors:
    def test_mask_kind_mismatch(self):
        q, k, v = rand_qkv(2, 1, 2)
        with pytest.raises(KernelError):
            dense_kernel(q, k, v, Mask.causal(), 1.0)
        with pytest.raises(KernelError):
            causal_kernel(q, k, v, Mask.none(), 1.0)
        with pytest.raises(KernelError):
            blocked_kernel(q, k, v, Mask.none(), 1.0)

    def test_unknown_kernel_name(self):
        with pytest.raises(KernelError):
            get_kernel("flash")

    def test_degenerate_query_block(self):
        q, k, v = rand_qkv(4, 1, 2)
        mask = Mask.blocked(2, {(1, 0), (1, 1)})  # block 0 sees nothing
        with pytest.raises(DegenerateRowError):
            blocked_kernel(q, k, v, mask, 1.0)

    def test_backward_rejects_blocked(self):
        q, k, v = rand_qkv(4, 1, 2)
        mask = Mask.blocked(2, full_block_pattern(4, 2))
        with pytest.raises(KernelError):
            masked_attention_backward(q, k, v, np.zeros_like(q), mask, 1.0)

    def test_out_of_range_pattern_blocks_rejected(self):
        q, k, v = rand_qkv(4, 1, 2)
        mask = Mask.blocked(2, {(0, 0), (1, 5)})
        with pytest.raises(ValueError, match="out of range"):
            blocked_kernel(q, k, v, mask, 1.0)
        with pytest.raises(ValueError, match="out of range"):
            row_softmax(np.zeros((4, 4)), mask, row_offset=0)


class TestBackwardMath:
    def test_finite_difference_per_head(self):
        n, b, hdim = 5, 1, 3
        q, k, v = rand_qkv(n, b, hdim, seed=9)
        mask = Mask.causal()
        scale = 1.0 / np.sqrt(hdim)

        out = causal_kernel(q, k, v, mask, scale)
        g = 2.0 * out  # d/dout of sum(out^2)
        dq, dk, dv = masked_attention_backward(q, k, v, g, mask, scale)

        def loss(q, k, v):
            return float((causal_kernel(q, k, v, mask, scale) ** 2).sum())

        eps = 1e-6
        rng = np.random.default_rng(1)
        for name, arr, grad in (("q", q, dq), ("k", k, dk), ("v", v, dv)):
            for _ in range(5):
                i, j, l = rng.integers(n), rng.integers(b), rng.integers(hdim)
                hi, lo = arr.copy(), arr.copy()
                hi[i, j, l] += eps
                lo[i, j, l] -= eps
                args_hi = {"q": q, "k": k, "v": v} | {name: hi}
                args_lo = {"q": q, "k": k, "v": v} | {name: lo}
                fd = (loss(**args_hi) - loss(**args_lo)) / (2 * eps)
                an = grad[i, j, l]
                assert abs(an - fd) <= 1e-6 * max(1.0, abs(an), abs(fd))
