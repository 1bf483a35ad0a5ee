"""Pluggable per-head attention kernels.

A kernel maps full-sequence per-head views ``q, k, v`` of shape
(n, b, hdim) to a context of the same shape. The schemes never care which
kernel runs: sequence parallelism happens outside this boundary, so dense,
causal, and blocked-sparse attention (and in principle anything else with
this signature) all parallelize identically.

The blocked kernel really is sparse: it evaluates scores only for the
(query block, key block) pairs in the mask pattern. Its dual is the dense
evaluation path with the same blocked mask applied in ``row_softmax``;
the two must agree to 1e-12 and the tests hold them to that.
"""

from __future__ import annotations

import numpy as np

from .tensor import DegenerateRowError, DivisibilityError, Mask, matmul, row_softmax


class KernelError(ValueError):
    """Kernel and mask kinds are incompatible."""


def _check_qkv(q: np.ndarray, k: np.ndarray, v: np.ndarray):
    if q.shape != k.shape or q.shape != v.shape or q.ndim != 3:
        raise KernelError(f"kernel needs equal (n, b, hdim) views, got {q.shape}, {k.shape}, {v.shape}")


def _masked_attention(q, k, v, mask: Mask, scale: float) -> np.ndarray:
    """Full-score evaluation: softmax(Q K^T * scale) V under ``mask``."""
    _check_qkv(q, k, v)
    n, b, hdim = q.shape
    ctx = np.empty((n, b, hdim))
    for bi in range(b):
        scores = matmul(q[:, bi, :], k[:, bi, :].T) * scale
        probs = row_softmax(scores, mask, row_offset=0)
        ctx[:, bi, :] = matmul(probs, v[:, bi, :])
    return ctx


def dense_kernel(q, k, v, mask: Mask, scale: float) -> np.ndarray:
    if mask.kind != "none":
        raise KernelError(f"dense kernel needs mask kind 'none', got {mask.kind!r}")
    return _masked_attention(q, k, v, mask, scale)


def causal_kernel(q, k, v, mask: Mask, scale: float) -> np.ndarray:
    if mask.kind != "causal":
        raise KernelError(f"causal kernel needs mask kind 'causal', got {mask.kind!r}")
    return _masked_attention(q, k, v, mask, scale)


def blocked_kernel(q, k, v, mask: Mask, scale: float) -> np.ndarray:
    """Blocked-sparse attention: only pattern blocks are ever computed."""
    if mask.kind != "blocked":
        raise KernelError(f"blocked kernel needs mask kind 'blocked', got {mask.kind!r}")
    _check_qkv(q, k, v)
    n, b, hdim = q.shape
    bs = mask.block_size
    if n % bs != 0:
        raise DivisibilityError(f"block_size {bs} does not divide sequence length {n}")
    nblocks = n // bs
    bad = sorted((qb, kb) for qb, kb in mask.pattern if qb >= nblocks or kb >= nblocks)
    if bad:
        raise ValueError(f"pattern blocks {bad[:4]} out of range for {nblocks} blocks")
    visible = {qb: sorted(kb for qb2, kb in mask.pattern if qb2 == qb) for qb in range(nblocks)}
    ctx = np.empty((n, b, hdim))
    for bi in range(b):
        qm = q[:, bi, :]
        km = k[:, bi, :]
        vm = v[:, bi, :]
        for qb in range(nblocks):
            kbs = visible[qb]
            if not kbs:
                raise DegenerateRowError(
                    f"query block {qb} has no visible key blocks (invalid sparse pattern)"
                )
            rows = slice(qb * bs, (qb + 1) * bs)
            kcat = np.concatenate([km[kb * bs:(kb + 1) * bs, :] for kb in kbs], axis=0)
            vcat = np.concatenate([vm[kb * bs:(kb + 1) * bs, :] for kb in kbs], axis=0)
            scores = matmul(qm[rows, :], kcat.T) * scale
            probs = row_softmax(scores, Mask.none(), row_offset=0)
            ctx[rows, bi, :] = matmul(probs, vcat)
    return ctx


def masked_attention_backward(q, k, v, dctx, mask: Mask, scale: float):
    """Reverse-mode of the full-score attention for dense/causal masks.

    Recomputes probabilities from (q, k) — bitwise the same values the
    forward produced — and returns (dq, dk, dv) per-head gradients.
    """
    if mask.kind not in ("none", "causal"):
        raise KernelError(f"backward supports dense/causal masks only, got {mask.kind!r}")
    _check_qkv(q, k, v)
    n, b, hdim = q.shape
    dq = np.empty_like(q)
    dk = np.empty_like(k)
    dv = np.empty_like(v)
    for bi in range(b):
        q2, k2, v2, dctx2 = q[:, bi, :], k[:, bi, :], v[:, bi, :], dctx[:, bi, :]
        probs = row_softmax(matmul(q2, k2.T) * scale, mask, row_offset=0)
        dprobs = matmul(dctx2, v2.T)
        dot = (dprobs * probs).sum(axis=1, keepdims=True)
        dscores = probs * (dprobs - dot) * scale
        dq[:, bi, :] = matmul(dscores, k2)
        dk[:, bi, :] = matmul(dscores.T, q2)
        dv[:, bi, :] = matmul(probs.T, dctx2)
    return dq, dk, dv


KERNELS = {
    "dense": dense_kernel,
    "causal": causal_kernel,
    "blocked": blocked_kernel,
}

# mask kind each named kernel expects
KERNEL_MASK_KIND = {"dense": "none", "causal": "causal", "blocked": "blocked"}


def get_kernel(name: str):
    try:
        return KERNELS[name]
    except KeyError:
        raise KernelError(f"unknown kernel {name!r}, expected one of {sorted(KERNELS)}") from None


def default_mask_for(kernel_name: str, n: int, block_size: int = 4) -> Mask:
    """The mask a named kernel expects, with a block-causal default pattern."""
    kind = KERNEL_MASK_KIND.get(kernel_name)
    if kind is None:
        raise KernelError(f"unknown kernel {kernel_name!r}")
    if kind == "none":
        return Mask.none()
    if kind == "causal":
        return Mask.causal()
    from .tensor import causal_block_pattern

    return Mask.blocked(block_size, causal_block_pattern(n, block_size))
