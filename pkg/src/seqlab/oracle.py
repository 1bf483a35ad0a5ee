"""Single-rank reference implementations: the ground truth for every scheme.

The oracle shares the kernel and block recipe with the parallel schemes
on purpose — equivalence tests isolate the parallelization, not the
conventions. ``reference_attention`` is multi-head attention with output
projection; ``reference_block`` is the full pre-layernorm transformer
block; ``reference_attention_backward`` is the analytic reverse-mode
gradient, validated against central finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kernels import KernelError, masked_attention_backward
from .layers import AttentionSpec, LayerWeights, layernorm, mlp, project
from .tensor import ShapeError, Tensor3, matmul


@dataclass(frozen=True)
class AttentionState:
    """Forward intermediates saved for the analytic backward pass."""

    x: Tensor3
    q4: np.ndarray      # (n, b, h, hdim)
    k4: np.ndarray
    v4: np.ndarray
    context: np.ndarray  # (n, b, d), pre output-projection
    spec: AttentionSpec


@dataclass(frozen=True)
class ComparisonReport:
    """Max-abs comparison of two equally shaped tensors."""

    max_abs_err: float
    worst_index: tuple
    tol: float
    passed: bool


def reference_attention(x: Tensor3, w: LayerWeights, spec: AttentionSpec, kernel) -> Tensor3:
    out, _ = reference_attention_with_state(x, w, spec, kernel)
    return out


def reference_attention_with_state(
    x: Tensor3, w: LayerWeights, spec: AttentionSpec, kernel
) -> tuple[Tensor3, AttentionState]:
    """Multi-head attention per the shared convention, keeping intermediates.

    Per head: kernel(softmax(Q K^T * scale) V); heads merged; output
    projection applied.
    """
    n, b, d, h = spec.n, spec.b, spec.d, spec.h_heads
    if x.shape != (n, b, d):
        raise ShapeError(f"input shape {x.shape} does not match spec ({n}, {b}, {d})")
    q4 = project(x.data, w.wq).reshape(n, b, h, spec.hdim)
    k4 = project(x.data, w.wk).reshape(n, b, h, spec.hdim)
    v4 = project(x.data, w.wv).reshape(n, b, h, spec.hdim)
    ctx4 = np.empty_like(q4)
    for hh in range(h):
        ctx4[:, :, hh, :] = kernel(
            q4[:, :, hh, :], k4[:, :, hh, :], v4[:, :, hh, :], spec.mask, spec.scale
        )
    context = ctx4.reshape(n, b, d)
    out = project(context, w.wo)
    state = AttentionState(x=x, q4=q4, k4=k4, v4=v4, context=context, spec=spec)
    return Tensor3(out), state


def reference_block(x: Tensor3, w: LayerWeights, spec: AttentionSpec, kernel) -> Tensor3:
    """Pre-layernorm block: x + Attn(LN(x)), then + MLP(LN(.))."""
    t1 = layernorm(x.data, w.ln1_gain, w.ln1_bias)
    attn = reference_attention(Tensor3(t1), w, spec, kernel)
    x1 = x.data + attn.data
    t2 = layernorm(x1, w.ln2_gain, w.ln2_bias)
    return Tensor3(x1 + mlp(t2, w))


def reference_attention_backward(
    grad_out: Tensor3, state: AttentionState, w: LayerWeights, spec: AttentionSpec
) -> tuple[Tensor3, dict[str, np.ndarray]]:
    """Analytic gradients of reference_attention wrt input and weights."""
    if spec.mask.kind not in ("none", "causal"):
        raise KernelError(
            f"analytic backward supports dense/causal masks only, got {spec.mask.kind!r}"
        )
    n, b, d, h = spec.n, spec.b, spec.d, spec.h_heads
    if grad_out.shape != (n, b, d):
        raise ShapeError(f"grad shape {grad_out.shape} does not match spec ({n}, {b}, {d})")
    g2 = grad_out.data.reshape(n * b, d)
    c2 = state.context.reshape(n * b, d)
    dwo = matmul(c2.T, g2)
    dctx4 = matmul(g2, w.wo.T).reshape(n, b, h, spec.hdim)

    dq4 = np.empty_like(dctx4)
    dk4 = np.empty_like(dctx4)
    dv4 = np.empty_like(dctx4)
    for hh in range(h):
        dq4[:, :, hh, :], dk4[:, :, hh, :], dv4[:, :, hh, :] = masked_attention_backward(
            state.q4[:, :, hh, :],
            state.k4[:, :, hh, :],
            state.v4[:, :, hh, :],
            dctx4[:, :, hh, :],
            spec.mask,
            spec.scale,
        )
    dq2 = dq4.reshape(n * b, d)
    dk2 = dk4.reshape(n * b, d)
    dv2 = dv4.reshape(n * b, d)
    x2 = state.x.data.reshape(n * b, d)
    grad_w = {
        "wq": matmul(x2.T, dq2),
        "wk": matmul(x2.T, dk2),
        "wv": matmul(x2.T, dv2),
        "wo": dwo,
    }
    dx2 = matmul(dq2, w.wq.T) + matmul(dk2, w.wk.T) + matmul(dv2, w.wv.T)
    return Tensor3(dx2.reshape(n, b, d)), grad_w


def compare(a: Tensor3, bten: Tensor3, tol: float) -> ComparisonReport:
    """Max-abs error report, with the worst element's index."""
    if a.shape != bten.shape:
        raise ShapeError(f"cannot compare shapes {a.shape} and {bten.shape}")
    diff = np.abs(a.data - bten.data)
    idx = np.unravel_index(int(np.argmax(diff)), diff.shape)
    max_abs = float(diff[idx])
    return ComparisonReport(
        max_abs_err=max_abs,
        worst_index=tuple(int(i) for i in idx),
        tol=float(tol),
        passed=bool(max_abs <= tol),
    )
