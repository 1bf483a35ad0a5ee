"""Transformer layer ingredients shared by the oracle and every scheme.

One block = pre-layernorm attention with residual, then pre-layernorm
GELU MLP (4x expansion) with residual. No dropout, no positional
encoding: everything is a deterministic function of the seeded weights
and the input, which is what makes cross-scheme bitwise comparison
meaningful.

All row-wise pieces (layernorm, GELU, projections of independent rows)
are bitwise stable under sequence sharding because ``tensor.matmul``
fixes the inner summation order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from .tensor import DivisibilityError, Mask, Tensor3, matmul

LN_EPS = 1e-5
MLP_EXPANSION = 4


@dataclass(frozen=True)
class AttentionSpec:
    """Shape and convention bundle for one attention configuration.

    ``scale`` is 1/sqrt(head_dim); the oracle and all schemes share this
    choice so equivalence tests compare parallelization, not conventions.
    """

    n: int
    b: int
    d: int
    h_heads: int
    mask: Mask
    hdim: int = 0
    scale: float = 0.0

    def __post_init__(self):
        if min(self.n, self.b, self.d, self.h_heads) < 1:
            raise ValueError("all AttentionSpec dims must be >= 1")
        if self.d % self.h_heads != 0:
            raise DivisibilityError(
                f"head count {self.h_heads} does not divide hidden size {self.d}"
            )
        object.__setattr__(self, "hdim", self.d // self.h_heads)
        object.__setattr__(self, "scale", 1.0 / np.sqrt(self.hdim))

    def check_group(self, p: int):
        if self.n % p != 0:
            raise DivisibilityError(f"p={p} does not divide sequence length n={self.n}")
        if self.h_heads % p != 0:
            raise DivisibilityError(f"p={p} does not divide head count {self.h_heads}")


@dataclass(frozen=True)
class LayerWeights:
    """Replicated per-layer weights, all generated from ``seed``."""

    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w1: np.ndarray
    w2: np.ndarray
    ln1_gain: np.ndarray
    ln1_bias: np.ndarray
    ln2_gain: np.ndarray
    ln2_bias: np.ndarray
    seed: int

    @property
    def d(self) -> int:
        return self.wq.shape[0]


def make_weights(d: int, seed: int, layer: int = 0) -> LayerWeights:
    """Deterministic weights for one layer; (seed, layer) keys the stream."""
    rng = np.random.default_rng([int(seed), 101, int(layer)])
    inv = 1.0 / np.sqrt(d)
    return LayerWeights(
        wq=rng.standard_normal((d, d)) * inv,
        wk=rng.standard_normal((d, d)) * inv,
        wv=rng.standard_normal((d, d)) * inv,
        wo=rng.standard_normal((d, d)) * inv,
        w1=rng.standard_normal((d, MLP_EXPANSION * d)) * inv,
        w2=rng.standard_normal((MLP_EXPANSION * d, d)) / np.sqrt(MLP_EXPANSION * d),
        ln1_gain=1.0 + 0.1 * rng.standard_normal(d),
        ln1_bias=0.1 * rng.standard_normal(d),
        ln2_gain=1.0 + 0.1 * rng.standard_normal(d),
        ln2_bias=0.1 * rng.standard_normal(d),
        seed=int(seed),
    )


def make_input(n: int, b: int, d: int, seed: int) -> Tensor3:
    """Deterministic activation tensor keyed by (seed, shape)."""
    rng = np.random.default_rng([int(seed), 202])
    return Tensor3(rng.standard_normal((n, b, d)))


def layernorm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Row-wise layer normalization over the trailing (hidden) axis."""
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + LN_EPS) * gain + bias


def gelu(x: np.ndarray) -> np.ndarray:
    """Exact (erf-based) GELU, applied elementwise."""
    return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))


def project(x3: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Apply a (d_in, d_out) weight to the trailing axis of an (s, b, d_in) array."""
    s, b, din = x3.shape
    out = matmul(x3.reshape(s * b, din), w)
    return out.reshape(s, b, w.shape[1])


def mlp(x3: np.ndarray, w: LayerWeights) -> np.ndarray:
    """GELU MLP with 4x expansion; runs row-wise, shard-stable."""
    return project(gelu(project(x3, w.w1)), w.w2)
