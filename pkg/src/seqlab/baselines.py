"""Baseline sequence-parallel schemes the all-to-all design is compared to.

Both baselines produce outputs equal to the single-rank oracle; what
differs is their communication footprint, which the ledger meters exactly:

* Megatron-style: sequence shards are all-gathered before attention and
  before the MLP, head/column-parallel compute follows, and partial
  results are reduce-scattered back. Two all-gathers plus two
  reduce-scatters of aggregate n*b*d per block.
* Ring attention: queries stay local while K and then V chunks circulate
  the ring; 2*(P-1) ring shifts of n*b*d/P per attention layer.
"""

from __future__ import annotations

import numpy as np

from .kernels import KernelError, get_kernel
from .layers import AttentionSpec, LayerWeights, gelu, layernorm, project
from .simgroup import CommLedger, RankContext, RankGroup
from .tensor import Tensor3, matmul, row_softmax
from .ulysses import SEQUENCE, ShardedTensor, shard_sequence, unshard_sequence


def megatron_sp_block_forward(local_x: ShardedTensor, w: LayerWeights,
                              spec: AttentionSpec, kernel, ctx: RankContext,
                              prefix: str = "L0") -> ShardedTensor:
    """Transformer block with allgather/reduce-scatter sequence parallelism.

    Attention and MLP are tensor-parallel over heads/columns; the
    sequence dimension is resharded at the region boundaries. Intra-layer
    tensor-parallel reductions are folded into the reduce-scatter, so one
    block costs exactly 2 all_gather + 2 reduce_scatter of n*b*d.
    """
    spec.check_group(ctx.p)
    p, rank = ctx.p, ctx.rank
    xv = local_x.data.data
    heads_per_rank = spec.h_heads // p
    c0, c1 = rank * spec.d // p, (rank + 1) * spec.d // p

    # attention region
    t1 = layernorm(xv, w.ln1_gain, w.ln1_bias)
    t_full = ctx.all_gather(t1, axis=0, label=f"{prefix}.attn.ag")
    q4 = project(t_full, w.wq[:, c0:c1]).reshape(spec.n, spec.b, heads_per_rank, spec.hdim)
    k4 = project(t_full, w.wk[:, c0:c1]).reshape(spec.n, spec.b, heads_per_rank, spec.hdim)
    v4 = project(t_full, w.wv[:, c0:c1]).reshape(spec.n, spec.b, heads_per_rank, spec.hdim)
    ctx4 = np.empty_like(q4)
    for hh in range(heads_per_rank):
        ctx4[:, :, hh, :] = kernel(
            q4[:, :, hh, :], k4[:, :, hh, :], v4[:, :, hh, :], spec.mask, spec.scale
        )
    ctx_slice = ctx4.reshape(spec.n, spec.b, spec.d // p)
    partial = project(ctx_slice, w.wo[c0:c1, :])
    attn_shard = ctx.reduce_scatter(partial, axis=0, label=f"{prefix}.attn.rs")
    x1 = xv + attn_shard

    # MLP region
    m0, m1 = rank * w.w1.shape[1] // p, (rank + 1) * w.w1.shape[1] // p
    t2 = layernorm(x1, w.ln2_gain, w.ln2_bias)
    t2_full = ctx.all_gather(t2, axis=0, label=f"{prefix}.mlp.ag")
    hidden = gelu(project(t2_full, w.w1[:, m0:m1]))
    partial2 = project(hidden, w.w2[m0:m1, :])
    mlp_shard = ctx.reduce_scatter(partial2, axis=0, label=f"{prefix}.mlp.rs")
    out = x1 + mlp_shard
    return ShardedTensor(rank=rank, layout=SEQUENCE, data=Tensor3(out))


def ring_attention_forward(local_x: ShardedTensor, w: LayerWeights,
                           spec: AttentionSpec, ctx: RankContext,
                           prefix: str = "L0") -> ShardedTensor:
    """Ring self-attention: Q local, K then V circulate P-1 steps each.

    Full score rows (n/P, n) are assembled per head before the softmax;
    the context accumulates one chunk product per arriving V chunk.
    """
    spec.check_group(ctx.p)
    if spec.mask.kind not in ("none", "causal"):
        raise KernelError(f"ring attention supports dense/causal masks, got {spec.mask.kind!r}")
    p, rank = ctx.p, ctx.rank
    ns = spec.n // p
    xv = local_x.data.data
    q4 = project(xv, w.wq).reshape(ns, spec.b, spec.h_heads, spec.hdim)
    k_loc = project(xv, w.wk)
    v_loc = project(xv, w.wv)

    # K phase: fill the (n/P, n) score rows chunk by chunk
    scores = np.empty((spec.h_heads, spec.b, ns, spec.n))
    cur_k = k_loc
    for step in range(p):
        src = (rank - step) % p
        k4 = cur_k.reshape(ns, spec.b, spec.h_heads, spec.hdim)
        cols = slice(src * ns, (src + 1) * ns)
        for hh in range(spec.h_heads):
            for bi in range(spec.b):
                scores[hh, bi, :, cols] = (
                    matmul(q4[:, bi, hh, :], k4[:, bi, hh, :].T) * spec.scale
                )
        if step < p - 1:
            cur_k = ctx.ring_shift(cur_k, steps=1, label=f"{prefix}.attn.kring.{step}")

    probs = np.empty_like(scores)
    for hh in range(spec.h_heads):
        for bi in range(spec.b):
            probs[hh, bi] = row_softmax(scores[hh, bi], spec.mask, row_offset=rank * ns)

    # V phase: accumulate context in chunk arrival order
    ctx4 = np.zeros((ns, spec.b, spec.h_heads, spec.hdim))
    cur_v = v_loc
    for step in range(p):
        src = (rank - step) % p
        v4 = cur_v.reshape(ns, spec.b, spec.h_heads, spec.hdim)
        cols = slice(src * ns, (src + 1) * ns)
        for hh in range(spec.h_heads):
            for bi in range(spec.b):
                ctx4[:, bi, hh, :] += matmul(probs[hh, bi, :, cols], v4[:, bi, hh, :])
        if step < p - 1:
            cur_v = ctx.ring_shift(cur_v, steps=1, label=f"{prefix}.attn.vring.{step}")

    c_seq = ctx4.reshape(ns, spec.b, spec.d)
    out = project(c_seq, w.wo)
    return ShardedTensor(rank=rank, layout=SEQUENCE, data=Tensor3(out))


# -- single-call drivers ------------------------------------------------------


def run_megatron_blocks(x: Tensor3, weights: list[LayerWeights], spec: AttentionSpec,
                        kernel_name: str, p: int, mode: str = "lockstep",
                        ledger: CommLedger | None = None) -> tuple[Tensor3, CommLedger]:
    kernel = get_kernel(kernel_name)
    shards = shard_sequence(x, p)
    group = RankGroup(p, mode=mode, ledger=ledger)

    def program(ctx: RankContext) -> ShardedTensor:
        cur = shards[ctx.rank]
        for i, w in enumerate(weights):
            cur = megatron_sp_block_forward(cur, w, spec, kernel, ctx, prefix=f"L{i}")
        return cur

    results = group.run(program)
    return unshard_sequence(results), group.ledger


def run_ring_attention(x: Tensor3, weights: list[LayerWeights], spec: AttentionSpec,
                       p: int, mode: str = "lockstep",
                       ledger: CommLedger | None = None) -> tuple[Tensor3, CommLedger]:
    """Ring attention stacked ``len(weights)`` times (attention-only layers)."""
    shards = shard_sequence(x, p)
    group = RankGroup(p, mode=mode, ledger=ledger)

    def program(ctx: RankContext) -> ShardedTensor:
        cur = shards[ctx.rank]
        for i, w in enumerate(weights):
            cur = ring_attention_forward(cur, w, spec, ctx, prefix=f"L{i}")
        return cur

    results = group.run(program)
    return unshard_sequence(results), group.ledger
