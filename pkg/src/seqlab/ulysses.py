"""All-to-all sequence parallelism (the Ulysses scheme).

Activations live sequence-sharded: every rank holds n/P contiguous token
rows of the (n, b, d) tensor. Right before attention, one all-to-all per
Q/K/V flips the layout to head-sharded — full sequence, h/P heads — so
each rank runs ordinary full attention for its own heads with any kernel.
A fourth all-to-all flips the context back to sequence-sharded for the
output projection, MLP, and layernorms, which are all row-wise and need
no communication at all.

Per attention layer the ledger therefore shows exactly four all_to_all
records: three of aggregate n*b*d (Q, K, V) and one of n*b*d (context).
The backward pass mirrors the forward with four more.

Because the projections are row-wise and ``tensor.matmul`` fixes its
summation order, the scheme is bitwise equal to the single-rank oracle
at every P, not merely within tolerance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kernels import get_kernel, masked_attention_backward
from .layers import AttentionSpec, LayerWeights, layernorm, mlp, project
from .simgroup import CommLedger, RankContext, RankGroup, ShardError
from .tensor import Tensor3, Tensor4, matmul

SEQUENCE = "sequence"
HEAD = "head"


class ReconstructionError(ValueError):
    """Shard set is incomplete or inconsistent."""


class ForwardStateError(ValueError):
    """Backward called without a matching saved forward state."""


@dataclass(frozen=True)
class ShardedTensor:
    """Rank-local partition with an explicit layout tag.

    sequence layout: Tensor3 of shape (n/P, b, d)
    head layout:     Tensor4 of shape (n, b, h/P, hdim)
    """

    rank: int
    layout: str
    data: Tensor3 | Tensor4

    def __post_init__(self):
        if self.layout == SEQUENCE and not isinstance(self.data, Tensor3):
            raise ReconstructionError("sequence-sharded data must be a Tensor3")
        if self.layout == HEAD and not isinstance(self.data, Tensor4):
            raise ReconstructionError("head-sharded data must be a Tensor4")
        if self.layout not in (SEQUENCE, HEAD):
            raise ReconstructionError(f"unknown layout {self.layout!r}")


@dataclass(frozen=True)
class UlyssesState:
    """Per-rank forward intermediates needed by the mirrored backward."""

    local_x: ShardedTensor
    q4: np.ndarray       # (n, b, h/P, hdim), this rank's heads
    k4: np.ndarray
    v4: np.ndarray
    c_seq: np.ndarray    # (n/P, b, d), merged context before output projection
    spec: AttentionSpec


def shard_sequence(x: Tensor3, p: int) -> list[ShardedTensor]:
    """Partition token rows across p ranks: shard i holds rows [i*n/p, (i+1)*n/p)."""
    if x.s % p != 0:
        raise ShardError(f"p={p} does not divide sequence length {x.s}")
    ns = x.s // p
    return [
        ShardedTensor(rank=i, layout=SEQUENCE, data=Tensor3(x.data[i * ns:(i + 1) * ns]))
        for i in range(p)
    ]


def unshard_sequence(shards) -> Tensor3:
    """Rank-order concatenation along the sequence axis (test-side inverse)."""
    shards = list(shards)
    if not shards:
        raise ReconstructionError("no shards to reconstruct from")
    ranks = sorted(s.rank for s in shards)
    if ranks != list(range(len(shards))):
        raise ReconstructionError(f"shard ranks {ranks} are not exactly 0..{len(shards) - 1}")
    if any(s.layout != SEQUENCE for s in shards):
        raise ReconstructionError("all shards must be sequence-sharded")
    by_rank = sorted(shards, key=lambda s: s.rank)
    base = by_rank[0].data.shape
    if any(s.data.shape != base for s in by_rank):
        raise ReconstructionError("shard shapes disagree")
    return Tensor3(np.concatenate([s.data.data for s in by_rank], axis=0))


def seq_to_head(local: ShardedTensor, spec: AttentionSpec, ctx: RankContext,
                label: str = "seq2head") -> ShardedTensor:
    """One all-to-all: (n/P, b, d) sequence shard -> (n, b, h/P, hdim) head shard."""
    spec.check_group(ctx.p)
    x = local.data
    four = x.data.reshape(x.s, x.b, spec.h_heads, spec.hdim)
    out = ctx.all_to_all(four, split_axis=2, concat_axis=0, label=label)
    return ShardedTensor(rank=ctx.rank, layout=HEAD, data=Tensor4(out))


def head_to_seq(local: ShardedTensor, spec: AttentionSpec, ctx: RankContext,
                label: str = "head2seq") -> ShardedTensor:
    """Exact inverse of seq_to_head; also a single all-to-all."""
    spec.check_group(ctx.p)
    x = local.data
    out = ctx.all_to_all(x.data, split_axis=0, concat_axis=2, label=label)
    ns = spec.n // ctx.p
    return ShardedTensor(
        rank=ctx.rank, layout=SEQUENCE,
        data=Tensor3(out.reshape(ns, spec.b, spec.d)),
    )


def ulysses_attention_forward(local_x: ShardedTensor, w: LayerWeights,
                              spec: AttentionSpec, kernel, ctx: RankContext,
                              prefix: str = "attn") -> ShardedTensor:
    out, _ = ulysses_attention_forward_with_state(local_x, w, spec, kernel, ctx, prefix)
    return out


def ulysses_attention_forward_with_state(
    local_x: ShardedTensor, w: LayerWeights, spec: AttentionSpec, kernel,
    ctx: RankContext, prefix: str = "attn",
) -> tuple[ShardedTensor, UlyssesState]:
    spec.check_group(ctx.p)
    xv = local_x.data.data
    q_loc = project(xv, w.wq)
    k_loc = project(xv, w.wk)
    v_loc = project(xv, w.wv)

    q4 = _to_head(q_loc, spec, ctx, f"{prefix}.q.seq2head")
    k4 = _to_head(k_loc, spec, ctx, f"{prefix}.k.seq2head")
    v4 = _to_head(v_loc, spec, ctx, f"{prefix}.v.seq2head")

    ctx4 = np.empty_like(q4)
    for hh in range(q4.shape[2]):
        ctx4[:, :, hh, :] = kernel(
            q4[:, :, hh, :], k4[:, :, hh, :], v4[:, :, hh, :], spec.mask, spec.scale
        )

    c_seq = _to_seq(ctx4, spec, ctx, f"{prefix}.ctx.head2seq")
    out = project(c_seq, w.wo)
    state = UlyssesState(local_x=local_x, q4=q4, k4=k4, v4=v4, c_seq=c_seq, spec=spec)
    shard = ShardedTensor(rank=ctx.rank, layout=SEQUENCE, data=Tensor3(out))
    return shard, state


def _to_head(loc3: np.ndarray, spec: AttentionSpec, ctx: RankContext, label: str) -> np.ndarray:
    ns = loc3.shape[0]
    four = loc3.reshape(ns, spec.b, spec.h_heads, spec.hdim)
    return ctx.all_to_all(four, split_axis=2, concat_axis=0, label=label)


def _to_seq(head4: np.ndarray, spec: AttentionSpec, ctx: RankContext, label: str) -> np.ndarray:
    out = ctx.all_to_all(head4, split_axis=0, concat_axis=2, label=label)
    return out.reshape(spec.n // ctx.p, spec.b, spec.d)


def ulysses_block_forward(local_x: ShardedTensor, w: LayerWeights, spec: AttentionSpec,
                          kernel, ctx: RankContext, prefix: str = "L0") -> ShardedTensor:
    """Transformer block on sequence shards; only attention communicates."""
    xv = local_x.data.data
    t1 = ShardedTensor(
        rank=ctx.rank, layout=SEQUENCE,
        data=Tensor3(layernorm(xv, w.ln1_gain, w.ln1_bias)),
    )
    attn = ulysses_attention_forward(t1, w, spec, kernel, ctx, prefix=f"{prefix}.attn")
    x1 = xv + attn.data.data
    t2 = layernorm(x1, w.ln2_gain, w.ln2_bias)
    out = x1 + mlp(t2, w)
    return ShardedTensor(rank=ctx.rank, layout=SEQUENCE, data=Tensor3(out))


def ulysses_attention_backward(
    grad_out: ShardedTensor, state: UlyssesState, w: LayerWeights,
    spec: AttentionSpec, ctx: RankContext, prefix: str = "bwd",
) -> tuple[ShardedTensor, dict[str, np.ndarray]]:
    """Mirror of the forward: four all-to-alls, exact reverse-mode gradients.

    Weight gradients are returned as this rank's partial products; their
    rank-order sum equals the single-rank gradients. Reducing them across
    ranks belongs to the data-parallel engine, not the attention path, so
    no extra collective appears here.
    """
    if state is None:
        raise ForwardStateError("backward needs the state saved by the forward pass")
    if not isinstance(state, UlyssesState) or state.spec != spec:
        raise ForwardStateError("saved state does not match this spec")
    g = grad_out.data.data
    ns = spec.n // ctx.p
    if g.shape != (ns, spec.b, spec.d) or state.c_seq.shape != g.shape:
        raise ForwardStateError(
            f"grad shape {g.shape} does not match saved forward shape {state.c_seq.shape}"
        )

    g2 = g.reshape(ns * spec.b, spec.d)
    c2 = state.c_seq.reshape(ns * spec.b, spec.d)
    dwo_part = matmul(c2.T, g2)
    dc_seq = matmul(g2, w.wo.T).reshape(ns, spec.b, spec.d)
    dctx4 = _to_head(dc_seq, spec, ctx, f"{prefix}.ctx.seq2head")

    dq4 = np.empty_like(dctx4)
    dk4 = np.empty_like(dctx4)
    dv4 = np.empty_like(dctx4)
    for hh in range(dctx4.shape[2]):
        dq4[:, :, hh, :], dk4[:, :, hh, :], dv4[:, :, hh, :] = masked_attention_backward(
            state.q4[:, :, hh, :], state.k4[:, :, hh, :], state.v4[:, :, hh, :],
            dctx4[:, :, hh, :], spec.mask, spec.scale,
        )

    dq_loc = ctx.all_to_all(dq4, split_axis=0, concat_axis=2, label=f"{prefix}.q.head2seq")
    dk_loc = ctx.all_to_all(dk4, split_axis=0, concat_axis=2, label=f"{prefix}.k.head2seq")
    dv_loc = ctx.all_to_all(dv4, split_axis=0, concat_axis=2, label=f"{prefix}.v.head2seq")
    dq2 = dq_loc.reshape(ns * spec.b, spec.d)
    dk2 = dk_loc.reshape(ns * spec.b, spec.d)
    dv2 = dv_loc.reshape(ns * spec.b, spec.d)

    x2 = state.local_x.data.data.reshape(ns * spec.b, spec.d)
    grad_w = {
        "wq": matmul(x2.T, dq2),
        "wk": matmul(x2.T, dk2),
        "wv": matmul(x2.T, dv2),
        "wo": dwo_part,
    }
    dx2 = matmul(dq2, w.wq.T) + matmul(dk2, w.wk.T) + matmul(dv2, w.wv.T)
    grad_x = ShardedTensor(
        rank=ctx.rank, layout=SEQUENCE,
        data=Tensor3(dx2.reshape(ns, spec.b, spec.d)),
    )
    return grad_x, grad_w


# -- single-call drivers (verification, traces, CLI) -------------------------


def run_ulysses_attention(x: Tensor3, w: LayerWeights, spec: AttentionSpec,
                          kernel_name: str, p: int, mode: str = "lockstep",
                          ledger: CommLedger | None = None) -> tuple[Tensor3, CommLedger]:
    kernel = get_kernel(kernel_name)
    shards = shard_sequence(x, p)
    group = RankGroup(p, mode=mode, ledger=ledger)

    def program(ctx: RankContext) -> ShardedTensor:
        return ulysses_attention_forward(shards[ctx.rank], w, spec, kernel, ctx)

    results = group.run(program)
    return unshard_sequence(results), group.ledger


def run_ulysses_blocks(x: Tensor3, weights: list[LayerWeights], spec: AttentionSpec,
                       kernel_name: str, p: int, mode: str = "lockstep",
                       ledger: CommLedger | None = None) -> tuple[Tensor3, CommLedger]:
    """Stack of transformer blocks, one LayerWeights per layer."""
    kernel = get_kernel(kernel_name)
    shards = shard_sequence(x, p)
    group = RankGroup(p, mode=mode, ledger=ledger)

    def program(ctx: RankContext) -> ShardedTensor:
        cur = shards[ctx.rank]
        for i, w in enumerate(weights):
            cur = ulysses_block_forward(cur, w, spec, kernel, ctx, prefix=f"L{i}")
        return cur

    results = group.run(program)
    return unshard_sequence(results), group.ledger


def run_ulysses_attention_backward(
    x: Tensor3, grad_out: Tensor3, w: LayerWeights, spec: AttentionSpec,
    kernel_name: str, p: int, mode: str = "lockstep",
) -> tuple[Tensor3, Tensor3, dict[str, np.ndarray], CommLedger]:
    """Forward + mirrored backward; returns (out, grad_x, summed grad_w, ledger)."""
    kernel = get_kernel(kernel_name)
    shards = shard_sequence(x, p)
    grad_shards = shard_sequence(grad_out, p)
    group = RankGroup(p, mode=mode)

    def program(ctx: RankContext):
        out, state = ulysses_attention_forward_with_state(
            shards[ctx.rank], w, spec, kernel, ctx
        )
        gx, gw = ulysses_attention_backward(grad_shards[ctx.rank], state, w, spec, ctx)
        return out, gx, gw

    results = group.run(program)
    out = unshard_sequence([r[0] for r in results])
    grad_x = unshard_sequence([r[1] for r in results])
    grad_w: dict[str, np.ndarray] = {}
    for key in ("wq", "wk", "wv", "wo"):
        total = results[0][2][key]
        for r in results[1:]:
            total = total + r[2][key]
        grad_w[key] = total
    return out, grad_x, grad_w, group.ledger
