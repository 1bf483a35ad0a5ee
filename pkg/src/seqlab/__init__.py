"""seqlab: a deterministic multi-rank laboratory for sequence-parallel attention.

Three sharding schemes (all-to-all head parallelism, allgather/reduce-
scatter, ring attention) run on a simulated process group, are verified
against a single-rank oracle, and have their exact communication volumes
metered and cross-checked against analytic cost formulas.
"""

from .baselines import megatron_sp_block_forward, ring_attention_forward
from .costmodel import (
    CostInputs,
    CostReport,
    MemoryInputs,
    MemoryReport,
    activation_memory_per_rank,
    build_cost_report,
    megatron_volume,
    ring_volume,
    ulysses_volume,
    zero_memory_per_rank,
)
from .kernels import KernelError, blocked_kernel, causal_kernel, dense_kernel, get_kernel
from .layers import AttentionSpec, LayerWeights, make_input, make_weights
from .oracle import (
    compare,
    reference_attention,
    reference_attention_backward,
    reference_block,
)
from .simgroup import (
    CommLedger,
    CommRecord,
    GroupDesyncError,
    RankContext,
    RankGroup,
    ShardError,
    run_group,
)
from .tensor import (
    DegenerateRowError,
    DivisibilityError,
    Mask,
    ShapeError,
    Tensor3,
    Tensor4,
    matmul,
    merge_heads,
    row_softmax,
    split_heads,
)
from .ulysses import (
    ForwardStateError,
    ReconstructionError,
    ShardedTensor,
    head_to_seq,
    seq_to_head,
    shard_sequence,
    ulysses_attention_backward,
    ulysses_attention_forward,
    ulysses_block_forward,
    unshard_sequence,
)

__version__ = "0.1.0"
