"""Analytic communication-volume and memory formulas, cross-checked
against the simulator ledger.

Two accounting conventions exist and both are first-class:

* ``exact``            -- per-rank egress element counts, equal to the
                          simulator ledger with zero tolerance;
* ``paper_asymptotic`` -- the per-link convention used in communication
                          analyses (all-to-all of aggregate M costs M/P
                          per link; all-gather/reduce-scatter of M cost M).

Per layer, with n tokens, batch b, hidden h, parallel degree p:

====================  ======================  ==================
scheme                exact                   paper_asymptotic
====================  ======================  ==================
ulysses (4 a2a)       4*n*b*h*(p-1)/p^2       4*n*b*h/p
megatron (2 AG+2 RS)  4*n*b*h*(p-1)/p         4*n*b*h
ring (2(p-1) shifts)  2*n*b*h*(p-1)/p         2*n*b*h
====================  ======================  ==================

Volumes are element counts (exact rationals); multiply by an element
size to get bytes. The memory model estimates per-rank bytes for model
states under optimizer-state partitioning stages 0-3 and for activations
under sequence parallelism.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

SCHEMES = ("ulysses", "megatron", "ring")
CONVENTIONS = ("exact", "paper_asymptotic")

# bytes per parameter: fp16 params, fp16 grads, fp32 optimizer states
# (momentum + variance + master copy); standard mixed-precision layout.
PARAM_BYTES = 2
GRAD_BYTES = 2
OPTIMIZER_BYTES = 12

# bytes of activation per token per hidden unit per layer; a documented
# model constant, not a measured value (see README).
DEFAULT_ACTIVATION_BYTES = 16.0

COST_CSV_COLUMNS = [
    "scheme",
    "n",
    "b",
    "h",
    "p",
    "layers",
    "convention",
    "per_link_elements",
    "total_elements",
    "ratio_vs_ulysses",
]


@dataclass(frozen=True)
class CostInputs:
    """Shape of one communication-cost query."""

    n: int
    b: int
    h: int
    p: int
    layers: int = 1
    convention: str = "paper_asymptotic"

    def __post_init__(self):
        if min(self.n, self.b, self.h, self.p, self.layers) < 1:
            raise ValueError("all CostInputs values must be positive")
        if self.n % self.p != 0:
            raise ValueError(f"p={self.p} does not divide n={self.n}")
        if self.convention not in CONVENTIONS:
            raise ValueError(
                f"unknown convention {self.convention!r}, expected one of {CONVENTIONS}"
            )


def ulysses_volume(c: CostInputs) -> Fraction:
    """Per-link all-to-all volume for one layer of the all-to-all scheme."""
    m = Fraction(4 * c.n * c.b * c.h)
    if c.convention == "paper_asymptotic":
        return m / c.p
    return m * (c.p - 1) / (c.p * c.p)


def megatron_volume(c: CostInputs) -> Fraction:
    """Per-link volume for one allgather/reduce-scatter layer."""
    m = Fraction(4 * c.n * c.b * c.h)
    if c.convention == "paper_asymptotic":
        return m
    return m * (c.p - 1) / c.p


def ring_volume(c: CostInputs) -> Fraction:
    """Per-link volume for one ring-attention layer (K and V rings)."""
    m = Fraction(2 * c.n * c.b * c.h)
    if c.convention == "paper_asymptotic":
        return m
    return m * (c.p - 1) / c.p


_VOLUME_FNS = {
    "ulysses": ulysses_volume,
    "megatron": megatron_volume,
    "ring": ring_volume,
}


def scheme_volume(scheme: str, c: CostInputs) -> Fraction:
    try:
        return _VOLUME_FNS[scheme](c)
    except KeyError:
        raise ValueError(f"unknown scheme {scheme!r}, expected one of {SCHEMES}") from None


@dataclass(frozen=True)
class CostReport:
    """Per-link and total volumes for every scheme at one configuration."""

    inputs: CostInputs
    per_link: dict = field(default_factory=dict)
    total: dict = field(default_factory=dict)
    ratio_vs_ulysses: dict = field(default_factory=dict)

    def rows(self) -> list[list]:
        c = self.inputs
        out = []
        for scheme in SCHEMES:
            out.append([
                scheme, c.n, c.b, c.h, c.p, c.layers, c.convention,
                format_elements(self.per_link[scheme]),
                format_elements(self.total[scheme]),
                format_elements(self.ratio_vs_ulysses[scheme]),
            ])
        return out

    def to_json_obj(self) -> dict:
        c = self.inputs
        return {
            "n": c.n, "b": c.b, "h": c.h, "p": c.p,
            "layers": c.layers, "convention": c.convention,
            "per_link_elements": {s: format_elements(self.per_link[s]) for s in SCHEMES},
            "total_elements": {s: format_elements(self.total[s]) for s in SCHEMES},
            "ratio_vs_ulysses": {s: format_elements(self.ratio_vs_ulysses[s]) for s in SCHEMES},
        }


def build_cost_report(c: CostInputs) -> CostReport:
    per_link = {s: scheme_volume(s, c) for s in SCHEMES}
    total = {s: v * c.layers for s, v in per_link.items()}
    base = per_link["ulysses"]
    # p=1 exact has zero egress everywhere; the ratio degenerates to 1
    ratios = {s: (per_link[s] / base if base else Fraction(1)) for s in SCHEMES}
    return CostReport(inputs=c, per_link=per_link, total=total, ratio_vs_ulysses=ratios)


def format_elements(v: Fraction):
    """Exact int when integral, float otherwise (for tables and CSV/JSON)."""
    if isinstance(v, Fraction) and v.denominator == 1:
        return int(v)
    if isinstance(v, Fraction):
        return float(v)
    return v


# -- memory model -------------------------------------------------------------


@dataclass(frozen=True)
class MemoryInputs:
    """Per-rank model-state memory query under state partitioning."""

    psi: float                      # parameter count
    p_data: int = 1
    p_seq: int = 1
    zero_stage: int = 0
    param_bytes: float = PARAM_BYTES
    grad_bytes: float = GRAD_BYTES
    optimizer_bytes: float = OPTIMIZER_BYTES

    def __post_init__(self):
        if self.psi <= 0:
            raise ValueError("psi must be positive")
        if self.p_data < 1 or self.p_seq < 1:
            raise ValueError("parallel degrees must be >= 1")
        if self.zero_stage not in (0, 1, 2, 3):
            raise ValueError(f"zero_stage must be 0..3, got {self.zero_stage}")


def zero_memory_per_rank(m: MemoryInputs) -> float:
    """Per-rank model-state bytes; stages partition over p_data * p_seq.

    stage 0: everything replicated           (params + grads + optim)
    stage 1: optimizer states partitioned
    stage 2: optimizer states + grads partitioned
    stage 3: everything partitioned
    """
    group = m.p_data * m.p_seq
    params = m.psi * m.param_bytes
    grads = m.psi * m.grad_bytes
    optim = m.psi * m.optimizer_bytes
    if m.zero_stage == 0:
        return params + grads + optim
    if m.zero_stage == 1:
        return params + grads + optim / group
    if m.zero_stage == 2:
        return params + (grads + optim) / group
    return (params + grads + optim) / group


def activation_memory_per_rank(n: int, b: int, h: int, layers: int, p_seq: int,
                               c_act: float = DEFAULT_ACTIVATION_BYTES) -> float:
    """Per-rank activation bytes: c_act * n * b * h * layers / p_seq."""
    if min(n, b, h, layers, p_seq) < 1:
        raise ValueError("all activation-memory arguments must be positive")
    return c_act * n * b * h * layers / p_seq


@dataclass(frozen=True)
class MemoryReport:
    inputs: MemoryInputs
    model_state_bytes: float
    activation_bytes: float | None = None

    @property
    def total_bytes(self) -> float:
        return self.model_state_bytes + (self.activation_bytes or 0.0)


def worked_memory_example() -> dict:
    """The documented fits/does-not-fit configuration (see README).

    A 1.2e9-parameter decoder at 1,048,576 tokens on 256 ranks with an
    80 GB per-rank budget: replicated states with unsharded activations
    overflow by an order of magnitude, while stage-3 partitioning over
    (p_data=4, p_seq=64) plus sequence-sharded activations fit easily.
    """
    psi = 1.2e9
    n, b, h, layers = 1_048_576, 1, 2048, 24
    p_data, p_seq = 4, 64
    budget = 80e9
    replicated = zero_memory_per_rank(MemoryInputs(psi=psi, zero_stage=0))
    replicated_act = activation_memory_per_rank(n, b, h, layers, p_seq=1)
    partitioned = zero_memory_per_rank(
        MemoryInputs(psi=psi, p_data=p_data, p_seq=p_seq, zero_stage=3)
    )
    partitioned_act = activation_memory_per_rank(n, b, h, layers, p_seq=p_seq)
    return {
        "psi": psi,
        "n": n,
        "b": b,
        "h": h,
        "layers": layers,
        "p_data": p_data,
        "p_seq": p_seq,
        "budget_bytes": budget,
        "replicated_total_bytes": replicated + replicated_act,
        "partitioned_total_bytes": partitioned + partitioned_act,
        "fits_replicated": bool(replicated + replicated_act <= budget),
        "fits_partitioned": bool(partitioned + partitioned_act <= budget),
    }
