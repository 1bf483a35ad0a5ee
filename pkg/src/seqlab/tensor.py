"""Dense float64 array core shared by every attention scheme.

Activations are ``Tensor3`` arrays of shape (sequence, batch, hidden) and
``Tensor4`` per-head views of shape (sequence, batch, heads, head_dim).
All values are immutable after construction; the operations here are pure
functions, so tensors can be handed freely between concurrently running
simulated ranks.

``matmul`` deliberately does NOT call into BLAS: it accumulates over the
inner index in a fixed left-to-right order so that results are
bit-reproducible and row/column sub-blocks of a product are bitwise equal
to the same rows/columns of the full product. The cross-scheme equivalence
tests lean on that property.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class DivisibilityError(ValueError):
    """A dimension is not divisible by the requested partition count."""


class DegenerateRowError(ValueError):
    """A softmax row has no unmasked entries (invalid sparse pattern)."""


def _as_readonly_f64(data) -> np.ndarray:
    arr = np.ascontiguousarray(data, dtype=np.float64)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class Tensor3:
    """Activation tensor of shape (sequence, batch, hidden), row-major float64."""

    data: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "data", _as_readonly_f64(self.data))
        if self.data.ndim != 3:
            raise ShapeError(f"Tensor3 needs 3 dims, got shape {self.data.shape}")
        if min(self.data.shape) < 1:
            raise ShapeError(f"Tensor3 dims must all be >= 1, got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("Tensor3 holds non-finite elements")

    @property
    def s(self) -> int:
        return self.data.shape[0]

    @property
    def b(self) -> int:
        return self.data.shape[1]

    @property
    def d(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass(frozen=True)
class Tensor4:
    """Per-head activation view of shape (sequence, batch, heads, head_dim)."""

    data: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "data", _as_readonly_f64(self.data))
        if self.data.ndim != 4:
            raise ShapeError(f"Tensor4 needs 4 dims, got shape {self.data.shape}")
        if min(self.data.shape) < 1:
            raise ShapeError(f"Tensor4 dims must all be >= 1, got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("Tensor4 holds non-finite elements")

    @property
    def s(self) -> int:
        return self.data.shape[0]

    @property
    def b(self) -> int:
        return self.data.shape[1]

    @property
    def hcount(self) -> int:
        return self.data.shape[2]

    @property
    def hdim(self) -> int:
        return self.data.shape[3]

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape


@dataclass(frozen=True)
class Mask:
    """Attention visibility mask: none, causal, or blocked-sparse.

    Blocked masks admit key block ``kb`` for query block ``qb`` iff
    ``(qb, kb)`` is in ``pattern``; ``block_size`` must divide both the
    query and key lengths wherever the mask is applied.
    """

    kind: str
    block_size: int | None = None
    pattern: frozenset = field(default=None)

    _KINDS = ("none", "causal", "blocked")

    def __post_init__(self):
        if self.kind not in self._KINDS:
            raise ValueError(f"unknown mask kind {self.kind!r}, expected one of {self._KINDS}")
        if self.kind == "blocked":
            if self.block_size is None or self.block_size < 1:
                raise ValueError("blocked mask needs block_size >= 1")
            pat = frozenset((int(q), int(k)) for q, k in self.pattern)
            if not pat:
                raise ValueError("blocked mask needs a non-empty pattern")
            if any(q < 0 or k < 0 for q, k in pat):
                raise ValueError("blocked pattern indices must be non-negative")
            object.__setattr__(self, "pattern", pat)
        elif self.block_size is not None or self.pattern is not None:
            raise ValueError(f"mask kind {self.kind!r} takes no block_size/pattern")

    @staticmethod
    def none() -> "Mask":
        return Mask("none")

    @staticmethod
    def causal() -> "Mask":
        return Mask("causal")

    @staticmethod
    def blocked(block_size: int, pattern) -> "Mask":
        return Mask("blocked", block_size=block_size, pattern=frozenset(pattern))

    def visibility(self, rows: int, cols: int, row_offset: int = 0) -> np.ndarray:
        """Boolean (rows, cols) array: True where a key is visible to a query.

        ``row_offset`` is the global index of local row 0, so causal and
        blocked masks stay correct on sequence-sharded score chunks.
        """
        if self.kind == "none":
            return np.ones((rows, cols), dtype=bool)
        qidx = np.arange(row_offset, row_offset + rows)
        kidx = np.arange(cols)
        if self.kind == "causal":
            return kidx[None, :] <= qidx[:, None]
        bs = self.block_size
        if cols % bs != 0:
            raise DivisibilityError(f"block_size {bs} does not divide key length {cols}")
        if rows % bs != 0 or row_offset % bs != 0:
            # query chunks must align with block boundaries
            raise DivisibilityError(
                f"block_size {bs} does not align with {rows} rows at offset {row_offset}"
            )
        nkb = cols // bs
        bad = sorted(kb for _, kb in self.pattern if kb >= nkb)
        if bad:
            raise ValueError(f"pattern key blocks {bad[:4]} out of range for {nkb} key blocks")
        qblk = qidx // bs
        kblk = kidx // bs
        vis = np.zeros((rows, cols), dtype=bool)
        for qb, kb in self.pattern:
            vis |= (qblk[:, None] == qb) & (kblk[None, :] == kb)
        return vis


def causal_block_pattern(n: int, block_size: int) -> frozenset:
    """Block-causal pattern over an n-token sequence: (qb, kb) for all kb <= qb."""
    if n % block_size != 0:
        raise DivisibilityError(f"block_size {block_size} does not divide n={n}")
    nb = n // block_size
    return frozenset((q, k) for q in range(nb) for k in range(q + 1))


def full_block_pattern(n: int, block_size: int) -> frozenset:
    """Dense pattern: every (qb, kb) pair, useful for equivalence checks."""
    if n % block_size != 0:
        raise DivisibilityError(f"block_size {block_size} does not divide n={n}")
    nb = n // block_size
    return frozenset((q, k) for q in range(nb) for k in range(nb))


def banded_block_pattern(n: int, block_size: int, bandwidth: int = 1) -> frozenset:
    """Causal local-window pattern: kb in [qb - bandwidth, qb]."""
    if n % block_size != 0:
        raise DivisibilityError(f"block_size {block_size} does not divide n={n}")
    nb = n // block_size
    return frozenset(
        (q, k) for q in range(nb) for k in range(max(0, q - bandwidth), q + 1)
    )


def matmul(a: np.ndarray, bm: np.ndarray) -> np.ndarray:
    """Matrix product with a fixed left-to-right summation over the inner index.

    Bitwise identical to the naive triple loop ``acc = 0; acc += a[i,k]*b[k,j]``
    for k = 0..K-1, and therefore stable under row/column partitioning.
    """
    a = np.asarray(a, dtype=np.float64)
    bm = np.asarray(bm, dtype=np.float64)
    if a.ndim != 2 or bm.ndim != 2:
        raise ShapeError(f"matmul needs 2D operands, got {a.shape} x {bm.shape}")
    if a.shape[1] != bm.shape[0]:
        raise ShapeError(f"matmul inner dims disagree: {a.shape} x {bm.shape}")
    out = np.zeros((a.shape[0], bm.shape[1]), dtype=np.float64)
    for k in range(a.shape[1]):
        out += a[:, k, None] * bm[None, k, :]
    return out


def row_softmax(scores: np.ndarray, mask: Mask, row_offset: int = 0) -> np.ndarray:
    """Numerically stabilized softmax over the unmasked entries of each row.

    Masked entries are excluded before exponentiation and come out exactly 0.
    Raises DegenerateRowError for any row with no visible entries.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2:
        raise ShapeError(f"row_softmax needs a 2D score block, got {scores.shape}")
    if not np.all(np.isfinite(scores)):
        raise ValueError("row_softmax scores must be finite")
    vis = mask.visibility(scores.shape[0], scores.shape[1], row_offset)
    counts = vis.sum(axis=1)
    if np.any(counts == 0):
        row = int(np.argmax(counts == 0))
        raise DegenerateRowError(
            f"row {row_offset + row} has zero unmasked entries (mask kind {mask.kind!r})"
        )
    neg_inf = np.float64(-np.inf)
    shifted = np.where(vis, scores, neg_inf)
    rowmax = shifted.max(axis=1, keepdims=True)
    expd = np.where(vis, np.exp(np.where(vis, scores - rowmax, 0.0)), 0.0)
    return expd / expd.sum(axis=1, keepdims=True)


def split_heads(x: Tensor3, hcount: int) -> Tensor4:
    """Reshape (s, b, d) into the head-major view (s, b, hcount, d // hcount)."""
    if hcount < 1 or x.d % hcount != 0:
        raise DivisibilityError(f"head count {hcount} does not divide hidden size {x.d}")
    hdim = x.d // hcount
    return Tensor4(x.data.reshape(x.s, x.b, hcount, hdim))


def merge_heads(x: Tensor4) -> Tensor3:
    """Inverse of split_heads: (s, b, hcount, hdim) -> (s, b, hcount * hdim)."""
    return Tensor3(x.data.reshape(x.s, x.b, x.hcount * x.hdim))
