"""Deterministic simulated process group with metered collectives.

A ``RankGroup`` runs one program per rank (plain Python callables on
threads) and provides the four collectives the attention schemes need:
all-to-all, all-gather, reduce-scatter, and ring shift. Collectives are
the only synchronization points; each acts as a full barrier, and every
completed collective appends exactly one ``CommRecord`` to the shared
``CommLedger`` with its exact per-rank egress element count.

Two scheduling modes exist and must be observationally identical:

* ``lockstep``    -- at most one rank executes between collectives
                     (deterministic sequential schedule);
* ``concurrent``  -- all rank threads run freely.

Results and ledger are bitwise reproducible in both modes because rank
programs only interact through collectives, whose exchange and metering
are pure functions of the deposited operands. Ledger order is the order
collectives complete, which is total (a collective needs all ranks).

Desync is a hard error, never a hang: a rank that exits early, or enters
a collective with arguments inconsistent with its peers, poisons the
group and every rank raises ``GroupDesyncError`` naming the offender.

Egress accounting per collective (``local`` = per-rank operand elements,
``chunk`` = ``local / p``):

==============  =========================  =======================
collective      aggregate_elements         per_rank_egress_elements
==============  =========================  =======================
all_to_all      p * local                  chunk * (p - 1)
all_gather      p * local                  local * (p - 1)
reduce_scatter  local  (= p * out chunk)   chunk * (p - 1)
ring_shift      p * local                  local * steps
==============  =========================  =======================

A ``barrier()`` is a degenerate zero-step ring shift of one element, so
it synchronizes, appends one record, and transmits nothing.
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass
from functools import reduce

import numpy as np

from .ioutil import csv_text, json_text, write_text

COLLECTIVES = ("all_to_all", "all_gather", "reduce_scatter", "ring_shift")

LEDGER_CSV_COLUMNS = [
    "step_label",
    "collective",
    "aggregate_elements",
    "per_rank_egress_elements",
]


class ShardError(ValueError):
    """An axis cannot be split evenly across the group."""


class GroupDesyncError(RuntimeError):
    """Ranks diverged: early exit or inconsistent collective arguments."""


@dataclass(frozen=True)
class CommRecord:
    """One completed collective: exact volumes, identical on every rank."""

    collective: str
    step_label: str
    aggregate_elements: int
    per_rank_egress_elements: int

    def __post_init__(self):
        if self.collective not in COLLECTIVES:
            raise ValueError(f"unknown collective {self.collective!r}")
        if self.aggregate_elements <= 0:
            raise ValueError("aggregate_elements must be positive")
        if self.per_rank_egress_elements < 0:
            raise ValueError("per_rank_egress_elements must be non-negative")


class CommLedger:
    """Append-only record of every collective the group executed."""

    def __init__(self):
        self._records: list[CommRecord] = []
        self._lock = threading.Lock()

    def _append(self, record: CommRecord):
        with self._lock:
            self._records.append(record)

    @property
    def records(self) -> tuple[CommRecord, ...]:
        with self._lock:
            return tuple(self._records)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def count(self, collective: str | None = None, step_label: str | None = None) -> int:
        return len(self.select(collective, step_label))

    def select(
        self, collective: str | None = None, step_label: str | None = None
    ) -> tuple[CommRecord, ...]:
        return tuple(
            r
            for r in self.records
            if (collective is None or r.collective == collective)
            and (step_label is None or r.step_label == step_label)
        )

    def total_egress(
        self, collective: str | None = None, step_label: str | None = None
    ) -> int:
        return sum(r.per_rank_egress_elements for r in self.select(collective, step_label))

    def total_aggregate(
        self, collective: str | None = None, step_label: str | None = None
    ) -> int:
        return sum(r.aggregate_elements for r in self.select(collective, step_label))

    def egress_by_collective(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for r in self.records:
            out[r.collective] = out.get(r.collective, 0) + r.per_rank_egress_elements
        return out

    def counts_by_collective(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for r in self.records:
            out[r.collective] = out.get(r.collective, 0) + 1
        return out

    def rows(self) -> list[list]:
        return [
            [r.step_label, r.collective, r.aggregate_elements, r.per_rank_egress_elements]
            for r in self.records
        ]

    def to_json_obj(self) -> list[dict]:
        return [
            {
                "step_label": r.step_label,
                "collective": r.collective,
                "aggregate_elements": r.aggregate_elements,
                "per_rank_egress_elements": r.per_rank_egress_elements,
            }
            for r in self.records
        ]

    def to_json_text(self) -> str:
        return json_text(self.to_json_obj())

    def to_csv_text(self) -> str:
        return csv_text(LEDGER_CSV_COLUMNS, self.rows())

    def write_json(self, path: str) -> str:
        return write_text(path, self.to_json_text())

    def write_csv(self, path: str) -> str:
        return write_text(path, self.to_csv_text())


class _Scheduler:
    """Run permit for lockstep mode; a no-op when concurrency is allowed."""

    def __init__(self, serialize: bool):
        self._sem = threading.Semaphore(1) if serialize else None

    def acquire(self):
        if self._sem is not None:
            self._sem.acquire()

    def release(self):
        if self._sem is not None:
            self._sem.release()


@dataclass
class _Entry:
    kind: str
    label: str
    signature: tuple
    payload: object


class RankGroup:
    """A simulated group of ``p`` ranks sharing one ledger.

    Use :func:`run_group` for the common case; instantiate directly to
    reuse a ledger across several runs (e.g. multi-layer traces).
    """

    MODES = ("lockstep", "concurrent")

    def __init__(self, p: int, mode: str = "lockstep", ledger: CommLedger | None = None,
                 timeout: float = 60.0):
        if p < 1:
            raise ValueError(f"group size must be >= 1, got {p}")
        mode = {"lockstep-sequential": "lockstep"}.get(mode, mode)
        if mode not in self.MODES:
            raise ValueError(f"unknown mode {mode!r}, expected one of {self.MODES}")
        self.p = p
        self.mode = mode
        self.ledger = ledger if ledger is not None else CommLedger()
        self._timeout = timeout
        self._cv = threading.Condition()
        self._pending: dict[int, _Entry] = {}
        self._generation = 0
        self._results: list = [None] * p
        self._poison: str | None = None
        self._done: set[int] = set()
        self._ran = False

    # -- rendezvous ------------------------------------------------------

    def _poison_locked(self, message: str):
        if self._poison is None:
            self._poison = message
        self._cv.notify_all()

    def _check_exit_desync_locked(self):
        if self._poison is not None or not self._pending:
            return
        if len(self._pending) + len(self._done) == self.p and len(self._pending) < self.p:
            waiter = min(self._pending)
            entry = self._pending[waiter]
            quitter = min(self._done - set(self._pending))
            self._poison_locked(
                f"group desync: rank {quitter} exited before collective "
                f"{entry.kind!r} (step {entry.label!r}) entered by rank {waiter}"
            )

    def _mark_done(self, rank: int):
        with self._cv:
            self._done.add(rank)
            self._check_exit_desync_locked()
            self._cv.notify_all()

    def _exchange(self, scheduler: _Scheduler, rank: int, kind: str, label: str,
                  signature: tuple, payload, combine, metering):
        """Deposit, rendezvous, and return this rank's share of the exchange.

        ``combine`` maps the rank-ordered payload list to per-rank outputs;
        ``metering`` returns (aggregate_elements, per_rank_egress_elements).
        Both run once, on the last-arriving rank, under the group lock.
        """
        deadline = time.monotonic() + self._timeout
        with self._cv:
            if self._poison is not None:
                raise GroupDesyncError(self._poison)
            gen = self._generation
            self._pending[rank] = _Entry(kind, label, signature, payload)
            if len(self._pending) == self.p:
                ref = self._pending[min(self._pending)]
                for r in sorted(self._pending):
                    e = self._pending[r]
                    if (e.kind, e.label, e.signature) != (ref.kind, ref.label, ref.signature):
                        self._poison_locked(
                            f"group desync: rank {r} entered collective {e.kind!r} "
                            f"(step {e.label!r}, signature {e.signature}) while rank "
                            f"{min(self._pending)} entered {ref.kind!r} "
                            f"(step {ref.label!r}, signature {ref.signature})"
                        )
                        raise GroupDesyncError(self._poison)
                payloads = [self._pending[r].payload for r in range(self.p)]
                self._results = combine(payloads)
                aggregate, egress = metering(payloads)
                self.ledger._append(CommRecord(kind, label, aggregate, egress))
                self._pending.clear()
                self._generation += 1
                self._cv.notify_all()
                return self._results[rank]
            # about to block: hand the run permit to the other ranks
            scheduler.release()
            poisoned = None
            while self._generation == gen and self._poison is None:
                self._check_exit_desync_locked()
                if self._poison is not None:
                    break
                if time.monotonic() > deadline:
                    self._poison_locked(
                        f"group desync: timeout in collective {kind!r} (step {label!r}) "
                        f"waiting on ranks {sorted(set(range(self.p)) - set(self._pending))}"
                    )
                    break
                self._cv.wait(timeout=0.5)
            poisoned = self._poison
            result = None if poisoned is not None else self._results[rank]
        scheduler.acquire()
        if poisoned is not None:
            raise GroupDesyncError(poisoned)
        return result

    # -- collectives (invoked through RankContext) ------------------------

    @staticmethod
    def _array(x) -> np.ndarray:
        arr = np.asarray(x, dtype=np.float64)
        return arr

    def _all_to_all(self, scheduler, rank, local, split_axis, concat_axis, label):
        local = self._array(local)
        if local.shape[split_axis] % self.p != 0:
            raise ShardError(
                f"all_to_all split axis {split_axis} (length {local.shape[split_axis]}) "
                f"not divisible by p={self.p}"
            )
        sig = (local.shape, int(split_axis), int(concat_axis))

        def combine(payloads):
            chunks = [np.split(a, self.p, axis=split_axis) for a in payloads]
            return [
                np.concatenate([chunks[j][i] for j in range(self.p)], axis=concat_axis)
                for i in range(self.p)
            ]

        def metering(payloads):
            local_n = payloads[0].size
            chunk = local_n // self.p
            return self.p * local_n, chunk * (self.p - 1)

        return self._exchange(scheduler, rank, "all_to_all", label, sig, local,
                              combine, metering)

    def _all_gather(self, scheduler, rank, local, axis, label):
        local = self._array(local)
        sig = (local.shape, int(axis))

        def combine(payloads):
            gathered = np.concatenate(payloads, axis=axis)
            return [gathered] * self.p

        def metering(payloads):
            local_n = payloads[0].size
            return self.p * local_n, local_n * (self.p - 1)

        return self._exchange(scheduler, rank, "all_gather", label, sig, local,
                              combine, metering)

    def _reduce_scatter(self, scheduler, rank, local, axis, label):
        local = self._array(local)
        if local.shape[axis] % self.p != 0:
            raise ShardError(
                f"reduce_scatter axis {axis} (length {local.shape[axis]}) "
                f"not divisible by p={self.p}"
            )
        sig = (local.shape, int(axis))

        def combine(payloads):
            # rank-ordered summation keeps the reduction bit-reproducible
            total = reduce(np.add, payloads)
            return list(np.split(total, self.p, axis=axis))

        def metering(payloads):
            local_n = payloads[0].size
            chunk = local_n // self.p
            return local_n, chunk * (self.p - 1)

        return self._exchange(scheduler, rank, "reduce_scatter", label, sig, local,
                              combine, metering)

    def _ring_shift(self, scheduler, rank, local, steps, label):
        local = self._array(local)
        if steps < 0:
            raise ValueError(f"ring_shift steps must be >= 0, got {steps}")
        sig = (local.shape, int(steps))

        def combine(payloads):
            return [payloads[(i - steps) % self.p] for i in range(self.p)]

        def metering(payloads):
            local_n = payloads[0].size
            return self.p * local_n, local_n * steps

        return self._exchange(scheduler, rank, "ring_shift", label, sig, local,
                              combine, metering)

    # -- execution ---------------------------------------------------------

    def run(self, program) -> list:
        """Run ``program`` (one callable, or one per rank) to completion.

        Returns the per-rank results in rank order. Any rank exception is
        re-raised here; original errors take precedence over the derived
        desync errors seen by the other ranks.
        """
        if self._ran:
            raise ValueError("RankGroup.run is single-use; pass ledger= to a new group instead")
        self._ran = True
        programs = self._per_rank_programs(program)
        scheduler = _Scheduler(serialize=self.mode == "lockstep")
        results: list = [None] * self.p
        errors: list = [None] * self.p

        def worker(rank: int):
            ctx = RankContext(self, scheduler, rank)
            scheduler.acquire()
            try:
                results[rank] = programs[rank](ctx)
            except BaseException as exc:  # surfaced after join
                errors[rank] = exc
            finally:
                scheduler.release()
                self._mark_done(rank)

        threads = [
            threading.Thread(target=worker, args=(r,), name=f"rank-{r}", daemon=True)
            for r in range(self.p)
        ]
        for t in threads:
            t.start()
        for t in threads:
            t.join()

        for err in errors:
            if err is not None and not isinstance(err, GroupDesyncError):
                raise err
        for err in errors:
            if err is not None:
                raise err
        return results

    def _per_rank_programs(self, program) -> list:
        if callable(program):
            return [program] * self.p
        programs = list(program)
        if len(programs) != self.p:
            raise ValueError(f"need {self.p} rank programs, got {len(programs)}")
        return programs


class RankContext:
    """Handle passed to each rank program: identity plus the collectives."""

    def __init__(self, group: RankGroup, scheduler: _Scheduler, rank: int):
        self._group = group
        self._scheduler = scheduler
        self.rank = rank
        self.p = group.p

    def all_to_all(self, local, split_axis: int, concat_axis: int,
                   label: str = "all_to_all") -> np.ndarray:
        return self._group._all_to_all(self._scheduler, self.rank, local,
                                       split_axis, concat_axis, label)

    def all_gather(self, local, axis: int, label: str = "all_gather") -> np.ndarray:
        return self._group._all_gather(self._scheduler, self.rank, local, axis, label)

    def reduce_scatter(self, local, axis: int, label: str = "reduce_scatter") -> np.ndarray:
        return self._group._reduce_scatter(self._scheduler, self.rank, local, axis, label)

    def ring_shift(self, local, steps: int = 1, label: str = "ring_shift") -> np.ndarray:
        return self._group._ring_shift(self._scheduler, self.rank, local, steps, label)

    def barrier(self, label: str = "barrier"):
        self._group._ring_shift(self._scheduler, self.rank, np.zeros(1), 0, label)


def run_group(p: int, program, mode: str = "lockstep",
              ledger: CommLedger | None = None) -> tuple[list, CommLedger]:
    """Run one program per rank on a fresh group; return (results, ledger)."""
    group = RankGroup(p, mode=mode, ledger=ledger)
    results = group.run(program)
    return results, group.ledger
