"""Shared numeric types: normalized embedding sets, budgets and ladders."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    LastGroupMismatch,
    NonFinite,
    NotIncreasing,
    OutOfRange,
    UsageError,
    ZeroRow,
)

WORK_DTYPE = np.float32
NORM_TOL = 1e-5
ZERO_NORM = 1e-12


class Side(enum.Enum):
    QUERY = "query"
    CANDIDATE = "candidate"


def l2_normalize_rows(m, dtype=WORK_DTYPE) -> np.ndarray:
    """Divide every row of ``m`` by its Euclidean norm.

    Raises NonFinite on NaN/Inf entries and ZeroRow when a row norm is
    below 1e-12. The result is computed in ``dtype`` (float32 unless the
    caller asks for the 64-bit path used by gradient checks).
    """
    m = np.asarray(m, dtype=dtype)
    if m.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NonFinite("matrix contains NaN or Inf")
    norms = np.sqrt(np.einsum("ij,ij->i", m, m))
    if np.any(norms < ZERO_NORM):
        bad = int(np.argmax(norms < ZERO_NORM))
        raise ZeroRow(f"row {bad} has zero norm")
    return m / norms[:, None]


@dataclass(frozen=True, eq=False)
class MetaEmbeddingSet:
    """R x D matrix of unit rows for one query or candidate.

    The constructor validates but never normalizes; use :meth:`from_raw`
    for unnormalized input.
    """

    vectors: np.ndarray
    side: Side = Side.QUERY

    def __post_init__(self):
        v = np.array(self.vectors, dtype=WORK_DTYPE, copy=True)
        if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] < 1:
            raise ValueError(f"vectors must be R x D with R, D >= 1, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise NonFinite("embedding set contains NaN or Inf")
        norms = np.linalg.norm(v.astype(np.float64), axis=1)
        if np.any(np.abs(norms - 1.0) > NORM_TOL):
            raise ValueError("rows are not unit-norm; use MetaEmbeddingSet.from_raw")
        v.setflags(write=False)
        object.__setattr__(self, "vectors", v)

    @classmethod
    def from_raw(cls, m, side: Side = Side.QUERY) -> "MetaEmbeddingSet":
        return cls(l2_normalize_rows(m), side)

    @property
    def R(self) -> int:
        return self.vectors.shape[0]

    @property
    def D(self) -> int:
        return self.vectors.shape[1]

    def __len__(self):
        return self.R

    def __eq__(self, other):
        if not isinstance(other, MetaEmbeddingSet):
            return NotImplemented
        return self.side == other.side and np.array_equal(self.vectors, other.vectors)

    __hash__ = None


def prefix(s: MetaEmbeddingSet, r: int) -> MetaEmbeddingSet:
    """First ``r`` rows of ``s``, bit-identical."""
    if not 1 <= r <= s.R:
        raise OutOfRange(f"prefix length {r} outside [1, {s.R}]")
    if r == s.R:
        return s
    out = object.__new__(MetaEmbeddingSet)
    object.__setattr__(out, "vectors", s.vectors[:r])
    object.__setattr__(out, "side", s.side)
    return out


@dataclass(frozen=True, order=True)
class Budget:
    r_q: int
    r_c: int

    def __post_init__(self):
        for name in ("r_q", "r_c"):
            v = getattr(self, name)
            if isinstance(v, bool) or int(v) != v or v < 1:
                raise OutOfRange(f"{name} must be a positive integer, got {v!r}")
            object.__setattr__(self, name, int(v))

    def __str__(self):
        return f"{self.r_q}:{self.r_c}"

    def within(self, other: "Budget") -> bool:
        return self.r_q <= other.r_q and self.r_c <= other.r_c

    @classmethod
    def parse(cls, text: str) -> "Budget":
        """Parse ``"rq:rc"``."""
        parts = text.strip().split(":")
        if len(parts) != 2:
            raise UsageError(f"budget must look like 'rq:rc', got {text!r}")
        try:
            r_q, r_c = int(parts[0]), int(parts[1])
        except ValueError:
            raise UsageError(f"budget must look like 'rq:rc', got {text!r}") from None
        if r_q < 1 or r_c < 1:
            raise UsageError(f"budget counts must be >= 1, got {text!r}")
        return cls(r_q, r_c)


@dataclass(frozen=True)
class BudgetLadder:
    groups: tuple[Budget, ...]

    def __init__(self, groups: Iterable[Budget | tuple[int, int]]):
        gs = tuple(g if isinstance(g, Budget) else Budget(*g) for g in groups)
        if not gs:
            raise OutOfRange("a ladder needs at least one group")
        object.__setattr__(self, "groups", gs)

    def __len__(self):
        return len(self.groups)

    def __iter__(self):
        return iter(self.groups)

    def __getitem__(self, g):
        return self.groups[g]

    def __str__(self):
        return ",".join(str(b) for b in self.groups)

    @property
    def last(self) -> Budget:
        return self.groups[-1]

    @classmethod
    def parse(cls, text: str) -> "BudgetLadder":
        """Parse ``"rq:rc,rq:rc,..."`` and check strict monotonicity."""
        items = [t for t in text.split(",") if t.strip()]
        if not items:
            raise UsageError("empty ladder")
        ladder = cls(Budget.parse(t) for t in items)
        try:
            _check_increasing(ladder.groups)
        except NotIncreasing as exc:
            raise UsageError(str(exc)) from None
        return ladder


DEFAULT_LADDER = BudgetLadder([(1, 1), (2, 4), (4, 8), (8, 16), (16, 64)])


def _check_increasing(groups: Sequence[Budget]):
    for a, b in zip(groups, groups[1:]):
        if not b.r_q > a.r_q:
            raise NotIncreasing(f"r_q not strictly increasing: {a} then {b}")
        if not b.r_c > a.r_c:
            raise NotIncreasing(f"r_c not strictly increasing: {a} then {b}")


def validate_ladder(ladder: BudgetLadder, model_r_q: int, model_r_c: int) -> None:
    _check_increasing(ladder.groups)
    if ladder.last != Budget(model_r_q, model_r_c):
        raise LastGroupMismatch(
            f"last group {ladder.last} does not match model ({model_r_q}, {model_r_c})"
        )
