"""MaxSim scoring, batched scoring against an index, top-k ranking, FLOPs model."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import WORK_DTYPE, Budget, MetaEmbeddingSet, prefix
from .errors import BudgetExceedsVectors, DimensionMismatch, EmptyIndex, KTooLarge

# Upper bound on elements of one (queries x r_q x candidates x r_c) similarity block.
_BLOCK_ELEMS = 1 << 24


def _sum_ascending(m: np.ndarray) -> np.ndarray:
    """Sum over axis -1 strictly left to right, in the input dtype.

    np.sum uses pairwise/unrolled reduction; a fixed order keeps scores
    bit-reproducible across call paths.
    """
    acc = m[..., 0].copy()
    for i in range(1, m.shape[-1]):
        acc += m[..., i]
    return acc


def maxsim(eq: MetaEmbeddingSet, ec: MetaEmbeddingSet) -> float:
    """Sum over query rows of the best dot product with any candidate row."""
    if eq.D != ec.D:
        raise DimensionMismatch(f"query D={eq.D} vs candidate D={ec.D}")
    sim = eq.vectors @ ec.vectors.T
    return float(_sum_ascending(sim.max(axis=1)))


def group_score(eq: MetaEmbeddingSet, ec: MetaEmbeddingSet, b: Budget) -> float:
    if b.r_q > eq.R or b.r_c > ec.R:
        raise BudgetExceedsVectors(f"budget {b} exceeds sets with R_q={eq.R}, R_c={ec.R}")
    return maxsim(prefix(eq, b.r_q), prefix(ec, b.r_c))


@dataclass(frozen=True, eq=False)
class ScoreMatrix:
    """Q x N late-interaction scores at one budget.

    ``doc_ids`` label the columns (positions when omitted) and
    ``query_ids`` the rows.
    """

    values: np.ndarray
    budget: Budget
    doc_ids: np.ndarray | None = None
    query_ids: Sequence | None = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=WORK_DTYPE)
        if v.ndim != 2:
            raise ValueError(f"score matrix must be 2-D, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("score matrix contains non-finite values")
        object.__setattr__(self, "values", v)
        ids = np.arange(v.shape[1], dtype=np.uint64) if self.doc_ids is None else np.asarray(self.doc_ids, dtype=np.uint64)
        if ids.shape != (v.shape[1],):
            raise DimensionMismatch("doc_ids length differs from number of columns")
        object.__setattr__(self, "doc_ids", ids)
        qids = list(range(v.shape[0])) if self.query_ids is None else list(self.query_ids)
        if len(qids) != v.shape[0]:
            raise DimensionMismatch("query_ids length differs from number of rows")
        object.__setattr__(self, "query_ids", qids)

    @property
    def shape(self):
        return self.values.shape


@dataclass(frozen=True)
class RankedList:
    query_id: object
    entries: tuple[tuple[int, float], ...] = field(default_factory=tuple)

    @property
    def doc_ids(self) -> list[int]:
        return [d for d, _ in self.entries]

    @property
    def top1(self) -> int:
        return self.entries[0][0]

    def __len__(self):
        return len(self.entries)


def _stack_query_prefixes(queries: Sequence[MetaEmbeddingSet], r_q: int, dim: int) -> np.ndarray:
    for n, q in enumerate(queries):
        if q.D != dim:
            raise DimensionMismatch(f"query {n} has D={q.D}, index has D={dim}")
        if q.R < r_q:
            raise BudgetExceedsVectors(f"query {n} has R={q.R} < r_q={r_q}")
    return np.stack([q.vectors[:r_q] for q in queries]).astype(WORK_DTYPE, copy=False)


def _score_block(qs: np.ndarray, cands: np.ndarray) -> np.ndarray:
    """qs: (Q, r_q, D), cands: (n, r_c, D) float32 -> (Q, n) scores."""
    nq, r_q, d = qs.shape
    n, r_c, _ = cands.shape
    out = np.empty((nq, n), dtype=WORK_DTYPE)
    flat_c = cands.reshape(n * r_c, d)
    step = max(1, _BLOCK_ELEMS // max(1, r_q * n * r_c))
    for s in range(0, nq, step):
        qb = qs[s:s + step]
        sim = (qb.reshape(-1, d) @ flat_c.T).reshape(qb.shape[0], r_q, n, r_c)
        best = sim.max(axis=3)                      # (q, r_q, n)
        out[s:s + step] = _sum_ascending(np.moveaxis(best, 1, 2))
    return out


def score_batch(queries: Sequence[MetaEmbeddingSet], index, b: Budget,
                batch_size: int = 1000, query_ids: Sequence | None = None) -> ScoreMatrix:
    """Score every query against every indexed candidate at budget ``b``.

    Candidates are dequantized to float32 and processed in shards of
    ``batch_size``; each shard's scores depend only on its own candidates,
    so the result does not depend on the shard size.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if index.n == 0:
        raise EmptyIndex("index holds no candidates")
    if b.r_c > index.r_c:
        raise BudgetExceedsVectors(f"r_c={b.r_c} exceeds index R_c={index.r_c}")
    if not queries:
        return ScoreMatrix(np.zeros((0, index.n), WORK_DTYPE), b, index.doc_ids, query_ids)
    qs = _stack_query_prefixes(queries, b.r_q, index.dim)
    values = np.empty((len(queries), index.n), dtype=WORK_DTYPE)
    for s in range(0, index.n, batch_size):
        shard = index.dequantize(slice(s, s + batch_size), b.r_c)
        values[:, s:s + shard.shape[0]] = _score_block(qs, shard)
    return ScoreMatrix(values, b, index.doc_ids, query_ids)


def top_k(scores: ScoreMatrix, k: int) -> list[RankedList]:
    """Best ``k`` candidates per query; equal scores go to the smaller doc id."""
    n = scores.values.shape[1]
    if k < 1:
        raise KTooLarge(f"k must be >= 1, got {k}")
    if k > n:
        raise KTooLarge(f"k={k} exceeds the {n} candidates available")
    ids = scores.doc_ids
    out = []
    for qid, row in zip(scores.query_ids, scores.values):
        # -0.0 and 0.0 compare equal in lexsort, so negation keeps ties intact
        order = np.lexsort((ids, -row))[:k]
        out.append(RankedList(qid, tuple((int(ids[j]), float(row[j])) for j in order)))
    return out


def scoring_flops(b: Budget, d: int, n: int) -> int:
    """Multiply-adds for exhaustive MaxSim, counted as two FLOPs each."""
    if d < 1 or n < 1:
        raise ValueError("d and n must be >= 1")
    return 2 * b.r_q * b.r_c * d * n
