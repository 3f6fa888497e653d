"""Retrieval metrics, budget sweeps and pooling baselines."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .core import Budget, BudgetLadder, MetaEmbeddingSet, Side, l2_normalize_rows, validate_ladder
from .errors import DimensionMismatch, EmptyInput, TooFewTokens, UnknownQuery, UsageError
from .index import NestedIndex, memory_report, search, truncate_index
from .lateint import RankedList, scoring_flops


class Qrels:
    """Relevance judgments ``{query_id: {doc_id: relevance}}``.

    Every query must have at least one judged doc with relevance > 0.
    """

    def __init__(self, judgments: Mapping[object, Mapping[int, int]]):
        self.judgments = {}
        for qid, docs in judgments.items():
            docs = {int(d): int(r) for d, r in docs.items()}
            if any(r < 0 for r in docs.values()):
                raise ValueError(f"query {qid!r}: relevance must be >= 0")
            if not any(r > 0 for r in docs.values()):
                raise ValueError(f"query {qid!r} has no positive judgment")
            self.judgments[qid] = docs

    def __contains__(self, qid):
        return qid in self.judgments

    def __getitem__(self, qid) -> dict[int, int]:
        try:
            return self.judgments[qid]
        except KeyError:
            raise UnknownQuery(f"query {qid!r} not in qrels") from None

    def __len__(self):
        return len(self.judgments)

    def relevance(self, qid, doc_id: int) -> int:
        return self[qid].get(int(doc_id), 0)


def read_qrels(path) -> Qrels:
    """Read ``query_id<TAB>doc_id<TAB>relevance`` lines (query ids stay strings)."""
    judg: dict[str, dict[int, int]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise UsageError(f"{path}:{lineno}: expected 3 tab-separated columns")
            try:
                judg.setdefault(parts[0], {})[int(parts[1])] = int(parts[2])
            except ValueError:
                raise UsageError(f"{path}:{lineno}: doc_id and relevance must be integers") from None
    return Qrels(judg)


def write_qrels(path, qrels: Qrels) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for qid, docs in qrels.judgments.items():
            for d, r in docs.items():
                fh.write(f"{qid}\t{d}\t{r}\n")


def _per_query(rankings: Sequence[RankedList], qrels: Qrels):
    for rl in rankings:
        if rl.query_id not in qrels:
            raise UnknownQuery(f"query {rl.query_id!r} not in qrels")
        yield rl, qrels[rl.query_id]


def precision_at_1(rankings: Sequence[RankedList], qrels: Qrels) -> float:
    hits = [float(bool(rl.entries) and judged.get(rl.top1, 0) > 0)
            for rl, judged in _per_query(rankings, qrels)]
    return math.fsum(hits) / len(hits) if hits else 0.0


def _dcg(rels) -> float:
    return math.fsum((2.0 ** r - 1.0) / math.log2(i + 2) for i, r in enumerate(rels))


def ndcg_at_k(rankings: Sequence[RankedList], qrels: Qrels, k: int = 5) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    scores = []
    for rl, judged in _per_query(rankings, qrels):
        ideal = _dcg(sorted(judged.values(), reverse=True)[:k])
        if ideal == 0:
            continue
        scores.append(_dcg([judged.get(d, 0) for d in rl.doc_ids[:k]]) / ideal)
    # fsum is exact, so the mean does not depend on query order
    return math.fsum(scores) / len(scores) if scores else 0.0


METRICS = {
    "precision@1": (precision_at_1, 1),
    "ndcg@5": (lambda r, q: ndcg_at_k(r, q, 5), 5),
}


def resolve_metric(name: str):
    """Metric function and the ranking depth it needs, by name."""
    key = name.lower().replace("p@1", "precision@1")
    if key in METRICS:
        return METRICS[key]
    if key.startswith("ndcg@"):
        k = int(key.split("@", 1)[1])
        return (lambda r, q: ndcg_at_k(r, q, k)), k
    raise UsageError(f"unknown metric {name!r}; choose from {sorted(METRICS)} or ndcg@K")


@dataclass(frozen=True)
class SweepPoint:
    budget: Budget
    metric_name: str
    value: float
    flops: int
    index_bytes: int


def budget_sweep(index_full: NestedIndex, queries: Sequence[MetaEmbeddingSet], qrels: Qrels,
                 ladder: BudgetLadder, metric: str = "precision@1", batch_size: int = 1000,
                 query_ids: Sequence | None = None) -> list[SweepPoint]:
    """Evaluate ``metric`` at every ladder budget, coarse to fine.

    Each point searches an index truncated to the group's r_c and carries the
    analytic scoring FLOPs and payload bytes of that configuration.
    """
    if not queries:
        raise EmptyInput("no queries to sweep")
    rq = {q.R for q in queries}
    if len(rq) != 1:
        raise DimensionMismatch(f"queries disagree on R: {sorted(rq)}")
    validate_ladder(ladder, rq.pop(), index_full.r_c)
    fn, depth = resolve_metric(metric)
    k = min(depth, index_full.n)
    points = []
    for b in ladder:
        idx = truncate_index(index_full, b.r_c)
        ranked = search(idx, queries, b, k, batch_size, query_ids)
        points.append(SweepPoint(b, metric, fn(ranked, qrels),
                                 scoring_flops(b, idx.dim, idx.n), memory_report(idx).bytes))
    return points


SWEEP_FIELDS = ["r_q", "r_c", "metric", "value", "flops", "index_bytes"]


def _sweep_rows(points: Sequence[SweepPoint]):
    for p in points:
        yield {"r_q": p.budget.r_q, "r_c": p.budget.r_c, "metric": p.metric_name,
               "value": p.value, "flops": p.flops, "index_bytes": p.index_bytes}


def sweep_to_csv(points: Sequence[SweepPoint]) -> str:
    buf = io.StringIO()
    wr = csv.DictWriter(buf, SWEEP_FIELDS, lineterminator="\n")
    wr.writeheader()
    for row in _sweep_rows(points):
        wr.writerow({**row, "value": f"{row['value']:.6f}"})
    return buf.getvalue()


def sweep_to_json(points: Sequence[SweepPoint]) -> str:
    return json.dumps(list(_sweep_rows(points)), indent=2) + "\n"


# -- pooling baselines ----------------------------------------------------

def _tokens(tokens) -> np.ndarray:
    t = np.asarray(tokens, dtype=np.float64)
    if t.ndim != 2:
        raise ValueError(f"tokens must be T x D, got shape {t.shape}")
    if t.shape[0] == 0:
        raise EmptyInput("no tokens to pool")
    return t


def pool_single_last(tokens, side: Side = Side.QUERY) -> MetaEmbeddingSet:
    """Last token's hidden state as a single vector."""
    t = _tokens(tokens)
    return MetaEmbeddingSet(l2_normalize_rows(t[-1:]), side)


def pool_single_mean(tokens, side: Side = Side.QUERY) -> MetaEmbeddingSet:
    t = _tokens(tokens)
    return MetaEmbeddingSet(l2_normalize_rows(t.mean(axis=0, keepdims=True)), side)


def pool_split(tokens, segments: int, side: Side = Side.QUERY) -> MetaEmbeddingSet:
    """Mean-pool ``segments`` contiguous chunks; earlier chunks absorb the remainder."""
    t = _tokens(tokens)
    if segments < 1 or t.shape[0] < segments:
        raise TooFewTokens(f"{t.shape[0]} tokens cannot fill {segments} segments")
    means = np.stack([c.mean(axis=0) for c in np.array_split(t, segments)])
    return MetaEmbeddingSet(l2_normalize_rows(means), side)


def split_sizes(T: int, segments: int) -> list[int]:
    return [len(c) for c in np.array_split(np.arange(T), segments)]

