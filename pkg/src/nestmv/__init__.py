"""Prefix-nested multi-vector late-interaction retrieval.

Build a budgeted candidate index from meta-embeddings, score with MaxSim at
any point of a coarse-to-fine budget ladder, and train a toy encoder with
grouped InfoNCE so that every prefix is usable on its own.
"""

from .core import (
    DEFAULT_LADDER,
    Budget,
    BudgetLadder,
    MetaEmbeddingSet,
    Side,
    l2_normalize_rows,
    prefix,
    validate_ladder,
)
from .evaluation import (
    Qrels,
    SweepPoint,
    budget_sweep,
    ndcg_at_k,
    pool_single_last,
    pool_single_mean,
    pool_split,
    precision_at_1,
)
from .index import (
    MemoryReport,
    NestedIndex,
    build_index,
    dequantize_bf16,
    load_index,
    memory_report,
    quantize_bf16,
    save_index,
    search,
    truncate_index,
)
from .lateint import RankedList, ScoreMatrix, group_score, maxsim, score_batch, scoring_flops, top_k

__version__ = "0.1.0"
