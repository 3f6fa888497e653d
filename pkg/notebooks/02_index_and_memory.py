"""
Building, truncating and saving an index
========================================

Candidates are stored as bfloat16 with rows in prefix order. Any leading r_c
rows form a valid smaller index, so truncation is a slice, not a re-encode.
"""

# %%
import tempfile
from pathlib import Path

import numpy as np

from nestmv import (Budget, MetaEmbeddingSet, Side, build_index, load_index, memory_report,
                    save_index, search, truncate_index)

rng = np.random.default_rng(1)
docs = [(i, MetaEmbeddingSet.from_raw(rng.standard_normal((64, 16)), Side.CANDIDATE))
        for i in range(500)]
idx = build_index(docs, 64)
print("full index:", idx.n, "docs,", idx.r_c, "vectors each,", memory_report(idx).bytes, "bytes")

# %% Memory scales linearly with r_c.
for r in (1, 4, 8, 16, 64):
    print(f"r_c={r:2d}  {memory_report(truncate_index(idx, r)).bytes:>9d} bytes")

# %% Searching a truncated index gives the same rankings as the full one.
queries = [MetaEmbeddingSet.from_raw(docs[t][1].vectors[:16] + 0.05 * rng.standard_normal((16, 16)))
           for t in (3, 42, 99)]
b = Budget(4, 8)
small = truncate_index(idx, 8)
assert search(small, queries, b, 5) == search(idx, queries, b, 5)
for rl in search(small, queries, b, 3):
    print(rl.query_id, rl.doc_ids)

# %% The on-disk format carries a checksum and round-trips bit for bit.
with tempfile.TemporaryDirectory() as d:
    path = Path(d) / "docs.mvi"
    save_index(small, path)
    print(path.stat().st_size, "bytes on disk")
    assert load_index(path).identical(small)
