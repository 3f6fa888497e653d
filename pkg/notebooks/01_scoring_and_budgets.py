"""
Scoring with nested multi-vector budgets
========================================

A query and a candidate are each a stack of unit vectors. The score takes,
for every query vector, its best match among the candidate vectors and sums
those maxima. A budget (r_q, r_c) keeps only the leading rows on each side.
"""

# %%
import numpy as np

from nestmv import Budget, MetaEmbeddingSet, Side, group_score, maxsim, prefix

rng = np.random.default_rng(0)
query = MetaEmbeddingSet.from_raw(rng.standard_normal((16, 32)))
doc = MetaEmbeddingSet.from_raw(rng.standard_normal((64, 32)), Side.CANDIDATE)

# %% The full budget is plain MaxSim.
print("full      ", maxsim(query, doc))
print("(16, 64)  ", group_score(query, doc, Budget(16, 64)))

# %% Smaller budgets look only at prefixes, so they are cheap to compute.
for b in [Budget(1, 1), Budget(2, 4), Budget(4, 8), Budget(8, 16)]:
    print(b, round(group_score(query, doc, b), 4))

# %% Scoring a prefix budget equals scoring pre-truncated sets.
b = Budget(4, 8)
assert group_score(query, doc, b) == maxsim(prefix(query, 4), prefix(doc, 8))

# %% Cost grows as 2 * r_q * r_c * D per candidate.
from nestmv import scoring_flops

for b in [Budget(1, 1), Budget(16, 64)]:
    print(b, f"{scoring_flops(b, 3584, 100_000) / 1e9:.2f} GFLOPs over 100k candidates")
