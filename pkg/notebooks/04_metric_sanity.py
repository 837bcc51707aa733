"""
Sanity checks for the ranking metrics
=====================================

A random scorer should land near the closed-form expectations for 1 target
among 100 candidates; an oracle scorer should be perfect.
"""

# %%
import numpy as np

from h2rec.data import leave_one_out_split, popularity_partition, synthesize_dataset
from h2rec.evaluation import evaluate

ds, _, _ = synthesize_dataset(n_users=3000, n_items=500, rng=np.random.default_rng(0))
split = leave_one_out_split(ds)
part = popularity_partition(split)

# %%
expected_hit = 10 / 100
expected_ndcg = sum(1 / np.log2(r + 1) for r in range(1, 11)) / 100
rng = np.random.default_rng(1)
g = evaluate(lambda seqs, cands: rng.random(cands.shape), split, part, 99, seed=0).groups["overall"]
print("random  H@10 %.4f (expect %.4f)  N@10 %.4f (expect %.4f)" % (g["hit_at_10"], expected_hit, g["ndcg_at_10"], expected_ndcg))

# %%
# the target always sits in column 0 of the candidate matrix
oracle = lambda seqs, cands: np.eye(1, cands.shape[1]).repeat(len(cands), 0)
g = evaluate(oracle, split, part, 99, seed=0).groups
print("oracle ", {k: v["hit_at_10"] for k, v in g.items()})

# %%
# ties count against the target, so a constant scorer never hits
g = evaluate(lambda s, c: np.zeros(c.shape), split, part, 99, seed=0).groups["overall"]
print("constant H@10", g["hit_at_10"])
