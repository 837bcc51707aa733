"""
The head/tail seesaw
====================

Train the ID-only, semantic-only and combined models on the benchmark (one
seed, a few minutes on a CPU) and compare head and tail hit rates.
"""

# %%
import logging

import torch

from h2rec.benchmark import BENCH_CONFIG, prepare_bench, run_variant

logging.basicConfig(level=logging.INFO, format="%(message)s")
torch.set_num_threads(1)
print(BENCH_CONFIG)

# %%
data = prepare_bench()
reports = {v: run_variant(data, v, seed=42) for v in ("hid_only", "sid_only", "full")}

# %% [markdown]
# IDs memorise popular items; semantic codes generalise to rare ones. The
# combined model should keep most of both.

# %%
print("%-9s %10s %10s %10s" % ("variant", "overall N", "head H", "tail H"))
for v, r in reports.items():
    g = r.groups
    print("%-9s %10.4f %10.4f %10.4f" % (v, g["overall"]["ndcg_at_10"], g["head"]["hit_at_10"], g["tail"]["hit_at_10"]))

# %%
for v, r in reports.items():
    row = [r.groups[f"bucket{b}"]["hit_at_10"] for b in range(1, 6)]
    print(v.ljust(9), " ".join("%.3f" % x for x in row), " (bucket1 = least popular)")
