"""
A clustered long-tail corpus
============================

Build the default synthetic benchmark, split it leave-one-out and look at how
skewed item popularity is.
"""

# %%
import numpy as np

from h2rec.data import leave_one_out_split, popularity_partition, synthesize_dataset

ds, semantic, truth = synthesize_dataset(rng=np.random.default_rng(42))
print(ds.n_users, "users,", ds.n_items, "items,", semantic.shape[1], "semantic dims")
lengths = np.array([len(s) for s in ds.sequences])
print("sequence length: mean %.1f, min %d, max %d" % (lengths.mean(), lengths.min(), lengths.max()))

# %% [markdown]
# Each user keeps the last item for test and the one before it for validation.

# %%
split = leave_one_out_split(ds)
prefix, target = split.test[0]
print("user 0 test prefix", prefix[-5:], "-> target", target)

# %%
part = popularity_partition(split)
share = part.counts[part.head].sum() / part.counts.sum()
print("head items: %d (%.0f%% of catalog) take %.1f%% of training interactions"
      % (len(part.head), 100 * len(part.head) / ds.n_items, 100 * share))
for b, items in enumerate(part.buckets, 1):
    print("bucket%d  items %4d  mean count %7.1f" % (b, len(items), part.counts[items].mean()))

# %% [markdown]
# Users mostly stay inside one semantic cluster, which is what lets shared
# semantic codes carry signal to rarely seen items.

# %%
clusters = truth.item_cluster
same = np.mean([np.mean(clusters[s[1:]] == clusters[s[:-1]]) for s in ds.sequences])
print("consecutive items in the same cluster: %.2f" % same)
