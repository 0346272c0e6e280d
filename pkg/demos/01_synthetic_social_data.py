"""
Synthetic social data
=====================

Generate a homophilous trust network with planted preferences, then check
that trusted users really do look alike.
"""

import numpy as np

from diffnet.data import SplitSpec, SynthConfig, bucket_labels, bucket_users, cosine_rows, split, synthesize_with_truth

# 200 users follow each other by preferential attachment inside 10 loose
# communities; each user's taste mixes in the tastes of those they trust
config = SynthConfig(num_users=200, num_items=500, homophily_strength=0.8, rng_seed=0)
data, truth = synthesize_with_truth(config)
print(f"{data.num_users} users, {data.num_items} items, {data.num_edges} trust edges, "
      f"{int(data.interaction_counts.sum())} positives")

# compare connected pairs against random pairs
z = truth.user_vectors
src = np.repeat(np.arange(data.num_users), [t.size for t in data.trust_out])
dst = np.concatenate(data.trust_out)
rng = np.random.default_rng(0)
a, b = rng.integers(0, 200, (2, 5000))
keep = a != b
print(f"mean cosine, trusted pairs: {cosine_rows(z[src], z[dst]).mean():.3f}")
print(f"mean cosine, random pairs:  {cosine_rows(z[a[keep]], z[b[keep]]).mean():.3f}")

# the in-degree distribution is heavy tailed
indeg = np.bincount(dst, minlength=data.num_users)
print(f"in-degree: median {np.median(indeg):.0f}, max {indeg.max()}")

# hold out test and validation interactions per user
train, val, test = split(data, SplitSpec(test_fraction=0.1, validation_fraction=0.09, rng_seed=0))
print(f"train/val/test positives: {int(train.interaction_counts.sum())}, "
      f"{int(val.interaction_counts.sum())}, {int(test.interaction_counts.sum())}")

# users grouped by how many training ratings they have; with 20 positives
# each, everyone lands in one group here
groups = np.bincount(bucket_users(train, (16, 64, 256)), minlength=4)
for label, count in zip(bucket_labels((16, 64, 256)), groups):
    print(f"  {label:>9} ratings: {count} users")
