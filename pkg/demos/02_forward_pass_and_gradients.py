"""
Inside one DiffNet forward pass
===============================

Fuse features with free embeddings, diffuse influence over the trust
graph for two layers, then check the hand-written backward pass against
finite differences.
"""

import numpy as np

from diffnet.data import SynthConfig, synthesize
from diffnet.model import DiffNet, DiffNetConfig
from diffnet.training import pairwise_loss, sample_pairs

data = synthesize(SynthConfig(num_users=30, num_items=40, avg_degree=3, latent_dim=4,
                              positives_per_user=5, num_communities=3, rng_seed=1))
model = DiffNet(DiffNetConfig(embed_dim=6, diffusion_depth=2, use_batchnorm=False), data, rng_seed=0)
print("parameters:", {k: v.shape for k, v in model.params.items()})

# every layer keeps the user matrix at D x M
trace = model.forward()
for k, h in enumerate(trace.h):
    print(f"layer {k}: user embeddings {h.shape}, mean norm {np.linalg.norm(h, axis=0).mean():.3f}")
print(f"neighbour vectors read: {trace.aggregation_ops} = K * edges = 2 * {data.num_edges}")

# one user's final vector is the diffused embedding plus the mean of their items
a = 0
manual = trace.h[-1][:, a] + trace.v[:, data.interactions[a]].mean(axis=1)
print("final vector matches h^K + item mean:", np.allclose(manual, trace.u[:, a]))

# pairwise loss and its gradient on a batch of (user, positive, negative) triples
pairs = sample_pairs(data, epoch_seed=0, neg_samples_per_pos=2)
users = np.concatenate([pairs.users, pairs.users])
items = np.concatenate([pairs.pos, pairs.neg])
scores = model.pair_scores(trace, users, items)
n = len(pairs)
loss, dd = pairwise_loss(scores[:n], scores[n:])
grads = model.backward(trace, users, items, np.concatenate([dd, -dd]))
print(f"mean pair loss {loss / n:.4f}")

# nudge one weight and compare with the analytic slope
h = 1e-5
name, idx = "W_diff1", (2, 3)
old = model.params[name][idx]
slopes = []
for step in (h, -h):
    model.params[name][idx] = old + step
    model.mark_updated()
    t = model.forward()
    s = model.pair_scores(t, users, items)
    slopes.append(pairwise_loss(s[:n], s[n:])[0])
model.params[name][idx] = old
model.mark_updated()
print(f"d loss / d {name}{idx}: analytic {grads[name][idx]:.8f}, "
      f"finite difference {(slopes[0] - slopes[1]) / (2 * h):.8f}")
