"""
The sampled ranking protocol
============================

Each test positive competes with sampled unrated items; hits and
discounted gains are read off the combined ranking.
"""

import math

import numpy as np

from diffnet.data import Dataset
from diffnet.evaluation import EvalConfig, evaluate, rank_positions, rank_user

# two positives (items 10 and 11) among six candidates, ranked 1st and 4th
scores = np.zeros(20)
scores[[10, 1, 2, 11, 3, 4]] = [6, 5, 4, 3, 2, 1]
print("ranks:", rank_positions(scores, [10, 11], [1, 2, 3, 4]).tolist())
hits, ndcg = rank_user(scores, [10, 11], [1, 2, 3, 4], 5)
print(f"HR numerator {hits}, NDCG@5 {ndcg:.6f} "
      f"(= (1 + 1/log2 5) / (1 + 1/log2 3) = {(1 + 1 / math.log2(5)) / (1 + 1 / math.log2(3)):.6f})")

# equal scores go to the smaller item id
print("tie ranks:", rank_positions(np.zeros(5), [3], [1, 4]).tolist())

# a random scorer lands the one positive in the top 10 with probability 10/1001
M, N = 2000, 1500
test = Dataset.from_pairs(M, N, np.arange(M), np.arange(M) % N)
rng = np.random.default_rng(0)
res = evaluate(lambda users: rng.random((len(users), N)), test, EvalConfig(top_n=(10,), num_repetitions=3))
print(f"random HR@10 {res.hr_at(10):.4f} vs 10/1001 = {10 / 1001:.4f}")
print("per repetition:", np.round(res.per_repetition("hr", 10), 4).tolist())
