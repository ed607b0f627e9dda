"""A look inside the attention matcher with untrained weights.

Weights are seeded random, so nothing here is learned; the point is the
structure: rotary self-attention, shared-key cross-attention, and a
dual-softmax assignment whose rows and columns never sum above one.
"""

import numpy as np

from monovo.descriptor import DescriptorSet
from monovo.matcher import MatcherWeights, assignment, attend, cross_scores, extract_matches

rng = np.random.default_rng(0)
w = MatcherWeights.random(seed=0)
print(f"{w.n_layers} layers, {w.n_heads} heads of {w.head_dim}, "
      f"{sum(a.size for a in w.params.values()):,} parameters")

a = DescriptorSet(rng.normal(size=(64, 192)), rng.random((64, 2)))
# b is a noisy, shuffled copy of a
perm = rng.permutation(64)
b = DescriptorSet(a.descriptors[perm] + 0.1 * rng.normal(size=(64, 192)), a.positions[perm])

fa, fb = attend(a, b, w)
S = cross_scores(fa.descriptors, fb.descriptors, w, w.n_layers - 1)
S_back = cross_scores(fb.descriptors, fa.descriptors, w, w.n_layers - 1)
print("cross-attention scores are shared:", np.allclose(S, S_back.transpose(0, 2, 1)))

A = assignment(fa, fb, w)
print(f"max row sum {A.P.sum(axis=1).max():.4f}, max column sum {A.P.sum(axis=0).max():.4f}")
m = extract_matches(A, fa, fb, w, threshold=0.0)
correct = np.mean(perm[m.idx_b] == m.idx_a) if len(m) else 0.0
# near-duplicate descriptors stay close through random layers, so even
# untrained weights pair most of them up
print(f"{len(m)} mutual matches, {correct:.0%} correct, "
      f"confidences in [{m.weights.min():.3f}, {m.weights.max():.3f}]")
