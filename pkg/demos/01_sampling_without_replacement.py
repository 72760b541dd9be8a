# %% [markdown]
# Drawing K distinct frames from a score vector.
#
# Each step is a softmax over the frames still available; the chosen frame
# is masked out before the next step. The log-probabilities of the steps add
# up to the exact log-probability of the ordered draw.

# %%
import itertools
import math

import numpy as np

from keyframe_rl import sampler as U

scores = np.array([2.0, 0.5, 0.0, -1.0, 1.0])
draw = U.sample_without_replacement(scores, 3, rng=0)
print("indices", draw.indices)
print("per-step log p", np.round(draw.step_logprobs, 4), "total", round(draw.total_logprob, 4))

# %% [markdown]
# Summing over every ordered triple recovers a probability of one.

# %%
total = sum(math.exp(U.draw_logprob(scores, list(p))) for p in itertools.permutations(range(5), 3))
print("sum over ordered triples", total)

# %% [markdown]
# Empirical frequencies from many draws sit on top of the exact values.

# %%
idx, _ = U.sample_many(scores, 3, 200_000, rng=1)
for perm in [(0, 4, 1), (0, 1, 4), (3, 2, 1)]:
    freq = np.mean(np.all(idx == perm, axis=1))
    print(perm, "exact", round(math.exp(U.draw_logprob(scores, list(perm))), 5), "empirical", round(freq, 5))

# %% [markdown]
# Temperature flattens the distribution; greedy selection returns its mode.

# %%
for t in (0.25, 1.0, 4.0):
    p = np.exp([U.draw_logprob(scores, [i], temperature=t) for i in range(5)])
    print(f"T={t:<5} first-pick probabilities", np.round(p, 3))
print("greedy", U.greedy_select(scores, 3).indices)
