# %% [markdown]
# Reward and advantage arithmetic used by the two training stages.

# %%
import numpy as np

from keyframe_rl.rewards import compute_rewards, difficulty_advantage, group_advantages, informativeness_reward

# %% [markdown]
# Informativeness counts the query rows whose peak-to-floor ratio clears the
# threshold (10 by default) and scales the share by 0.1.

# %%
print(informativeness_reward(np.array([[12.0, 1.0], [2.0, 1.0]])))
print(informativeness_reward(np.full((4, 64), 0.37)))

# %% [markdown]
# Group-relative advantages standardise rewards within a rollout group.

# %%
print(group_advantages([1, 0, 0, 1, 1, 0, 1, 0]))
print(group_advantages([0.7, 0.7, 0.7, 0.7]))

# %% [markdown]
# The pre-training advantage pays more for solving questions that a uniform
# sampler rarely gets right.

# %%
for c in (0.0, 0.25, 0.5, 0.875):
    print(f"pass rate {c:<6} correct {difficulty_advantage(c, True):+.4f} wrong {difficulty_advantage(c, False):+.4f}")

# %%
print(compute_rewards(correct=True, well_formed=False, S=None))
