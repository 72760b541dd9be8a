# %% [markdown]
# A small end-to-end run: generate episodes, pre-train the sampler, train
# the sampler and query policy jointly, then compare frame selectors on the
# held-out set. It uses the `benchmark` preset with half the epochs
# and a smaller held-out set, so it finishes in a couple of minutes.

# %%
import numpy as np

from keyframe_rl import harness as H
from keyframe_rl.config import benchmark_config

cfg = benchmark_config(n_eval_episodes=200, pretrain_epochs=20, joint_epochs=2)
out = H.run_pipeline(cfg)
print("train", len(out["train"]), "hard", len(out["hard"]), "eval", len(out["eval"]))

# %%
rep = out["report"]
for name, r in rep.methods.items():
    print(f"{name:<15} accuracy {r.accuracy:.3f} coverage {r.coverage:.3f}")

# %% [markdown]
# Every method is scored against the same oracle draws, so paired counts
# are meaningful.

# %%
print(H.paired_comparison(rep, "learned_joint", "uniform"))

# %%
rewards = np.array([m["reward_mean"] for m in out["joint"].metrics])
print("joint reward by quartile", [round(float(q.mean()), 3) for q in np.array_split(rewards, 4)])
