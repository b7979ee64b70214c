# %% [markdown]
"""
Calibrated caching on a small residual network
==============================================

BlockNet is a stack of 8 frozen tanh residual blocks acting as the noise
predictor. On uncached steps we reuse each block's previous output plus a
linear map applied to its input increment. The maps are fitted by ridge
regression and then truncated to a low rank per region of blocks.
"""

# %%
import numpy as np

from guidecache import RankObjective, bench, blocknet_testbed, calibrate, optimize_ranks, uniform_configs

tb = blocknet_testbed(seed=0)
bank = calibrate(tb)
for i, lc in enumerate(bank.layers):
    st = lc.fit_stats
    print(f"block {i}: relative residual {st['residual_fro'] / st['target_fro']:.2e}")

# %% [markdown]
"""
Rank search with 4 regions and a budget of 24 (uniform rank 6 fits exactly).
"""

# %%
obj = RankObjective(tb.net, bank, tb.w_star, tb.eval_set, tb.sched, tb.grid, tb.policy)
for c in uniform_configs(4, 2, 8, 24, 8):
    print("uniform", c.ranks, f"mse={obj(c):.2e}")
res = optimize_ranks(obj, 4, 2, 8, 24, 8)
print("searched", res.config.ranks, f"mse={res.objective:.2e}")

# %% [markdown]
"""
Compute relative to constant CFG without caching.
"""

# %%
for row in bench(tb, bank, res.config):
    print(f"{row.name:13s} passes={row.total_passes:3d} compute={row.compute_fraction:.3f} "
          f"mse_to_full={row.mse_to_full:.2e}")
