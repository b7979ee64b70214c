# %% [markdown]
"""
How much does one guidance step matter?
=======================================

A DDIM step is linear in the noise prediction, so changing the guidance scale
at one step shifts the next state by a fixed multiple of (eps_c - eps_u).
Here we measure that shift with two real sampler calls and compare it with
the closed form.
"""

# %%
import numpy as np

from guidecache import (
    NoiseSchedule,
    apply_cfg,
    build_noise_schedule,
    ddim_step,
    deviation_scale,
    deviation_switch,
)

# a two-entry schedule: step t=2 -> t_prev=1
s = NoiseSchedule(np.array([0.8, 0.5]))
eps_c, eps_u, x = np.array([1.0]), np.array([0.0]), np.array([0.3])

base = ddim_step(x, apply_cfg(eps_u, eps_c, 1.5), 2, 1, s)
raised = ddim_step(x, apply_cfg(eps_u, eps_c, 2.0), 2, 1, s)
print("measured shift, w 1.5 -> 2.0:", raised - base)
print("closed form                  :", deviation_scale(eps_c, eps_u, 1.5, 2.0, 2, 1, s))

# %% [markdown]
"""
Dropping the unconditional branch at this step moves x the other way, since
conditional-only is CFG at w = 1.
"""

# %%
cond_only = ddim_step(x, eps_c, 2, 1, s)
print("measured shift, CFG -> cond  :", cond_only - base)
print("closed form                  :", deviation_switch(eps_c, eps_u, 1.5, 2, 1, s))

# %% [markdown]
"""
The coefficient is largest in magnitude at the noisiest steps, so a guided
step there moves the trajectory the most per extra forward pass.
"""

# %%
sched = build_noise_schedule("linear-beta", 1000)
for t in (980, 700, 400, 100, 20):
    print(f"t={t:4d}  beta={sched.beta_coef(t, t - 20):+.4f}")
