# %% [markdown]
# # EC against LEC on the desk map
#
# Both schemes share the same networks, exploration schedule and seed.  LEC
# adds the KL pull toward the teacher's per-cell actions and the +0.1 reward
# for stepping on a teacher cell.  The run is short (400 episodes, about a
# minute each); the acceptance suite uses 3000 episodes and 4 seeds.

# %%
from pathlib import Path

import numpy as np

from lecnav import config, ec, lec, metrics
from lecnav import teacher as tc

cfg = config.load(Path(__file__).parent / "configs" / "desk_quick.json")
sc = config.build_scenario(cfg)
seed = cfg["seeds"][0]

kn = tc.select_top_l(tc.generate_planner_episodes(sc, 50, seed=seed), sc, 5)
ec_run = ec.train_ec(config.train_config(cfg, seed), sc)
lec_run = lec.train_lec(config.kd_config(cfg, seed), sc, kn)

# %% [markdown]
# Smoothed reward curves and the first episode after which each stays
# within 80% of its maximum.

# %%
n = len(ec_run.returns)
window = metrics.desk_window(n)
for name, run in (("EC", ec_run), ("LEC", lec_run)):
    s = metrics.smooth(run.returns, 3, window)
    print(f"{name:3s} convergence episode {metrics.convergence_episode(s)}, "
          f"curve every {n // 8} episodes: {np.round(s[::n // 8], 2).tolist()}")

# %% [markdown]
# Greedy evaluation over the noisy uplink: travel time and the share of
# steps spent in weak cells (CPPR) on episodes where both UEs arrived.

# %%
tcfg = config.train_config(cfg, seed)
for name, run in (("EC", ec_run), ("LEC", lec_run)):
    rec = ec.evaluate(sc, run.params, tcfg, 20, seed=1000)
    c = metrics.record_cppr(rec)
    cppr = np.nanmean(c) if np.isfinite(c).any() else float("nan")
    print(f"{name:3s} arrived {rec.done.mean():.0%}, mean travel time {rec.travel_times().mean():.1f}, "
          f"CPPR {cppr:.3f}")
