# %% [markdown]
# # Teacher knowledge
#
# A teacher produces N multi-UE episodes.  Loops are cut out of every
# trajectory, each episode is scored by its longest travel time plus the
# uplink power spent on the way, and the L lowest-scoring episodes become
# the teacher knowledge distilled into the students.

# %%
import numpy as np

from lecnav import lec
from lecnav import teacher as tc
from lecnav.env import ACTION_WORDS
from lecnav.scenarios import desk_scenario

sc = desk_scenario()
episodes = tc.generate_planner_episodes(sc, 50, temperature=0.2, seed=0)
kn = tc.select_top_l(episodes, sc, 5)
print("picked episodes:", kn.picked)
print("scores:", np.round(kn.scores, 3))
for traj in kn.episodes[0].trajectories:
    print(f"UE{traj.ue + 1}: {traj.cells()}")

# %% [markdown]
# Refinement removes revisits.  A wandering trajectory shrinks to its
# loop-free core.

# %%
wander = tc.Trajectory(0, [((0, 0), (1, 0)), ((1, 0), (0, 1)), ((1, 1), (-1, -1)),
                           ((0, 0), (1, 1))], (1, 1))
print("before:", wander.cells())
print("after: ", tc.refine(wander).cells())

# %% [markdown]
# The action distribution the student is pulled toward at a cell is the
# frequency of each action the selected trajectories took there.

# %%
start = sc.starts[0]
pdf = lec.teacher_pdf(kn, 0, start)
print(f"teacher at {start}:", {w: round(float(p), 2) for w, p in zip(ACTION_WORDS, pdf.probs) if p})

# %% [markdown]
# A language-model teacher reads text reports sent over the noisy uplink.
# The scripted stand-in answers sensibly only when a report arrives intact,
# so its travel time grows as SNR drops.

# %%
for snr in (25.0, 20.0, 15.0):
    times = [np.mean(tc.llm_teacher_episode(sc, tc.ScriptedController(seed=n), snr, seed=n).travel_times)
             for n in range(5)]
    print(f"{snr:.0f} dB: mean travel time {np.mean(times):.1f}")
