"""Restart arms and their Whittle indices.

A restart arm drifts on its own and jumps back to state 0 when activated, earning
s^2 for activating it in state s. With full observation the index is computed by
bisection on the passive subsidy; with partial observation the planner only knows
how many steps have passed since the last reset, and the index is a function of
that count.
"""

import numpy as np

from rbstein.mdp import CreArmSpec, cre_passive
from rbstein.policies import ArmModel, reset_whittle_indices, whittle_index

np.set_printoptions(precision=3, suppress=True)

for p in (0.5, 0.7, 0.9):
    P0 = cre_passive(CreArmSpec(p, 3)).entries
    arm = ArmModel.cre(P0)
    full = [whittle_index(arm, s) for s in range(3)]
    tau = reset_whittle_indices(P0[None], arm.reward, 8)[0]
    print(f"p = {p}: passive matrix\n{P0}")
    print(f"  index by state          {np.array(full)}")
    print(f"  index by steps-since-reset {tau}\n")

# Stickier arms (larger p) stay in their current state longer, so the value of waiting
# after a reset is smaller and the indices at small tau are lower.
