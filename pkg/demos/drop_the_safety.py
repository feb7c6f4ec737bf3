"""Two centers, two application rounds.

A is worth 7 and hard to get now, B is worth 2 and easy.  Chances at A
improve a lot in the second round, so being turned away in round one has
value.  Compare the round-by-round choice with the joint optimum.
"""

import numpy as np

from waitlist_lab.lottery import lottery_from_rol
from waitlist_lab.policy import PolicyProblem, best_single_period_rol, brute_force_solution, total_value

v = np.array([7.0, 2.0])
pi1 = np.array([0.1, 0.5])
pi2 = np.array([0.5, 0.9])
names = "AB"


def show(R):
    return "(" + "".join(names[j] for j in R) + ")"


for label, pi in (("round 1", pi1), ("round 2", pi2)):
    for R in ((0, 1), (0,), (1, 0), (1,)):
        L = lottery_from_rol(dict(enumerate(pi)), R)
        print(f"{label} {show(R):5s} A={L.assign.get(0, 0):.2f} B={L.assign.get(1, 0):.2f} "
              f"wait={L.waitlist:.2f} EU={L.expected(dict(enumerate(v))):.2f}")

# entry at age 4 leaves two periods
prob = PolicyProblem(v, np.zeros(6), 4, pi1, pi2, delta=0.99, K=2)
myopic = best_single_period_rol(v, 0.0, pi1, 2), best_single_period_rol(v, 0.0, pi2, 2)
best = brute_force_solution(prob)
print(f"myopic  {show(myopic[0])} then {show(myopic[1])}: {total_value(prob, *myopic):.4f}")
print(f"optimal {show(best.R1)} then {show(best.R2)}: {best.value:.4f}")
