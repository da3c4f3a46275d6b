"""Why the bundled oscillator relaxations become infeasible.

The windowed statistic only exists once a path has stayed inside the state
set for a full window.  With the bundled drift every trajectory leaves the
box long before ``h`` has elapsed, so the occupation-measure program has no
feasible point and the higher orders detect that.
"""

import numpy as np

from windowrisk import load_problem
from windowrisk.certify import solve_bound
from windowrisk.montecarlo import simulate

problem = load_problem("oscillator")
batch = simulate(problem, 200, dt=1e-3, seed=0)
exit_times = batch.times[batch.stop_index - 1]
print(f"window length h = {problem.window}")
print(f"exit times: min {exit_times.min():.3f}, median {np.median(exit_times):.3f}, max {exit_times.max():.3f}")
last = batch.states[np.arange(batch.count), batch.stop_index - 1]
print(f"mean state just before exit: {last.mean(axis=0).round(3)} (box {problem.state_set.bounding_box()})")

for k in (1, 2, 3):
    r = solve_bound(problem, k)
    print(f"k={k}: {r.solution.status} {r.bound:.4f}  ({r.solution.message})")
