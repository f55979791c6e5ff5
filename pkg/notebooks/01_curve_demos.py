"""Cubic-curve demonstrations: generation, fitting, and why a short context cannot see them.

Run: python notebooks/01_curve_demos.py   (writes notebooks/out/demos_paths.svg)
"""
from pathlib import Path

import numpy as np

from lanmdp.envs import (CurveEnvConfig, cubic_fit, evaluate_rollouts, finite_difference_jerk, recover_actions,
                         sample_demos, shortest_path_reference)
from lanmdp.plots import paths_svg

OUT = Path(__file__).parent / "out"
OUT.mkdir(exist_ok=True)

env = CurveEnvConfig()
print("grid", env.grid[:3], "...", env.grid[-1], "horizon", env.horizon)

# rejection sampling keeps curves with a strong cubic term that stay inside the box
demos, ratio = sample_demos(env, 200, seed=0)
print(f"{len(demos)} demos, acceptance ratio {ratio:.3f}")
print("first demo coefficients (a, b, c, d):", np.round(demos[0].coeffs.as_list(), 3))

# the environment is y' = y + a, so actions are just the y increments
acts = recover_actions(demos[0])
print("recovered actions:", np.round(acts[:5], 3), "...")

# the cubic term only shows up in the third difference, which needs four states
print("jerk at t=3..5:", [round(finite_difference_jerk(demos[0], t), 3) for t in range(3, 6)],
      " 6a =", round(6 * demos[0].coeffs.a, 3))

# demos pass the acceptance test by construction, a straight line does not
ev = evaluate_rollouts(demos)
print(f"demo acceptance {ev.acceptance_rate:.2f}, mean residual {ev.mean_residual:.2e}")
line = shortest_path_reference(demos[0].points[:1], demos[0].points[-1], env.horizon)
coeffs, resid = cubic_fit(line)
print(f"straight reference: fitted a = {coeffs.a:.2e}, residual {resid:.2e}")

(OUT / "demos_paths.svg").write_text(paths_svg([d.points for d in demos[:30]], title="cubic demos"))
print("wrote", OUT / "demos_paths.svg")
