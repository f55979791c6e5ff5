"""Planning toward a goal with a trained policy and transition model.

Uses notebooks/out/model_L4.json from 02_context_length.py if present,
otherwise trains a short L=4 model first.
"""
from pathlib import Path

import numpy as np

from lanmdp.experiments import run_context_experiment, run_planning_experiment
from lanmdp.model import ModelBundle
from lanmdp.plots import paths_svg

OUT = Path(__file__).parent / "out"
OUT.mkdir(exist_ok=True)
path = OUT / "model_L4.json"

if path.exists():
    bundle = ModelBundle.load(path)
else:
    bundle = run_context_experiment(4, seed=0, iterations=1000).bundle
    bundle.save(path)

# plan from the first four points of held-out demos to their endpoints
goals = run_planning_experiment(bundle, n_goals=10, seed=0)
for g in goals:
    print(f"goal error {g.goal_error:.4f}  planned a {g.fit_a:+.2f}  straight reference a {g.reference_a:+.2f}"
          f"  demo a {g.demo_a:+.2f}")

# a straight path would reach each goal just as well; the planned ones keep the demo curvature
curved = np.mean([abs(g.fit_a) > 0.5 for g in goals])
print(f"fraction of planned paths with |a| > 0.5: {curved:.2f}")
(OUT / "plans.svg").write_text(paths_svg([g.path for g in goals], title="planned paths"))
print("wrote", OUT / "plans.svg")
