"""Training energy policies with different context lengths on the curve task.

A full run is 3000 iterations per model; ITERATIONS below is smaller so the
script finishes in a few minutes.  Set it to 3000 to match the acceptance suite.
"""
from pathlib import Path

from lanmdp.experiments import run_bc_experiment, run_context_experiment
from lanmdp.plots import line_plot_svg, moving_average

ITERATIONS = 1000
OUT = Path(__file__).parent / "out"
OUT.mkdir(exist_ok=True)

runs = {}
for L in (1, 2, 4):
    run = run_context_experiment(L, seed=0, iterations=ITERATIONS, eval_interval=ITERATIONS // 5)
    runs[L] = run
    print(f"L={L}: acceptance {run.acceptance_rate:.3f}, residual {run.mean_residual}")

# smoothed acceptance curves, one line per context length
series = {}
for L, run in runs.items():
    rows = run.metrics.rows
    series[f"L={L}"] = ([r["step"] for r in rows], moving_average([r["acceptance_rate"] for r in rows], 3))
(OUT / "acceptance_by_context.svg").write_text(line_plot_svg(series, title="acceptance rate", ylabel="rate"))

# behavior cloning with the same contexts, for comparison
for L in (1, 2):
    bc = run_bc_experiment(L, seed=0, epochs=50)
    print(f"BC L={L}: acceptance {bc.acceptance_rate:.3f}, near-straight fraction {bc.straight_fraction:.3f}")

runs[4].bundle.save(OUT / "model_L4.json")
print("saved", OUT / "model_L4.json")
