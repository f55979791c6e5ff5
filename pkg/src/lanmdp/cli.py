"""Command-line entry point: gen-demos, train, eval, plan, verify, plot.

Exit codes: 0 success, 2 usage or config error, 3 numerical divergence,
4 verification failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from . import oracle
from .envs import (CurveEnvConfig, CurveTrajectory, RejectionLimitError, cubic_fit, evaluate_rollouts, read_demos,
                   sample_demos, shortest_path_reference, write_demos)
from .experiments import (CURVE_SAMPLER, curve_init_states, curve_profile, curve_step, held_out_starts,
                          make_eval_fn, policy_rollouts)
from .model import ModelBundle, make_context
from .planning import PLANNING_SAMPLER, plan_goal
from .plots import line_plot_svg, moving_average, paths_svg
from .sampling import LangevinConfig
from .training import TrainConfig, TrainingDiverged, read_metrics_csv, train

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED, EXIT_VERIFY = 0, 2, 3, 4
TRAIN_FIELDS = {f.name for f in dataclasses.fields(TrainConfig)}


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- config

def load_config(path):
    if path is None:
        return {}
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except (OSError, json.JSONDecodeError) as err:
        raise UsageError(f"cannot read config {path}: {err}") from err
    if not isinstance(cfg, dict):
        raise UsageError("config must be a JSON object")
    return cfg


def resolve(args, cfg: dict, allowed: set, defaults: dict) -> dict:
    """Flags override config-file values, which override defaults; unknown keys are rejected."""
    unknown = sorted(set(cfg) - allowed)
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    out = dict(defaults)
    out.update(cfg)
    for k, v in vars(args).items():
        if k in allowed and v is not None:
            out[k] = v
    if out.get("seed") is None:
        env_seed = os.environ.get("LANMDP_SEED")
        try:
            out["seed"] = int(env_seed) if env_seed is not None else 0
        except ValueError as err:
            raise UsageError(f"LANMDP_SEED must be an integer, got {env_seed!r}") from err
    return out


def echo(run_config: dict) -> str:
    return json.dumps(run_config, sort_keys=True, default=_jsonable)


def _jsonable(x):
    if dataclasses.is_dataclass(x):
        return dataclasses.asdict(x)
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    raise TypeError(f"not serializable: {type(x)}")


def write_json(path, obj):
    text = json.dumps(obj, sort_keys=True, indent=2, default=_jsonable) + "\n"
    if path is None:
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def _require_positive(name, value):
    if value is None or value <= 0:
        raise UsageError(f"--{name.replace('_', '-')} must be positive")


def _sampler(base: LangevinConfig, noise):
    return base if noise is None else base.replace(noise_scale=noise)


# ---------------------------------------------------------------- gen-demos

GEN_KEYS = {"n", "seed", "out", "min_a", "h"}


def cmd_gen_demos(args):
    rc = resolve(args, load_config(args.config), GEN_KEYS, {"n": 1000, "min_a": 1.0, "h": 0.1, "out": None})
    _require_positive("n", rc["n"])
    _require_positive("min_a", rc["min_a"])
    if rc["out"] is None:
        raise UsageError("--out is required")
    env = CurveEnvConfig(h=rc["h"])
    demos, ratio = sample_demos(env, rc["n"], rc["seed"], min_a=rc["min_a"])
    write_demos(rc["out"], demos, {"run_config": rc, "env": env.to_dict(), "acceptance_ratio": ratio})
    mean_a = float(np.mean([abs(d.coeffs.a) for d in demos]))
    print(f"demos {len(demos)}  mean|a| {mean_a:.4f}  rejection_ratio {1 - ratio:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------- train

TRAIN_KEYS = TRAIN_FIELDS | {"demos", "out", "metrics", "eval_rollouts", "context", "steps", "mode", "lr",
                             "prior_noise"}


def build_train_config(rc: dict) -> TrainConfig:
    fields = {k: v for k, v in rc.items() if k in TRAIN_FIELDS}
    for flag, field in (("context", "context_len"), ("steps", "iterations"), ("mode", "posterior_mode"),
                        ("lr", "lr_policy")):
        if rc.get(flag) is not None:
            fields[field] = rc[flag]
    if rc.get("prior_noise") is not None:
        s = LangevinConfig(**fields["sampler"]) if isinstance(fields.get("sampler"), dict) else CURVE_SAMPLER
        fields["sampler"] = fields["eval_sampler"] = s.replace(noise_scale=rc["prior_noise"])
    L = fields.pop("context_len", 4)
    seed = fields.pop("seed")
    try:
        return curve_profile(L, seed, **fields)
    except (TypeError, ValueError) as err:
        raise UsageError(f"invalid training config: {err}") from err


def cmd_train(args):
    rc = resolve(args, load_config(args.config), TRAIN_KEYS, {"eval_rollouts": 200})
    for key in ("demos", "out"):
        if rc.get(key) is None:
            raise UsageError(f"--{key} is required")
    cfg = build_train_config(rc)
    demos, header = _read_demos(rc["demos"])
    env = _env_from(header.get("env"))
    eval_fn = make_eval_fn(env, rc["eval_rollouts"], cfg.seed, cfg.eval_sampler) if rc["eval_rollouts"] else None
    run_config = {"cli": {k: v for k, v in rc.items() if k not in TRAIN_FIELDS}, "train_config": cfg.to_dict()}
    try:
        bundle, metrics = train(cfg, demos, curve_step(env), curve_init_states(env), eval_fn, h=env.h)
    except TrainingDiverged as err:
        ckpt = str(rc["out"]) + ".diverged.json"
        err.checkpoint.meta["run_config"] = run_config
        err.checkpoint.save(ckpt)
        print(f"training diverged: {err}; checkpoint kept at {ckpt}", file=sys.stderr)
        return EXIT_DIVERGED
    bundle.meta["run_config"] = run_config
    bundle.meta["env"] = env.to_dict()
    bundle.save(rc["out"])
    if rc.get("metrics"):
        metrics.config = run_config
        metrics.write_csv(rc["metrics"])
    last = metrics.rows[-1]
    print(f"trained L={cfg.context_len} steps={cfg.iterations}  acceptance {last['acceptance_rate']}  "
          f"residual {last['mean_residual']}")
    return EXIT_OK


def _read_demos(path):
    try:
        return read_demos(path)
    except (OSError, ValueError, KeyError) as err:
        raise UsageError(f"cannot read demos {path}: {err}") from err


def _load_model(path):
    try:
        return ModelBundle.load(path)
    except (OSError, ValueError, KeyError) as err:
        raise UsageError(f"cannot load model {path}: {err}") from err


def _env_from(d):
    if not d:
        return CurveEnvConfig()
    return CurveEnvConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def _bundle_env(bundle):
    return _env_from(bundle.meta.get("env"))


# ---------------------------------------------------------------- eval

EVAL_KEYS = {"model", "n", "seed", "out", "noise"}


def cmd_eval(args):
    rc = resolve(args, load_config(args.config), EVAL_KEYS, {"n": 200})
    _require_positive("n", rc["n"])
    if rc.get("model") is None:
        raise UsageError("--model is required")
    bundle = _load_model(rc["model"])
    env = _bundle_env(bundle)
    sampler = _sampler(CURVE_SAMPLER, rc.get("noise"))
    trajs = policy_rollouts(bundle, env, held_out_starts(env, rc["n"], rc["seed"]), sampler, rc["seed"])
    ev = evaluate_rollouts(trajs)
    report = {"run_config": rc, "sampler": sampler.to_dict(), "acceptance_rate": ev.acceptance_rate,
              "mean_residual": ev.mean_residual, "coefficients": ev.coeffs, "residuals": ev.residuals}
    write_json(rc.get("out"), report)
    if rc.get("out"):
        print(f"acceptance {ev.acceptance_rate:.3f}  residual {ev.mean_residual}")
    return EXIT_OK


# ---------------------------------------------------------------- plan

PLAN_KEYS = {"model", "prefix", "goal", "steps", "seed", "out", "summary", "init", "noise"}


def parse_points(text, name):
    """``"x,y;x,y"`` or a JSON list of pairs."""
    try:
        if text.strip().startswith("["):
            pts = np.asarray(json.loads(text), dtype=float)
        else:
            pts = np.array([[float(v) for v in p.split(",")] for p in text.split(";") if p.strip()])
    except (ValueError, TypeError, json.JSONDecodeError) as err:
        raise UsageError(f"malformed --{name}: {text!r}") from err
    pts = pts.reshape(-1, pts.shape[-1]) if pts.size else pts
    if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) == 0 or not np.all(np.isfinite(pts)):
        raise UsageError(f"malformed --{name}: expected x,y pairs, got {text!r}")
    return pts


def cmd_plan(args):
    rc = resolve(args, load_config(args.config), PLAN_KEYS, {"init": "prior"})
    for key in ("model", "prefix", "goal"):
        if rc.get(key) is None:
            raise UsageError(f"--{key} is required")
    prefix = parse_points(rc["prefix"], "prefix")
    goal = parse_points(rc["goal"], "goal")
    if len(goal) != 1:
        raise UsageError("--goal must be a single x,y point")
    goal = goal[0]
    bundle = _load_model(rc["model"])
    env = _bundle_env(bundle)
    steps = rc.get("steps")
    if steps is None:
        steps = int(round((goal[0] - prefix[-1, 0]) / env.h))
    if steps < 1:
        raise UsageError("goal must lie at least one step ahead of the prefix")
    if rc["init"] not in ("prior", "uniform"):
        raise UsageError("--init must be prior or uniform")
    ctx = make_context(prefix, bundle.policy.context_len)
    cfg = _sampler(PLANNING_SAMPLER, rc.get("noise"))
    plan = plan_goal(bundle.policy, bundle.transition, ctx, goal, steps, cfg, np.random.default_rng(rc["seed"]),
                     prior_cfg=CURVE_SAMPLER, init=rc["init"])
    path = np.concatenate([prefix, plan.predicted_states])
    coeffs, resid = cubic_fit(CurveTrajectory(path))
    ref = shortest_path_reference(prefix, goal, steps)
    ref_coeffs, ref_resid = cubic_fit(ref)
    if rc.get("out"):
        plan.write_csv(rc["out"])
    summary = {"run_config": rc, "residual_to_goal": plan.residual_to_goal, "objective": plan.objective,
               "fit_residual": resid, "fit_coeffs": coeffs.as_list(), "path": path.tolist(),
               "reference": {"path": ref.points.tolist(), "fit_coeffs": ref_coeffs.as_list(),
                             "fit_residual": ref_resid}}
    write_json(rc.get("summary"), summary)
    return EXIT_OK


# ---------------------------------------------------------------- verify

VERIFY_KEYS = {"instances", "out", "no_bundled", "skip_fit", "seed"}


def bundled_instances():
    root = resources.files("lanmdp") / "data" / "instances"
    return sorted((str(p) for p in root.iterdir() if p.name.endswith(".json")))


def cmd_verify(args):
    rc = resolve(args, load_config(args.config), VERIFY_KEYS, {"no_bundled": False, "skip_fit": False})
    paths = [] if rc["no_bundled"] else bundled_instances()
    if rc.get("instances"):
        d = Path(rc["instances"])
        if not d.is_dir():
            raise UsageError(f"instance directory {d} does not exist")
        user = sorted(str(p) for p in d.glob("*.json"))
        if not user:
            raise UsageError(f"no *.json instances in {d}")
        paths += user
    if not paths:
        raise UsageError("no instances to verify")
    report, ok = {"run_config": rc, "instances": []}, True
    for p in paths:
        try:
            tab, teacher, seqs = oracle.load_instance(p)
            checks = oracle.verify_instance(tab, teacher, seqs, include_fit=not rc["skip_fit"])
        except (OSError, ValueError) as err:
            raise UsageError(f"invalid instance {Path(p).name}: {err}") from err
        entry = {"instance": Path(p).name, "checks": [
            {"name": c.name, "max_deviation": c.value, "tolerance": c.tolerance, "passed": c.passed} for c in checks]}
        report["instances"].append(entry)
        for c in checks:
            ok &= c.passed
            print(f"{'PASS' if c.passed else 'FAIL'}  {Path(p).name:28s} {c.name:34s} {c.value:.3e} < {c.tolerance:.0e}")
    report["passed"] = ok
    if rc.get("out"):
        write_json(rc["out"], report)
    return EXIT_OK if ok else EXIT_VERIFY


# ---------------------------------------------------------------- plot

PLOT_KEYS = {"metrics", "trajectories", "out_dir", "window", "seed"}


def cmd_plot(args):
    rc = resolve(args, load_config(args.config), PLOT_KEYS, {"window": 5, "out_dir": "."})
    _require_positive("window", rc["window"])
    if not rc.get("metrics") and not rc.get("trajectories"):
        raise UsageError("give --metrics and/or --trajectories")
    out_dir = Path(rc["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    header = echo(rc)
    written = []
    for path in rc.get("metrics") or []:
        try:
            rows = read_metrics_csv(path)
        except (OSError, ValueError, KeyError) as err:
            raise UsageError(f"malformed metrics CSV {path}: {err}") from err
        if not rows:
            raise UsageError(f"metrics CSV {path} has no rows")
        steps = [r["step"] for r in rows]
        stem = Path(path).stem
        for col in ("acceptance_rate", "mean_residual"):
            smooth = moving_average([r[col] for r in rows], rc["window"])
            target = out_dir / f"{stem}_{col}.svg"
            target.write_text(line_plot_svg({stem: (steps, smooth)}, title=col.replace("_", " "), ylabel=col,
                                            header=header))
            written.append(target)
    for path in rc.get("trajectories") or []:
        demos, _ = _read_demos(path)
        target = out_dir / f"{Path(path).stem}_paths.svg"
        target.write_text(paths_svg([d.points for d in demos], title=Path(path).stem, header=header))
        written.append(target)
    for t in written:
        print(t)
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser():
    p = argparse.ArgumentParser(prog="lanmdp", description="Latent-action imitation from state-only demonstrations.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON config file; flags override its values")
        sp.add_argument("--seed", type=int, help="master seed (falls back to LANMDP_SEED, then 0)")

    g = sub.add_parser("gen-demos", help="rejection-sample cubic demonstrations")
    common(g)
    g.add_argument("--n", type=int)
    g.add_argument("--out")
    g.add_argument("--min-a", dest="min_a", type=float)
    g.add_argument("--h", type=float)
    g.set_defaults(func=cmd_gen_demos)

    t = sub.add_parser("train", help="train a policy on a demo file")
    common(t)
    t.add_argument("--demos")
    t.add_argument("--out", help="model bundle JSON")
    t.add_argument("--metrics", help="metrics CSV")
    t.add_argument("--context", type=int)
    t.add_argument("--steps", type=int)
    t.add_argument("--mode", choices=["importance", "mcmc"])
    t.add_argument("--lr", type=float)
    t.add_argument("--prior-noise", dest="prior_noise", type=float)
    t.add_argument("--eval-rollouts", dest="eval_rollouts", type=int)
    t.add_argument("--eval-interval", dest="eval_interval", type=int)
    t.add_argument("--transition-mode", dest="transition_mode", choices=["implanted", "learned"])
    t.add_argument("--w-beta", dest="w_beta", type=float)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score policy rollouts")
    common(e)
    e.add_argument("--model")
    e.add_argument("--n", type=int)
    e.add_argument("--noise", type=float, help="sampler noise scale")
    e.add_argument("--out", help="report JSON (stdout if omitted)")
    e.set_defaults(func=cmd_eval)

    pl = sub.add_parser("plan", help="plan toward a goal state")
    common(pl)
    pl.add_argument("--model")
    pl.add_argument("--prefix", help='observed states, "x,y;x,y" or JSON pairs')
    pl.add_argument("--goal", help='"x,y"')
    pl.add_argument("--steps", type=int, help="steps to go (default from the goal's x)")
    pl.add_argument("--init", choices=["prior", "uniform"])
    pl.add_argument("--noise", type=float)
    pl.add_argument("--out", help="plan CSV")
    pl.add_argument("--summary", help="summary JSON (stdout if omitted)")
    pl.set_defaults(func=cmd_plan)

    v = sub.add_parser("verify", help="run the exact tabular identity suite")
    common(v)
    v.add_argument("--instances", help="directory of extra instance JSON files")
    v.add_argument("--no-bundled", dest="no_bundled", action="store_true", default=None)
    v.add_argument("--skip-fit", dest="skip_fit", action="store_true", default=None)
    v.add_argument("--out", help="report JSON")
    v.set_defaults(func=cmd_verify)

    pt = sub.add_parser("plot", help="render metrics and trajectories as SVG")
    common(pt)
    pt.add_argument("--metrics", nargs="+")
    pt.add_argument("--trajectories", nargs="+")
    pt.add_argument("--window", type=int)
    pt.add_argument("--out-dir", dest="out_dir")
    pt.set_defaults(func=cmd_plot)
    return p


POINT_FLAGS = ("--prefix", "--goal")


def _join_point_flags(argv):
    """Let ``--prefix -1,0.2`` through; argparse would read the value as a flag."""
    out, it = [], iter(argv)
    for tok in it:
        if tok in POINT_FLAGS:
            nxt = next(it, None)
            out.append(tok if nxt is None else f"{tok}={nxt}")
        else:
            out.append(tok)
    return out


def main(argv=None):
    parser = build_parser()
    argv = _join_point_flags(sys.argv[1:] if argv is None else list(argv))
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        return args.func(args)
    except UsageError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except RejectionLimitError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except FloatingPointError as err:
        print(f"numerical divergence: {err}", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
