"""Cubic-curve path planning task.

States are ``(x, y)`` points, the action is the increment ``dy`` and ``x``
advances by a fixed ``h`` each step.  Demonstrations are cubic polynomials
drawn by rejection sampling over Hermite endpoint data.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, asdict

import numpy as np

DEMO_FORMAT_VERSION = 1


@dataclass(frozen=True)
class CurveEnvConfig:
    h: float = 0.1
    x_range: tuple = (-1.0, 1.0)
    y_range: tuple = (-1.0, 1.0)
    slope_range: tuple = (-4.0, 4.0)

    def __post_init__(self):
        if self.h <= 0:
            raise ValueError("h must be positive")
        if self.horizon < 4:
            raise ValueError("horizon must be >= 4 for a cubic to be identifiable")

    @property
    def horizon(self) -> int:
        return int(round((self.x_range[1] - self.x_range[0]) / self.h))

    @property
    def grid(self) -> np.ndarray:
        return self.x_range[0] + self.h * np.arange(self.horizon + 1)

    def to_dict(self):
        return asdict(self)


@dataclass
class CubicCoeffs:
    a: float
    b: float
    c: float
    d: float

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        return ((self.a * x + self.b) * x + self.c) * x + self.d

    def as_list(self):
        return [self.a, self.b, self.c, self.d]


@dataclass
class CurveTrajectory:
    points: np.ndarray
    coeffs: CubicCoeffs | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 2)

    @property
    def x(self):
        return self.points[:, 0]

    @property
    def y(self):
        return self.points[:, 1]

    def __len__(self):
        return len(self.points)


class RejectionLimitError(RuntimeError):
    pass


def env_step(cfg: CurveEnvConfig, state, action):
    state = np.asarray(state, dtype=float)
    dy = np.asarray(action, dtype=float)[..., 0]
    return np.stack([state[..., 0] + cfg.h, state[..., 1] + dy], axis=-1)


def hermite_cubic(y_left, y_right, slope_left, slope_right, x0=-1.0, x1=1.0) -> CubicCoeffs:
    """Cubic with given values and slopes at x0 and x1."""
    rows = [[x0 ** 3, x0 ** 2, x0, 1.0], [x1 ** 3, x1 ** 2, x1, 1.0],
            [3 * x0 ** 2, 2 * x0, 1.0, 0.0], [3 * x1 ** 2, 2 * x1, 1.0, 0.0]]
    sol = np.linalg.solve(np.array(rows), np.array([y_left, y_right, slope_left, slope_right], dtype=float))
    return CubicCoeffs(*map(float, sol))


def accept_demo(cfg: CurveEnvConfig, coeffs: CubicCoeffs, min_a=1.0) -> bool:
    if abs(coeffs.a) < min_a:
        return False
    y = coeffs(cfg.grid)
    lo, hi = cfg.y_range
    return bool(np.all((y >= lo - 1e-12) & (y <= hi + 1e-12)))


def sample_cubic_demo(cfg: CurveEnvConfig, rng, min_a=1.0, max_tries=100_000) -> CurveTrajectory:
    if min_a <= 0:
        raise ValueError("min_a must be positive")
    traj, _ = _sample_with_count(cfg, rng, min_a, max_tries)
    return traj


def _sample_with_count(cfg, rng, min_a, max_tries):
    x0, x1 = cfg.x_range
    best_a = 0.0
    for tries in range(1, max_tries + 1):
        y0, y1 = rng.uniform(*cfg.y_range, size=2)
        m0, m1 = rng.uniform(*cfg.slope_range, size=2)
        coeffs = hermite_cubic(y0, y1, m0, m1, x0, x1)
        best_a = max(best_a, abs(coeffs.a))
        if accept_demo(cfg, coeffs, min_a):
            x = cfg.grid
            return CurveTrajectory(np.stack([x, coeffs(x)], axis=1), coeffs), tries
    raise RejectionLimitError(f"no demo accepted in {max_tries} draws (min_a={min_a}, largest |a| seen {best_a:.3f})")


def sample_demos(cfg: CurveEnvConfig, n: int, seed: int, min_a=1.0):
    """``n`` demos plus the overall acceptance ratio of the rejection sampler."""
    rng = np.random.default_rng(seed)
    demos, total = [], 0
    for _ in range(n):
        traj, tries = _sample_with_count(cfg, rng, min_a, 100_000)
        demos.append(traj)
        total += tries
    return demos, (n / total if total else 0.0)


def recover_actions(traj) -> np.ndarray:
    pts = traj.points if isinstance(traj, CurveTrajectory) else np.asarray(traj, dtype=float)
    if len(pts) < 2:
        raise ValueError("need at least two points to recover actions")
    return np.diff(pts[:, 1])[:, None]


def cubic_fit(traj):
    """Least-squares cubic through the points; returns (coeffs, mean squared residual)."""
    pts = traj.points if isinstance(traj, CurveTrajectory) else np.asarray(traj, dtype=float)
    if len(pts) < 4:
        raise ValueError("need at least four points for a cubic fit")
    x, y = pts[:, 0], pts[:, 1]
    vander = np.stack([x ** 3, x ** 2, x, np.ones_like(x)], axis=1)
    sol, *_ = np.linalg.lstsq(vander, y, rcond=None)
    resid = float(np.mean((vander @ sol - y) ** 2))
    return CubicCoeffs(*map(float, sol)), resid


@dataclass
class RolloutEvaluation:
    acceptance_rate: float
    mean_residual: float | None
    coeffs: list
    residuals: list


def evaluate_rollouts(trajs, accept_a=0.5, residual_min_acceptance=0.05) -> RolloutEvaluation:
    """Acceptance = fraction with fitted |a| > accept_a; residual averaged over accepted.

    The residual is reported as None unless acceptance exceeds
    ``residual_min_acceptance``.
    """
    trajs = list(trajs)
    if not trajs:
        raise ValueError("no trajectories to evaluate")
    coeffs, resids = zip(*(cubic_fit(t) for t in trajs))
    accepted = [abs(c.a) > accept_a for c in coeffs]
    rate = sum(accepted) / len(trajs)
    mean_res = None
    if rate > residual_min_acceptance:
        mean_res = float(np.mean([r for r, ok in zip(resids, accepted) if ok]))
    return RolloutEvaluation(rate, mean_res, [c.as_list() for c in coeffs], list(resids))


def finite_difference_jerk(traj, t: int, h=None) -> float:
    """Backward third difference (y_t - 3y_{t-1} + 3y_{t-2} - y_{t-3}) / h^3."""
    pts = traj.points if isinstance(traj, CurveTrajectory) else np.asarray(traj, dtype=float)
    if t < 3 or t >= len(pts):
        raise IndexError(f"third difference needs 3 <= t < {len(pts)}, got {t}")
    if h is None:
        h = pts[1, 0] - pts[0, 0]
    y = pts[:, 1]
    return float((y[t] - 3 * y[t - 1] + 3 * y[t - 2] - y[t - 3]) / h ** 3)


def shortest_path_reference(ctx_states, goal, steps: int, h=None) -> CurveTrajectory:
    """Straight path in y from the current state to the goal, equal dy per step."""
    ctx_states = np.asarray(ctx_states, dtype=float).reshape(-1, 2)
    if steps < 1:
        raise ValueError("no remaining steps")
    cur = ctx_states[-1]
    goal = np.asarray(goal, dtype=float)
    if h is None:
        h = (goal[0] - cur[0]) / steps
    dy = (goal[1] - cur[1]) / steps
    k = np.arange(steps + 1)
    pts = np.stack([cur[0] + h * k, cur[1] + dy * k], axis=1)
    pts[-1, 1] = goal[1]
    return CurveTrajectory(pts)


def write_demos(path, demos, header: dict | None = None):
    with open(path, "w") as fh:
        fh.write(json.dumps({"format_version": DEMO_FORMAT_VERSION, **(header or {})}, sort_keys=True) + "\n")
        for d in demos:
            rec = {"points": d.points.tolist(), "coeffs": d.coeffs.as_list() if d.coeffs else None}
            fh.write(json.dumps(rec) + "\n")


def read_demos(path):
    with open(path) as fh:
        header = json.loads(fh.readline())
        if header.get("format_version") != DEMO_FORMAT_VERSION:
            raise ValueError(f"unsupported demo file version {header.get('format_version')!r}")
        demos = []
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                coeffs = CubicCoeffs(*rec["coeffs"]) if rec.get("coeffs") else None
                demos.append(CurveTrajectory(rec["points"], coeffs))
    return demos, header
