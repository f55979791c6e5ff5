"""Latent-action imitation from state-only demonstrations.

Energy-based policies over latent actions, a Gaussian transition model,
short-run Langevin sampling, maximum-likelihood training, goal planning,
the cubic-curve task and an exact tabular oracle.
"""
from .envs import CurveEnvConfig, CurveTrajectory, cubic_fit, env_step, evaluate_rollouts, sample_demos
from .model import EnergyPolicy, GaussianTransition, ModelBundle, TransitionEnsemble
from .planning import execute_policy, plan_goal
from .sampling import LangevinConfig, langevin_chain, sample_posterior_mcmc, sample_prior, importance_posterior
from .training import TrainConfig, train, train_bc

__version__ = "0.1.0"

__all__ = [
    "CurveEnvConfig", "CurveTrajectory", "cubic_fit", "env_step", "evaluate_rollouts", "sample_demos",
    "EnergyPolicy", "GaussianTransition", "ModelBundle", "TransitionEnsemble",
    "execute_policy", "plan_goal",
    "LangevinConfig", "langevin_chain", "sample_posterior_mcmc", "sample_prior", "importance_posterior",
    "TrainConfig", "train", "train_bc",
]
