"""Discounted-cost scheduling of robots across polling queues with switching delays."""

from .baselines import BASELINES, Policy, esl_policy, random_policy
from .core import (
    IDLE,
    SERVE,
    ContractViolation,
    Convention,
    JointAction,
    ScenarioConfig,
    Switch,
    SystemState,
    step,
)
from .dp import DPPolicy, value_iteration
from .eaac import EAACPolicy, init_params
from .evaluation import EvalReport, compare, evaluate, simulate
from .ppo import TrainConfig, train
from .scenarios import GenSpec, generated_scenario, load_scenario

__version__ = "0.1.0"

__all__ = [
    "BASELINES",
    "ContractViolation",
    "Convention",
    "DPPolicy",
    "EAACPolicy",
    "EvalReport",
    "GenSpec",
    "IDLE",
    "JointAction",
    "Policy",
    "SERVE",
    "ScenarioConfig",
    "Switch",
    "SystemState",
    "TrainConfig",
    "compare",
    "esl_policy",
    "evaluate",
    "generated_scenario",
    "init_params",
    "load_scenario",
    "random_policy",
    "simulate",
    "step",
    "train",
    "value_iteration",
]
