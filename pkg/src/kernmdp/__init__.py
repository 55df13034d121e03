"""Kernelized reinforcement learning on continuous episodic MDPs."""

from .agents import AgentConfig, EpisodeLog, KernelUcrl, Psrl, RandomAgent, make_agent
from .env import MdpSpec, SyntheticMdp, oracle_value, step, synthesize_mdp
from .features import QffMap, NystromDictionary, build_qff, qff_error_bound, qff_schedule, resample_dictionary
from .kernels import KernelSpec, eval_kernel, gram, log_det_information
from .planner import GridPolicy, PlannerGrid, evaluate_policy, optimistic_value_iterate, value_iterate
from .regression import ConfidenceChannel, PosteriorState

__version__ = "0.1.0"
