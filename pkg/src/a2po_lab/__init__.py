"""Tabular laboratory for sequential multi-agent trust-region policy optimization."""

from .advantage import AdvantageField, ValueTable, fit_value, gae, preopc, td_residuals, vtrace_advantage
from .decmdp import (CorruptBatchError, DecMdp, DecMdpError, JointPolicy, RolloutBatch, TabularPolicy,
                     empirical_return, joint_prob, rollout)
from .oracle import (BoundReport, ExactEval, bound_report, exact_eval, exact_preopc_error, joint_tv_max,
                     performance_difference, transition_shift, tv_max)
from .trainer import TrainerConfig, adaptive_clip, clipped_surrogate, select_next_agent, train

__all__ = [
    "AdvantageField", "ValueTable", "fit_value", "gae", "preopc", "td_residuals", "vtrace_advantage",
    "CorruptBatchError", "DecMdp", "DecMdpError", "JointPolicy", "RolloutBatch", "TabularPolicy",
    "empirical_return", "joint_prob", "rollout",
    "BoundReport", "ExactEval", "bound_report", "exact_eval", "exact_preopc_error", "joint_tv_max",
    "performance_difference", "transition_shift", "tv_max",
    "TrainerConfig", "adaptive_clip", "clipped_surrogate", "select_next_agent", "train",
]
