"""Distributionally robust data-mixture scheduling for multi-domain training."""

from .domain import (DomainSet, LossRecord, SchedulerConfig, as_ratio, chi_sq_divergence,
                     normalize, temperature_smooth)
from .dro import ema_update, excess_loss, truncate_floor, worst_case_weights
from .exceptions import (DomainMismatchError, FitFailureError, InsufficientHistoryError,
                         InvalidInputError, OutOfOrderStepError, RobustMixError)
from .formats import RunManifest
from .pruning import (ARCHITECTURES, HardConcreteParams, MaskSet, TargetConfig, hc_open_prob,
                      hc_sample, lagrangian_penalty, mask_similarity, select_mask, validate_target)
from .scaling import (FitHistory, PowerLawCurve, ScalingFit, fit_power_law, huber,
                      update_reference_loss)
from .scheduler import (DataMixtureScheduler, SchedulerState, clamp_then_renormalize, init,
                        on_evaluation)
from .simulator import (SimScenario, SyntheticDomain, Trajectory, compare_strategies,
                        domain_loss, preset, sheared_weights, simulate, summarize)

__version__ = "0.1.0"

__all__ = [
    "ARCHITECTURES", "DataMixtureScheduler", "DomainMismatchError", "DomainSet",
    "FitFailureError", "FitHistory", "HardConcreteParams", "InsufficientHistoryError",
    "InvalidInputError", "LossRecord", "MaskSet", "OutOfOrderStepError", "PowerLawCurve",
    "RobustMixError", "RunManifest", "ScalingFit", "SchedulerConfig", "SchedulerState",
    "SimScenario", "SyntheticDomain", "TargetConfig", "Trajectory", "as_ratio",
    "chi_sq_divergence", "clamp_then_renormalize", "compare_strategies", "domain_loss",
    "ema_update", "excess_loss", "fit_power_law", "hc_open_prob", "hc_sample", "huber", "init",
    "lagrangian_penalty", "mask_similarity", "normalize", "on_evaluation", "preset",
    "select_mask", "sheared_weights", "simulate", "summarize", "temperature_smooth",
    "truncate_floor", "update_reference_loss", "validate_target", "worst_case_weights",
]
