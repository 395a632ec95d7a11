"""Bound evaluators. Every evaluator returns a :class:`BoundReport`."""
from .exact import exact_gibbs_risk, exact_phi1, exact_phi1a, exact_phi2, exact_phi2b
from .pac import eta_g1, gibbs_risk, phi1, phi1b, phi2_meta
from .report import BoundConfig, BoundReport, ConfigError
from .second_order import (AuxiliarySample, ConstantG, DiscreteG, GaussianG, GaussianG2, MetaTask, ThresholdRule,
                           build_aux_sample, epsilon, p1, phi_2o_cplx, phi_2o_cplx_ml, privacy_transform, risk_tau)
from .variational import PoisonedObjectiveError, VariationalNets, phi1a, phi2b_variational

__all__ = [
    "AuxiliarySample", "BoundConfig", "BoundReport", "ConfigError", "ConstantG", "DiscreteG", "GaussianG",
    "GaussianG2", "MetaTask", "PoisonedObjectiveError", "ThresholdRule", "VariationalNets", "build_aux_sample",
    "epsilon", "eta_g1", "exact_gibbs_risk", "exact_phi1", "exact_phi1a", "exact_phi2", "exact_phi2b",
    "gibbs_risk", "p1", "phi1", "phi1a", "phi1b", "phi2_meta", "phi2b_variational", "phi_2o_cplx",
    "phi_2o_cplx_ml", "privacy_transform", "risk_tau",
]
