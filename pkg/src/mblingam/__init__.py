"""Multiscale bootstrap p-values for the causal orderings found by LiNGAM."""
from mblingam.lingam import IcaConfig, lingam_fit
from mblingam.model import DataMatrix, HypothesisId, all_hypotheses
from mblingam.msboot import BpCountTable, ScalePlan, build_scale_plan, count_events
from mblingam.psifit import PvalueReport, compute_report

__all__ = [
    "BpCountTable",
    "DataMatrix",
    "HypothesisId",
    "IcaConfig",
    "PvalueReport",
    "ScalePlan",
    "all_hypotheses",
    "build_scale_plan",
    "compute_report",
    "count_events",
    "lingam_fit",
]
