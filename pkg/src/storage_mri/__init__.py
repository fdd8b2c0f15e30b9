"""Storage capacity accreditation by marginal reliability impact (MRI)."""

__version__ = "0.1.0"

from .accredit import QcPolicy, accredit, aggregate_by_duration, verify_qmric_invariance
from .dispatch import StorageDevice, run_dispatch, run_reliability_dispatch, run_simple_dispatch
from .errors import AccreditationUndefined, InvariantViolation, SolverError, ValidationError
from .metrics import Standards, compute_metrics, icr_sweep
from .mri import MriResult, dual_mri, mri_perturbation, perfect_mri
from .scenario import LoadTrace, MonteCarloEnsemble, SurplusProfile, ThermalUnit, generate_ensemble

__all__ = [
    "AccreditationUndefined", "InvariantViolation", "LoadTrace", "MonteCarloEnsemble", "MriResult", "QcPolicy",
    "SolverError", "Standards", "StorageDevice", "SurplusProfile", "ThermalUnit", "ValidationError", "accredit",
    "aggregate_by_duration", "compute_metrics", "dual_mri", "generate_ensemble", "icr_sweep", "mri_perturbation",
    "perfect_mri", "run_dispatch", "run_reliability_dispatch", "run_simple_dispatch", "verify_qmric_invariance",
]
