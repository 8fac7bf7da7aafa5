"""EEG Topographic Representation Module (TRM) on a small numpy CNN substrate."""

from .errors import NumericalError, TrmError, ValidationError
from .montage import (
    Montage,
    TopographicTensor,
    gather_from_topographic,
    load_montage,
    map_to_topographic,
    shipped_montage,
)
from .trm import KernelSchedule, KernelStep, TrmModule, count_parameters, derive_schedule
from .hostnet import ClassifierModel, HostNetConfig, build_model
from .metrics import PairedTTestResult, accuracy, paired_ttest

__version__ = "0.1.0"

__all__ = [
    "ClassifierModel",
    "HostNetConfig",
    "KernelSchedule",
    "KernelStep",
    "Montage",
    "NumericalError",
    "PairedTTestResult",
    "TopographicTensor",
    "TrmError",
    "TrmModule",
    "ValidationError",
    "accuracy",
    "build_model",
    "count_parameters",
    "derive_schedule",
    "gather_from_topographic",
    "load_montage",
    "map_to_topographic",
    "paired_ttest",
    "shipped_montage",
]
