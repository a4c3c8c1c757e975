"""Diagnose representation bias in small multi-attribute CNNs."""

__version__ = "0.1.0"

from .errors import DiagnosticError, ReprBiasError, ValidationError  # noqa: E402
from .micronet import MicroNet, NetworkConfig, forward, grad_at_probe  # noqa: E402
from .pipeline import DiagnosisConfig, diagnose  # noqa: E402

__all__ = [
    "DiagnosisConfig",
    "DiagnosticError",
    "MicroNet",
    "NetworkConfig",
    "ReprBiasError",
    "ValidationError",
    "diagnose",
    "forward",
    "grad_at_probe",
]
