"""Simulator for an entanglement-based polarization link with photon-cloning amplifiers."""

from .channel import RunConfig, estimate_channel, exact_ber, no_signaling_test, sweep_m
from .devices import AmplifierKind, AmplifierModel
from .errors import SimulationError
from .states import bell_pair, spdc_unentangled

__version__ = "0.1.0"

__all__ = [
    "AmplifierKind",
    "AmplifierModel",
    "RunConfig",
    "SimulationError",
    "bell_pair",
    "estimate_channel",
    "exact_ber",
    "no_signaling_test",
    "spdc_unentangled",
    "sweep_m",
    "__version__",
]
