"""Exception hierarchy shared across the package."""


class SimulationError(Exception):
    """Base class for model/runtime failures (the CLI maps these to exit code 3)."""
