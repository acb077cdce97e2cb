"""Exception types shared across the simulator and training stack."""


class OrigamiArmError(Exception):
    """Base class for all package-specific errors."""


class OutOfRange(OrigamiArmError, ValueError):
    """An input is outside its documented domain (e.g. chord below the floor)."""


class NoConvergence(OrigamiArmError, RuntimeError):
    """An iterative solver failed to reach its residual tolerance."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class PlateInversion(OrigamiArmError, RuntimeError):
    """A pose solve converged to a flipped (inverted) top plate."""


class PoseInfeasible(OrigamiArmError, RuntimeError):
    """No valid module pose exists for the requested chord combination."""


class DimensionMismatch(OrigamiArmError, ValueError):
    """A vector length does not match what the geometry requires."""


class SolverFailure(OrigamiArmError, RuntimeError):
    """The forward equilibrium solve failed inside the environment."""


class ConfigError(OrigamiArmError, ValueError):
    """A configuration file or value failed validation."""


class CheckpointError(OrigamiArmError, RuntimeError):
    """A checkpoint file is malformed, version-mismatched, or inconsistent."""


class NonFiniteLoss(OrigamiArmError, RuntimeError):
    """A training loss became NaN or infinite; the run is aborted."""
