"""
Exception hierarchy of the package.

Every error raised on purpose derives from `TerraError`, so that callers (and the command line) can tell expected failures from bugs.
"""


class TerraError(Exception):
    "Base class of all expected failures."


class ConfigurationError(TerraError, ValueError):
    "Invalid or inconsistent configuration value."


class ContractError(TerraError, ValueError):
    "A function was called with arguments violating its preconditions."


class ShapeError(ContractError):
    "Array shapes are incompatible (no silent padding or cropping is done)."


class DataError(TerraError, ValueError):
    "Raster or tile content is unusable (non-finite values, wrong dtype...)."


class SynthesisError(TerraError, RuntimeError):
    "Scene generation could not satisfy the requested densities."


class IngestionError(TerraError, ValueError):
    "An external raster could not be turned into an ElevationRaster."


class TransferError(TerraError, ValueError):
    "Weights cannot be transferred between two network configurations."


class NumericError(TerraError, ArithmeticError):
    "A loss or an activation became non-finite."


class MissingArtifactError(TerraError, FileNotFoundError):
    "A required file or directory (checkpoint, manifest, run) does not exist."
