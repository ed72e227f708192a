"""Exception taxonomy shared by all baf modules.

Every error carries an ``exit_code`` so the CLI can map failures onto its
documented exit statuses:

  2  configuration problems (bad flags, unusable paths, invalid keymaps)
  3  unreadable or corrupt checkpoint files
  4  pairing failures in strict mode
  5  numerical failures (bad matrices, degenerate spectra, non-convergence)
"""

EXIT_CONFIG = 2
EXIT_PARSE = 3
EXIT_PAIRING = 4
EXIT_NUMERIC = 5


class BafError(Exception):
    """Base class for all expected failures raised by this package."""

    exit_code = 1


class ConfigError(BafError):
    """Invalid configuration: flags, paths, keymap files, gate settings."""

    exit_code = EXIT_CONFIG


# --- checkpoint wire format ------------------------------------------------

class ParseError(BafError):
    """Structurally malformed checkpoint header."""

    exit_code = EXIT_PARSE


class CorruptFile(BafError):
    """Header and payload disagree: bad offsets, overlaps, truncation."""

    exit_code = EXIT_PARSE


class UnsupportedDtype(BafError):
    """Tensor dtype outside the supported {f64, f32, f16, bf16} set."""

    exit_code = EXIT_PARSE


# --- layer pairing ----------------------------------------------------------

class UnmatchedLayer(BafError):
    """A LoRA factor stem could not be resolved to a base weight (strict mode)."""

    exit_code = EXIT_PAIRING


class ShapeMismatch(BafError):
    """Paired tensors have inconsistent dimensions."""

    exit_code = EXIT_PAIRING


# --- numerics ---------------------------------------------------------------

class InvalidMatrix(BafError):
    """Matrix input contains NaN/Inf or is not a 2-D real array."""

    exit_code = EXIT_NUMERIC


class SvdNoConvergence(BafError):
    """SVD iteration failed to converge within the sweep cap."""

    exit_code = EXIT_NUMERIC


class NotUnitVector(BafError):
    """Vector expected to have unit 2-norm is off beyond tolerance."""

    exit_code = EXIT_NUMERIC


class DimensionMismatch(BafError):
    """Operands have incompatible dimensions."""

    exit_code = EXIT_NUMERIC


class EmptyChannelSet(BafError):
    """No spectral channels supplied and no output shape to fall back on."""

    exit_code = EXIT_NUMERIC


class ZeroSpectrum(BafError):
    """All singular values are zero; no principal subspace exists."""

    exit_code = EXIT_NUMERIC


class UnsortedSpectrum(BafError):
    """Singular values are not a non-increasing non-negative sequence."""

    exit_code = EXIT_NUMERIC


class PlantCapacity(BafError):
    """Requested more planted channels than the subspace geometry allows."""

    exit_code = EXIT_NUMERIC
