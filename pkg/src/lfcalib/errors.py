"""Exception types shared across the toolkit."""


class LfcalibError(Exception):
    """Base class for all toolkit errors."""


class GeometryError(LfcalibError):
    """Degenerate or singular geometric configuration (point at infinity,
    ray parallel to a plane, zero depth, focal-surface singularity)."""


class EstimationError(LfcalibError):
    """Estimation cannot proceed: too little data, rank deficiency, or a
    degenerate solution."""


class DetectionError(LfcalibError):
    """Corner/line detection failed (no signal, unrecoverable topology)."""


class InputError(LfcalibError):
    """Invalid user input: missing files, malformed configs, bad geometry
    specifications.  CLI maps this to exit code 2."""
