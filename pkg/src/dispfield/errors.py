"""Exception types shared across the package.

Everything raised on purpose derives from DispfieldError so callers can
catch one base class at the CLI boundary and map it to an exit code.
"""


class DispfieldError(Exception):
    """Base class for all errors raised deliberately by this package."""


class ConfigError(DispfieldError):
    """A configuration value is missing, malformed, or out of range."""


class ShapeError(DispfieldError):
    """An array or tensor has the wrong shape or dtype for an operation."""


class ValidationError(DispfieldError):
    """Input data violates a documented invariant (non-unit normals,
    points outside the working cube, mismatched array lengths)."""


class ParseError(DispfieldError):
    """A mesh, cloud, or config file could not be parsed.

    Carries the path and, where known, the 1-based line number of the
    offending record so the message is actionable.
    """

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f" [{path}" + (f":{line}" if line is not None else "") + "]"
        super().__init__(message + where)


class UnsupportedFormatError(DispfieldError):
    """The file is recognized but uses a variant this package does not read
    (big-endian PLY, exotic property types)."""


class DegenerateGeometryError(DispfieldError):
    """Geometry that cannot be processed: zero-area meshes, zero-length
    normals where a unit direction is required."""


class PipelineOrderError(DispfieldError):
    """A pipeline stage was invoked before the stages it depends on."""


class InapplicableBoundError(DispfieldError):
    """A requested theoretical bound does not apply to the given field
    (gradient magnitude reaches or exceeds the regime the bound assumes)."""


class TrainingDivergence(DispfieldError):
    """Training produced a non-finite loss or gradient.

    Captures where it happened and the last finite loss terms so a run can
    be diagnosed from the exception alone.
    """

    def __init__(self, epoch, step, terms=None, detail=""):
        self.epoch = epoch
        self.step = step
        self.terms = dict(terms) if terms else {}
        msg = f"non-finite value at epoch {epoch}, step {step}"
        if detail:
            msg += f": {detail}"
        if self.terms:
            rendered = ", ".join(f"{k}={v:.6g}" for k, v in self.terms.items())
            msg += f" (last finite terms: {rendered})"
        super().__init__(msg)
