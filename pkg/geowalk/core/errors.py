"""
Error hierarchy - every failure carries a detail message and the exit code
its command terminates with
"""

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_DEPENDENCY = 3


class GeoWalkError(Exception):
    """Base error for the package"""

    exit_code = EXIT_FAILURE

    def __init__(self, detail: str, exit_code: int = None):
        super().__init__(detail)
        self.detail = detail
        if exit_code is not None:
            self.exit_code = exit_code

    def __str__(self):
        return self.detail


class InvalidSpecError(GeoWalkError):
    """Manifold kind and curvature sign disagree"""

    exit_code = EXIT_USAGE


class DimensionError(GeoWalkError):
    """Array shapes do not line up"""


class InvalidTangentError(GeoWalkError):
    """Vector is not tangent at its base point"""


class UndefinedLogarithmError(GeoWalkError):
    """Logarithm requested for an antipodal pair on the sphere"""


class OutOfDomainError(GeoWalkError):
    """Point lies outside (or on the boundary of) the Poincare ball"""


class DegenerateDirectionError(GeoWalkError):
    """Normalization of a near-zero vector"""


class NormalizationError(GeoWalkError):
    """A modality input has zero L2 norm"""

    def __init__(self, modality: str, detail: str = None):
        super().__init__(detail or f"modality '{modality}' has zero norm and cannot be L2-normalized")
        self.modality = modality


class DivergenceError(GeoWalkError):
    """Training produced a non-finite loss"""

    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite loss {loss} at step {step}")
        self.step = step
        self.loss = loss


class EmptyInputError(GeoWalkError):
    """An aggregate was requested over no records"""


class UndefinedVarianceError(GeoWalkError):
    """R2 requested for constant targets"""


class CatalogValidationError(GeoWalkError):
    exit_code = EXIT_USAGE


class ConfigurationError(GeoWalkError):
    exit_code = EXIT_USAGE


class GraphParseError(GeoWalkError):
    """Malformed graph file"""

    exit_code = EXIT_USAGE

    def __init__(self, detail: str, line: int = None, offset: int = None):
        location = ""
        if line is not None:
            location = f" (line {line}" + (f", offset {offset})" if offset is not None else ")")
        super().__init__(f"{detail}{location}")
        self.line = line
        self.offset = offset


class GraphVersionError(GeoWalkError):
    exit_code = EXIT_USAGE


class CheckpointError(GeoWalkError):
    exit_code = EXIT_USAGE


class DependencyMissingError(GeoWalkError):
    """An upstream artifact required by a command does not exist"""

    exit_code = EXIT_DEPENDENCY

    def __init__(self, path: str, produced_by: str = None):
        hint = f"; run '{produced_by}' first" if produced_by else ""
        super().__init__(f"missing required artifact: {path}{hint}")
        self.path = path


class CheckFailedError(GeoWalkError):
    """One or more invariant checks failed"""

    exit_code = EXIT_FAILURE
