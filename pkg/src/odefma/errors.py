"""Exception hierarchy shared by all modules."""


class OdeFmaError(Exception):
    """Base class for every error raised by this package."""


class NumericalError(OdeFmaError):
    """A computation produced an unusable numerical result."""


class IntegrationOverflowError(NumericalError):
    def __init__(self, stage: str, t: float):
        self.stage = stage
        self.t = t
        super().__init__(f"non-finite value in RK4 stage {stage} at t={t!r}")


class TruncatedTrajectoryError(NumericalError):
    def __init__(self, last_valid_index: int, bound: float):
        self.last_valid_index = last_valid_index
        self.bound = bound
        super().__init__(
            f"trajectory exceeded |y| > {bound:g}; last valid row is {last_valid_index}"
        )


class StepAlignmentError(OdeFmaError, ValueError):
    def __init__(self, h: float, delta: float):
        self.h = h
        self.delta = delta
        ratio = h / (2.0 * delta)
        super().__init__(
            f"step h={h!r} must be an even multiple of the sampling interval {delta!r}: "
            f"s = h/(2*delta) = {ratio!r} is required to be a positive integer"
        )


class InsufficientDataError(OdeFmaError, ValueError):
    pass


class RankDeficiencyError(NumericalError):
    def __init__(self, matrix: str, condition: float):
        self.matrix = matrix
        self.condition = condition
        super().__init__(f"{matrix} is singular or ill-conditioned (condition number {condition:.3e})")


class SubmodelCollinearityError(NumericalError):
    def __init__(self, included, condition: float):
        self.included = tuple(included)
        self.condition = condition
        super().__init__(
            f"submodel with auxiliaries {self.included} is collinear (condition number {condition:.3e})"
        )


class NonPositiveVarianceError(NumericalError):
    def __init__(self, index: int, value: float):
        self.index = index
        self.value = value
        super().__init__(f"submodel {index} has non-positive residual variance {value!r}")


class ShapeError(OdeFmaError, ValueError):
    pass


class InfeasibleWeightsError(NumericalError):
    def __init__(self, rho: float, tightest_mass: float):
        self.rho = rho
        self.tightest_mass = tightest_mass
        super().__init__(
            f"no (a, b, c) keeps the unbiased-model mass <= 1 - rho = {1 - rho:g}; "
            f"smallest mass reached was {tightest_mass:.6g}"
        )


class DiagnosticUnavailableError(OdeFmaError):
    pass


class IngestionError(OdeFmaError, ValueError):
    def __init__(self, message: str, row: int | None = None, column: str | None = None):
        self.row = row
        self.column = column
        where = []
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column {column!r}")
        prefix = f"[{', '.join(where)}] " if where else ""
        super().__init__(prefix + message)


class ZeroVarianceError(OdeFmaError, ValueError):
    def __init__(self, column: str):
        self.column = column
        super().__init__(f"column {column!r} has zero variance and cannot be standardized")


class UndefinedMetricError(OdeFmaError, ValueError):
    pass


class AlignmentError(OdeFmaError, ValueError):
    pass


class ReplicationFailureError(NumericalError):
    def __init__(self, failures: int, replications: int, messages):
        self.failures = failures
        self.replications = replications
        self.messages = list(messages)
        detail = "; ".join(self.messages[:5])
        super().__init__(
            f"{failures} of {replications} replications failed (more than 1%): {detail}"
        )
