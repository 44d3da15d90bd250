"""Error taxonomy shared by every module.

Validation errors (bad input, violated preconditions) map to CLI exit code 2,
numeric and transport failures to exit code 3. Indices carried by the
exceptions are 0-based; messages print them 1-based.
"""


class Hydra2Error(Exception):
    exit_code = 1


class ValidationError(Hydra2Error):
    exit_code = 2


class NumericError(Hydra2Error):
    exit_code = 3


class TransportError(Hydra2Error):
    exit_code = 3


# Matrix structure

class EmptyRow(ValidationError):
    def __init__(self, row):
        self.row = row
        super().__init__(f"row {row + 1} has no nonzero entry")


class EmptyColumn(ValidationError):
    def __init__(self, col):
        self.col = col
        super().__init__(f"column {col + 1} has no nonzero entry")


class IndexOutOfBounds(ValidationError):
    def __init__(self, axis, index, size):
        self.axis = axis
        self.index = index
        self.size = size
        super().__init__(f"{axis} index {index + 1} outside 1..{size}")


class DuplicateEntry(ValidationError):
    def __init__(self, row, col):
        self.row = row
        self.col = col
        super().__init__(f"duplicate entry at ({row + 1}, {col + 1})")


class NotDivisible(ValidationError):
    def __init__(self, d, c):
        self.d = d
        self.c = c
        super().__init__(f"{d} coordinates cannot be split into {c} equal blocks")


# Stepsizes, sampling, solver

class TauOutOfRange(ValidationError):
    def __init__(self, tau, s):
        self.tau = tau
        self.s = s
        super().__init__(f"tau={tau} must satisfy 1 <= tau <= s={s}")


class TauTooSmall(ValidationError):
    def __init__(self, rule, tau):
        self.rule = rule
        self.tau = tau
        super().__init__(f"rule {rule} needs tau >= 2 (got tau={tau}); use D1 or D2 for tau=1")


class NonpositiveBeta(ValidationError):
    def __init__(self, beta):
        self.beta = beta
        super().__init__(f"prox curvature must be positive, got {beta}")


class ThetaOutOfRange(ValidationError):
    def __init__(self, theta):
        self.theta = theta
        super().__init__(f"theta={theta} outside (0, 1]")


class InvalidRange(ValidationError):
    pass


class TooLargeToEnumerate(ValidationError):
    def __init__(self, size, limit):
        self.size = size
        self.limit = limit
        super().__init__(f"sampling support has {size} elements, enumeration limit is {limit}")


class InfeasibleDualPoint(ValidationError):
    pass


class NoConvergence(NumericError):
    def __init__(self, max_iter, estimate):
        self.max_iter = max_iter
        self.estimate = estimate
        super().__init__(f"power iteration did not converge in {max_iter} iterations "
                         f"(best lower estimate {estimate:.6g})")


class NonFiniteIterate(NumericError):
    def __init__(self, iteration, coord=None):
        self.iteration = iteration
        self.coord = coord
        where = f" at coordinate {coord + 1}" if coord is not None else ""
        super().__init__(f"iterate diverged at iteration {iteration}{where}; "
                         f"the stepsizes are probably not admissible")


# Data ingestion and generation

class InvalidShape(ValidationError):
    pass


class ParseError(ValidationError):
    def __init__(self, line, reason):
        self.line = line
        self.reason = reason
        super().__init__(f"line {line}: {reason}")


class EmptyRowOrColumn(ValidationError):
    pass


class ManifestError(ValidationError):
    pass


# Distributed harness

class ShardMismatch(ValidationError):
    pass


class TransportFailure(TransportError):
    def __init__(self, node, reason=""):
        self.node = node
        who = f"worker {node + 1}" if node >= 0 else "transport"
        super().__init__(f"{who} failed{': ' + reason if reason else ''}")


class DesyncDetected(TransportError):
    def __init__(self, iteration, row):
        self.iteration = iteration
        self.row = row
        super().__init__(f"residual replicas differ at iteration {iteration}, "
                         f"first differing row {row + 1}")
