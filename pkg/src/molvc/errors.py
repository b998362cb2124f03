"""Exception types shared across the package.

Each class carries the CLI exit code it maps to.
"""


class MolVCError(Exception):
    exit_code = 1


class InvalidInput(MolVCError, ValueError):
    exit_code = 2


class NoPitch(InvalidInput):
    """No voiced frame was available where at least one is required."""


class UndefinedMetric(InvalidInput):
    pass


class InfeasibleTarget(InvalidInput):
    """CTC target cannot be emitted in the given number of frames."""


class DegenerateStats(InvalidInput):
    pass


class InvalidCheckpoint(InvalidInput):
    pass


class FormatError(InvalidInput):
    pass


class VerificationImpossible(MolVCError):
    pass


class PoisonedStep(MolVCError):
    """An optimizer step saw a non-finite gradient."""

    exit_code = 3

    def __init__(self, param_name):
        super().__init__(f"non-finite gradient in parameter {param_name!r}")
        self.param_name = param_name


class PoisonedTraining(MolVCError):
    exit_code = 3


class PoisonedDecode(MolVCError):
    exit_code = 3

    def __init__(self, step):
        super().__init__(f"non-finite activation at decoder step {step}")
        self.step = step


class AcceptanceFailed(MolVCError):
    exit_code = 4
