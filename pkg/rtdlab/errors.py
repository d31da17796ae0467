"""Exception hierarchy. Every error a command can surface maps to an exit code."""


class LabError(Exception):
    exit_code = 1


class ContractViolation(LabError):
    """A caller broke a documented precondition (shape, range, scalar-ness)."""
    exit_code = 1


class SupportViolation(ContractViolation):
    """The proposal distribution is zero where the target integrand is not."""


class ConfigError(LabError):
    exit_code = 2


class ConfigHashMismatch(ConfigError):
    def __init__(self, expected: str, found: str, where: str = ''):
        self.expected = expected
        self.found = found
        location = f" ({where})" if where else ''
        super().__init__(
            f"Config hash mismatch{location}: config={expected} checkpoint={found}"
        )


class UndefinedCorrelation(LabError):
    exit_code = 2


class DataError(LabError):
    exit_code = 3


class DegenerateSequenceError(DataError):
    """Sentence too short: the mask count would cover the whole sequence."""


class CheckpointError(LabError):
    exit_code = 3


class NumericFault(LabError):
    exit_code = 4

    def __init__(self, op: str, detail: str = 'non-finite value'):
        self.op = op
        super().__init__(f"Numeric fault in '{op}': {detail}")
