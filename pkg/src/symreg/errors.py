"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: UsageError -> 1, DataError -> 2,
any other SymregError -> 3 (numerical failure).
"""


class SymregError(Exception):
    """Base class for all package errors."""


class UsageError(SymregError):
    """Bad arguments, unknown config keys, inconsistent options."""


class DataError(SymregError):
    """Problems with files: missing, malformed, or mismatched."""


class UnknownToken(DataError):
    def __init__(self, word: str):
        super().__init__(f"unknown token {word!r}")
        self.word = word


class SequenceTooLong(DataError):
    def __init__(self, length: int, max_len: int):
        super().__init__(f"sequence of {length} tokens exceeds maximum length {max_len}")
        self.length = length
        self.max_len = max_len


class MalformedRecord(DataError):
    def __init__(self, path, line_number: int, reason: str):
        super().__init__(f"{path}:{line_number}: {reason}")
        self.path = path
        self.line_number = line_number
        self.reason = reason


class VocabularyMismatch(DataError):
    """Dataset / checkpoint vocabularies are not byte-identical."""


class CorruptCheckpoint(DataError):
    """Checkpoint payload fails its content hash or is truncated."""


class VersionMismatch(DataError):
    """Checkpoint format or configuration is incompatible."""


class SampleDiscarded(SymregError):
    """Point sampling hit the rejection budget; caller should redraw the expression."""


class NumericalError(SymregError):
    """Numerical failure during evaluation or optimization."""


class ConstantCountMismatch(NumericalError):
    def __init__(self, expected: int, got: int):
        super().__init__(f"expression has {expected} constant placeholders, got {got} values")
        self.expected = expected
        self.got = got


class NonFiniteResult(NumericalError):
    """Expression evaluation produced NaN or infinity."""


class NonFiniteInput(NumericalError):
    """An input tensor contains NaN or infinity."""


class ShapeMismatch(SymregError):
    """Tensor shape does not match the model contract."""


class MissingTimestep(SymregError):
    """Diffusion-mode forward pass called without timesteps."""


class TimestepOutOfRange(SymregError):
    """Diffusion timestep outside 1..T."""


class UnnormalizedInput(SymregError):
    """A probability row does not sum to one."""


class LineSearchFailure(SymregError):
    """Strong-Wolfe line search could not find an acceptable step."""


class SampleSetMismatch(SymregError):
    """Two evaluation reports do not cover the same sample ids."""
