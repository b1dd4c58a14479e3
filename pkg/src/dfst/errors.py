"""Exception hierarchy shared by all modules.

Every error carries a short ``kind`` tag; the CLI prints it as a stable,
machine-parsable prefix.
"""


class DfstError(Exception):
    kind = "error"


class InvalidSymbolError(DfstError, ValueError):
    kind = "invalid-symbol"


class NoAnswerError(DfstError):
    kind = "no-answer"


class AmbiguousAnswerError(DfstError):
    kind = "ambiguous-answer"


class IncompleteTableError(DfstError):
    kind = "incomplete-table"


class PreconditionError(DfstError, ValueError):
    kind = "precondition"


class RunawayExpertError(DfstError):
    kind = "runaway-expert"


class InfeasibleError(DfstError, ValueError):
    kind = "infeasible-n"


class ParseError(DfstError):
    kind = "parse"

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class IntegrityError(DfstError):
    kind = "integrity"


class DegenerateSampleError(DfstError, ValueError):
    kind = "degenerate-sample"


class NonFiniteError(DfstError, ValueError):
    kind = "non-finite"


class DivergenceError(DfstError):
    kind = "divergence"
