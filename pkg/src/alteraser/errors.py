"""Exception hierarchy shared by the library and the CLI exit-code mapping."""


class AltEraserError(Exception):
    """Base class for all package errors."""


class DataError(AltEraserError):
    """Malformed input files, inconsistent datasets or forget requests."""


class ParseError(DataError):
    def __init__(self, path, lineno, message):
        self.path = str(path)
        self.lineno = lineno
        super().__init__(f"{self.path}, line {lineno}: {message}")


class ShapeError(DataError):
    """A model or request does not match the dataset it is used with."""


class CheckpointError(DataError):
    """Bad magic, unsupported version or truncated checkpoint file."""


class NumericalError(AltEraserError):
    """Divergence or factorization failure."""


class StaleCacheError(NumericalError):
    """A Gram cache was built from an older version of the model."""


class SolverError(NumericalError):
    def __init__(self, message, block=None, pass_index=None):
        self.detail = message
        self.block = block
        self.pass_index = pass_index
        where = []
        if pass_index is not None:
            where.append(f"pass {pass_index}")
        if block is not None:
            where.append(f"block {block}")
        prefix = f"[{', '.join(where)}] " if where else ""
        super().__init__(prefix + message)


class DivergenceError(NumericalError):
    def __init__(self, epoch, loss):
        self.epoch = epoch
        self.loss = loss
        super().__init__(f"training diverged at epoch {epoch} (loss={loss})")
