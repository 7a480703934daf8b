"""Exception types shared across pipeline stages."""


class ForgeError(Exception):
    """Base class for all lmforge errors."""


class DataError(ForgeError):
    """Bad input data: malformed records, impossible configs, empty corpora."""


class MalformedLineError(DataError):
    """A single undecodable record in a line-delimited file."""

    def __init__(self, path: str, line_number: int, cause: str):
        super().__init__(f"{path}:{line_number}: {cause}")
        self.path = path
        self.line_number = line_number
        self.cause = cause


class TrainingDiverged(ForgeError):
    """Non-finite loss or gradient encountered during optimization."""
