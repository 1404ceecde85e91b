from typing import Optional


class CGCTError(Exception):
    """Base class for every error raised by the cgct package."""


class ConfigurationError(CGCTError, ValueError):
    """Invalid task spec, experiment config, architecture or input shape."""


class DatasetError(CGCTError):
    """A dataset is empty, unreadable or lacks a required split."""


class GraphHeadError(CGCTError):
    """The graph head cannot be evaluated on the given batch."""


class ContractViolation(CGCTError, ValueError):
    """An input breaks a documented precondition (asymmetric matrix, bad label)."""


class TrainingDivergedError(CGCTError, RuntimeError):
    """
    A loss became NaN or infinite during training.

    Args:
        message (str): Human readable description.
        dump_path (str, optional): Where the diagnostic dump of the batch was written.
    """

    def __init__(self, message: str, dump_path: Optional[str] = None):
        super().__init__(message)
        self.dump_path = dump_path
