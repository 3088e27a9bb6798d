# Copyright (c) 2025 foofaraw (GitHub: foofaraw)
# Licensed under the MIT License (see LICENSE file for details).


class MVRestoreError(Exception):
    """Base exception class for mvrestore errors."""

    def __init__(self, message: str) -> None:
        super().__init__(message)
        self.message = message


class ContractError(MVRestoreError, ValueError):
    """Exception raised when an operation's preconditions are violated."""

    def __init__(self, message: str) -> None:
        super().__init__(message)


class SceneLoadError(MVRestoreError):
    """Exception raised when a scene directory cannot be loaded."""

    def __init__(self, message: str) -> None:
        super().__init__(message)


class SceneWriteError(MVRestoreError):
    """Exception raised when a scene directory cannot be written."""

    def __init__(self, message: str) -> None:
        super().__init__(message)


class DegenerateFitError(ContractError):
    """Exception raised for rank-deficient least-squares fits."""

    def __init__(self, message: str) -> None:
        super().__init__(message)


class UndefinedMetricError(MVRestoreError):
    """Exception raised when a metric has no data to average over."""

    def __init__(self, message: str) -> None:
        super().__init__(message)


class ConfigError(MVRestoreError):
    """Exception raised for invalid model or run configuration."""

    def __init__(self, message: str) -> None:
        super().__init__(message)


class TrainingError(MVRestoreError):
    """Exception raised when the training loop cannot continue."""

    def __init__(self, message: str) -> None:
        super().__init__(message)


class CheckpointError(MVRestoreError):
    """Exception raised for unreadable or incompatible checkpoints."""

    def __init__(self, message: str) -> None:
        super().__init__(message)
