"""
Exception hierarchy for the workbench.

Each error class carries the process exit code the CLI reports for it and
a ``details`` mapping that ends up in the structured log record.
"""

from typing import Any, Dict


class WorkbenchError(Exception):
    """Base class for all workbench errors"""

    exit_code = 1

    def __init__(self, message: str, **details: Any):
        super().__init__(message)
        self.message = message
        self.details: Dict[str, Any] = details

    def to_dict(self) -> Dict[str, Any]:
        return {
            'error': type(self).__name__,
            'message': self.message,
            'exit_code': self.exit_code,
            **self.details,
        }


class ConfigError(WorkbenchError):
    """Invalid scenario, string configuration or model dimensions"""
    exit_code = 2


class DataError(WorkbenchError):
    """Malformed or incomplete input profiles"""
    exit_code = 3


class HorizonError(DataError):
    """Forecast window runs past the end of the data"""


class ComparisonError(DataError):
    """Reports being compared were produced on different datasets"""


class SolverError(WorkbenchError):
    """LP did not reach an optimal solution where one was required"""
    exit_code = 4


class TrainingError(WorkbenchError):
    """Policy training diverged"""
    exit_code = 5


class DomainError(WorkbenchError):
    """Plant model input outside its physical domain"""


class InfeasiblePowerError(DomainError):
    """Requested cell power exceeds what the equivalent circuit can deliver"""


class EnvStateError(WorkbenchError):
    """Environment used out of sequence (e.g. step after done)"""
