import logging
import traceback
from typing import Optional, Callable, Any, Iterable
from functools import wraps
from pathlib import Path

import click


class MitosisPipelineError(Exception):
    """Base class for every expected failure of the pipeline"""


class InvalidDomain(MitosisPipelineError):
    pass


class InvalidAngle(MitosisPipelineError):
    pass


class InvalidPixelRange(MitosisPipelineError):
    pass


class ShapeError(MitosisPipelineError):
    pass


class PlacementFailure(MitosisPipelineError):
    pass


class InvalidLevel(MitosisPipelineError):
    pass


class InvalidIteration(MitosisPipelineError):
    pass


class InsufficientDomains(MitosisPipelineError):
    pass


class InsufficientForeground(MitosisPipelineError):
    pass


class PatchSamplingError(MitosisPipelineError):
    pass


class TileError(MitosisPipelineError):
    pass


class TrainingOrderError(MitosisPipelineError):
    pass


class CorpusFormatError(MitosisPipelineError):
    def __init__(self, path, message: str):
        self.path = str(path)
        super().__init__(f"{self.path}: {message}")


class CheckpointFormatError(MitosisPipelineError):
    def __init__(self, path, message: str):
        self.path = str(path)
        super().__init__(f"{self.path}: {message}")


class ArtifactFormatError(MitosisPipelineError):
    def __init__(self, path, message: str):
        self.path = str(path)
        super().__init__(f"{self.path}: {message}")


class UnknownSlideError(MitosisPipelineError):
    def __init__(self, slide_ids: Iterable[str]):
        self.slide_ids = sorted(slide_ids)
        super().__init__(f"Unknown slide ids in predictions: {', '.join(self.slide_ids)}")


class ErrorHandler:
    EXIT_RUNTIME_ERROR = 1

    @staticmethod
    def handle_gracefully(fallback_message: str = "Command failed",
                          show_details: bool = True):
        """Decorator turning expected failures of a CLI command into exit code 1"""
        def decorator(func: Callable) -> Callable:
            @wraps(func)
            def wrapper(*args, **kwargs) -> Any:
                try:
                    return func(*args, **kwargs)
                except (MitosisPipelineError, OSError) as e:
                    ErrorHandler._log_error(func.__name__, e)

                    if show_details:
                        click.echo(f"Error: {fallback_message}: {e}", err=True)
                    else:
                        click.echo(f"Error: {fallback_message}", err=True)

                    raise SystemExit(ErrorHandler.EXIT_RUNTIME_ERROR)
            return wrapper
        return decorator

    @staticmethod
    def _log_error(function_name: str, error: Exception):
        """Log error details"""
        logging.error(f"Error in {function_name}: {error}")
        logging.debug(traceback.format_exc())

    @staticmethod
    def safe_execute(func: Callable, fallback_value: Any = None,
                     error_message: str = "Operation failed") -> Any:
        """Run non-essential work, logging instead of failing"""
        try:
            return func()
        except Exception as e:
            ErrorHandler._log_error(getattr(func, '__name__', 'anonymous'), e)
            logging.warning(error_message)
            return fallback_value

    @staticmethod
    def require_path(path, what: str, must_be_dir: bool = False) -> None:
        """Raise FileNotFoundError naming a missing input artifact"""
        p = Path(path)
        if not p.exists() or (must_be_dir and not p.is_dir()):
            raise FileNotFoundError(f"{what} not found: {p}")
