"""
D.I.S.C.O. Base Stage
Abstract base class for the steps of the threshold pipeline.
"""

import time
from abc import ABC, abstractmethod
from typing import Any, Dict, Optional

from core.errors import DiscoError
from utils.logger import get_logger


class StageResponse:
    """Simple response wrapper for stage process results."""

    def __init__(self, success: bool, payload: Dict[str, Any], error_message: Optional[str] = None,
                 hint: Optional[str] = None, cause: Optional[BaseException] = None):
        self.success = success
        self.payload = payload
        self.error_message = error_message
        self.hint = hint
        self.cause = cause


class BaseStage(ABC):
    """
    Abstract base class for all D.I.S.C.O. pipeline stages.

    A stage reads what earlier stages put into the shared context and
    returns the entries it adds. process() never raises: failures come back
    as an unsuccessful StageResponse carrying the message, the hint of a
    DiscoError and the original exception.
    """

    def __init__(self, stage_name: str, label: str = "", verbose: bool = True):
        """
        Initialize the base stage.

        Args:
            stage_name: Identifier used in logs and error labels
            label: Short label for the pipeline progress line
            verbose: Whether to log progress at INFO
        """
        self.stage_name = stage_name
        self.label = label or stage_name
        self.verbose = verbose
        self.logger = get_logger(f"stages.{stage_name}")
        self._processing_start: Optional[float] = None

    def think(self, message: str) -> None:
        """Log what the stage is about to do."""
        if self.verbose:
            self.logger.info(message)

    def log_action(self, action: str) -> None:
        self.logger.debug(action)

    def log_result(self, result: str) -> None:
        if self.verbose:
            self.logger.info(result)

    def log_warning(self, warning: str) -> None:
        self.logger.warning(warning)

    def log_error(self, error: str) -> None:
        self.logger.error(error)

    def _start_processing(self) -> None:
        self._processing_start = time.perf_counter()

    def _end_processing(self) -> float:
        if self._processing_start is not None:
            return time.perf_counter() - self._processing_start
        return 0.0

    @abstractmethod
    def _execute(self, context: Dict[str, Any]) -> Dict[str, Any]:
        """
        Core execution logic implemented by each stage.

        Args:
            context: Everything produced so far plus the run configuration

        Returns:
            New context entries
        """

    def process(self, context: Dict[str, Any]) -> StageResponse:
        """
        Run the stage.

        Args:
            context: Shared pipeline context

        Returns:
            StageResponse with success status and payload
        """
        self._start_processing()
        try:
            result = self._execute(context)
            elapsed = self._end_processing()
            self.log_action(f"finished in {elapsed:.2f}s")
            return StageResponse(success=True, payload=result)
        except DiscoError as e:
            self.log_error(e.message)
            return StageResponse(success=False, payload={"stage": self.stage_name},
                                 error_message=e.message, hint=e.hint, cause=e)
        except Exception as e:
            self.log_error(f"unexpected failure: {e}")
            return StageResponse(success=False, payload={"stage": self.stage_name},
                                 error_message=f"{type(e).__name__}: {e}", cause=e)

    def __repr__(self) -> str:
        return f"<{self.__class__.__name__}(name='{self.stage_name}')>"
