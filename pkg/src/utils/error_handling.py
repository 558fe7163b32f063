"""
Error handling helpers.
Run-scoped correlation ids, retry with exponential backoff, and stage logging.
"""
import functools
import logging
import threading
import time
from typing import Callable, Optional

logger = logging.getLogger(__name__)


class CorrelationContext:
    """Thread-local correlation id, set once per run to the short config hash."""

    def __init__(self):
        self._local = threading.local()
        self._default = "-"

    def set_correlation_id(self, correlation_id: str):
        """Set correlation id for the current thread and as the default for workers."""
        self._local.correlation_id = correlation_id
        self._default = correlation_id

    def get_correlation_id(self) -> str:
        """Get correlation id for the current thread."""
        return getattr(self._local, "correlation_id", self._default)

    def clear(self):
        """Clear correlation id."""
        if hasattr(self._local, "correlation_id"):
            delattr(self._local, "correlation_id")
        self._default = "-"


# Global correlation context
correlation_context = CorrelationContext()


def retry_with_backoff(max_retries: int = 3, backoff_factor: float = 1.0,
                       exceptions: tuple = (Exception,),
                       sleep: Callable[[float], None] = time.sleep):
    """Decorator for retry with exponential backoff.

    ``max_retries`` may also be passed per call as the ``_max_retries`` keyword,
    so one decorated function can serve differently configured callers.
    """
    def decorator(func: Callable) -> Callable:
        @functools.wraps(func)
        def wrapper(*args, _max_retries: Optional[int] = None,
                    _backoff_factor: Optional[float] = None, **kwargs):
            correlation_id = correlation_context.get_correlation_id()
            retries = max_retries if _max_retries is None else _max_retries
            factor = backoff_factor if _backoff_factor is None else _backoff_factor

            for attempt in range(retries + 1):
                try:
                    return func(*args, **kwargs)
                except exceptions as e:
                    if attempt == retries:
                        logger.error(f"[{correlation_id}] Final retry failed for {func.__name__}: {e}")
                        raise

                    wait_time = factor * (2 ** attempt)
                    logger.warning(f"[{correlation_id}] Retry {attempt + 1}/{retries} for {func.__name__} in {wait_time}s: {e}")
                    if wait_time > 0:
                        sleep(wait_time)

        return wrapper
    return decorator


def log_errors(func: Callable) -> Callable:
    """Decorator that logs start, completion and failure of a pipeline stage."""
    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        correlation_id = correlation_context.get_correlation_id()
        start_time = time.time()

        try:
            logger.info(f"[{correlation_id}] Starting {func.__name__}",
                        extra={"event": {"stage": func.__name__, "status": "start"}})
            result = func(*args, **kwargs)
            duration = time.time() - start_time
            logger.info(f"[{correlation_id}] Completed {func.__name__} in {duration:.2f}s",
                        extra={"event": {"stage": func.__name__, "status": "done",
                                         "seconds": round(duration, 3)}})
            return result
        except Exception as e:
            duration = time.time() - start_time
            logger.error(f"[{correlation_id}] Failed {func.__name__} after {duration:.2f}s: {e}",
                         extra={"event": {"stage": func.__name__, "status": "failed"}})
            raise
    return wrapper
