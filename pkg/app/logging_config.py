"""Structured logging for experiment runs.

``configure_logging`` routes structlog through the stdlib root logger to
stderr, so CSV output and the stdout file summary stay clean. Services log
numpy scalars and small arrays freely; ``numpy_to_builtin`` turns them into
plain Python values before rendering so the JSON renderer accepts them.
``trial_context`` tags every event emitted during one scenario trial.
"""

from __future__ import annotations

import logging
import sys
from collections.abc import Iterator, MutableMapping
from contextlib import contextmanager
from typing import Any

import numpy as np
import structlog

# Arrays up to this many entries are logged in full; larger ones by shape only.
MAX_LOGGED_ENTRIES = 16


def _to_builtin(value: Any) -> Any:
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        if value.size <= MAX_LOGGED_ENTRIES:
            return value.tolist()
        return f"<array shape={value.shape} dtype={value.dtype}>"
    if isinstance(value, list | tuple):
        return [_to_builtin(v) for v in value]
    if isinstance(value, dict):
        return {k: _to_builtin(v) for k, v in value.items()}
    return value


def numpy_to_builtin(
    _logger: Any, _method: str, event_dict: MutableMapping[str, Any]
) -> MutableMapping[str, Any]:
    """structlog processor replacing numpy values in the event with builtins."""
    for key, value in event_dict.items():
        event_dict[key] = _to_builtin(value)
    return event_dict


@contextmanager
def trial_context(scenario: str, run: int, seed: int) -> Iterator[None]:
    """Bind ``scenario``, ``run`` and ``seed`` to every log event inside the block."""
    with structlog.contextvars.bound_contextvars(scenario=scenario, run=run, seed=seed):
        yield


def configure_logging(*, json_logs: bool = False, log_level: str = "INFO") -> None:
    """Configure structlog and the stdlib root logger.

    Args:
        json_logs: Render one JSON object per event (batch runs, log
            collection). When *False* (default), use the console renderer.
        log_level: Root log level name (e.g. ``"INFO"``, ``"DEBUG"``).
    """
    structlog.configure(
        processors=[
            structlog.contextvars.merge_contextvars,
            structlog.stdlib.add_log_level,
            structlog.processors.TimeStamper(fmt="iso"),
            numpy_to_builtin,
            structlog.stdlib.ProcessorFormatter.wrap_for_formatter,
        ],
        logger_factory=structlog.stdlib.LoggerFactory(),
        wrapper_class=structlog.stdlib.BoundLogger,
        cache_logger_on_first_use=True,
    )

    renderer: structlog.types.Processor = (
        structlog.processors.JSONRenderer(sort_keys=True)
        if json_logs
        else structlog.dev.ConsoleRenderer(colors=False)
    )
    formatter = structlog.stdlib.ProcessorFormatter(
        processors=[structlog.stdlib.ProcessorFormatter.remove_processors_meta, renderer],
    )

    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(formatter)
    root_logger = logging.getLogger()
    root_logger.handlers.clear()
    root_logger.addHandler(handler)
    root_logger.setLevel(log_level.upper())
