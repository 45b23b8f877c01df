"""Domain exceptions raised by the numerical services and the harness.

Every error the algorithms can signal has its own class so callers can
recover selectively (e.g. cloud K-SVD re-initialises an atom on
``PowerCollapseError`` but lets ``CorrectionUnderflowError`` propagate).
"""

from __future__ import annotations

from typing import Any


class CloudKsvdError(Exception):
    """Base class for all errors raised by this package."""


class InvalidInputError(CloudKsvdError, ValueError):
    """Input values violate a documented precondition (non-finite, asymmetric...)."""


class InvalidDictionaryError(InvalidInputError):
    """A dictionary has a zero atom or mismatched dimensions."""


class InvalidConfigError(InvalidInputError):
    """An algorithm parameter is out of range or inconsistent with the data."""


class ConvergenceError(CloudKsvdError):
    """An iterative solver hit its iteration cap before converging."""

    def __init__(self, msg: str, last_iterate: Any) -> None:
        super().__init__(msg)
        self.last_iterate = last_iterate


class EmptyEnergyError(CloudKsvdError):
    """A restricted error matrix carries no energy; the atom must be re-initialised."""


class TopologyGenerationError(CloudKsvdError):
    """No connected random graph was drawn within the attempt budget."""


class CorrectionUnderflowError(CloudKsvdError):
    """A consensus sum correction factor is too small to divide by."""


class MixingTimeOverflowError(CloudKsvdError):
    """The mixing-time search exceeded its cap."""


class PowerCollapseError(CloudKsvdError):
    """A power-method iterate vanished at some site."""

    def __init__(self, msg: str, sites: list[int], iteration: int = 1) -> None:
        super().__init__(msg)
        self.sites = sites
        self.iteration = iteration


class InsufficientTraceError(CloudKsvdError):
    """A trace lacks the snapshots a diagnostic needs."""


class GapViolationError(CloudKsvdError):
    """No spectral gap was observed for some dictionary-update steps."""

    def __init__(self, msg: str, offending: list[tuple[int, int]]) -> None:
        super().__init__(msg)
        self.offending = offending


class IdxFormatError(CloudKsvdError):
    """An IDX file has the wrong magic number or layout."""


class IdxConsistencyError(CloudKsvdError):
    """Image and label files disagree on the item count."""


class IdxTruncatedError(CloudKsvdError, OSError):
    """An IDX file ends before its declared payload."""
