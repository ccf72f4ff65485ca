"""Exception taxonomy shared by every diffreg module.

All custom errors derive from :class:`DiffregError` so callers can catch the
package's failures with a single except clause while still distinguishing
input problems (``InputError``) from numerical breakdowns
(``ComputationError``).
"""

from __future__ import annotations


class DiffregError(Exception):
    """Base class for every error raised by this package."""


class InputError(DiffregError):
    """Caller handed us something malformed (bad shape, bad value, bad file)."""


class ComputationError(DiffregError):
    """Inputs were well-formed but the computation could not proceed."""


# --- input problems ---------------------------------------------------------


class BadDims(InputError):
    """Array shape or dimension does not match the documented contract."""


class NonFiniteInput(InputError):
    """NaN or infinity found where finite values are required."""


class LengthMismatch(InputError):
    """Paired sequences have different lengths."""


class DimMismatch(InputError):
    """Two arrays that must agree in shape do not."""


class TooFewCorrespondences(InputError):
    """A pose solver needs more point-pixel pairs than were supplied."""


class EmptyInput(InputError):
    """An operation requires at least one element."""


class EmptyPatch(InputError):
    """A patch pair contains no points or no pixels."""


class EmptyCorrespondences(InputError):
    """A metric was asked to evaluate an empty correspondence set."""


class EmptyPatchSet(InputError):
    """A patch-level metric was asked to evaluate zero patch pairs."""


class MissingFeature(InputError):
    """A correspondence lacks the descriptor a consumer requires."""


class MissingDepth(InputError):
    """A correspondence lacks the pixel depth a consumer requires."""


class FormatError(InputError):
    """A file did not parse as the declared on-disk format."""


class UnknownKind(InputError):
    """An enumerated selector (mock name, mode string, ...) is not recognized."""


class MissingTarget(InputError):
    """A target-conditioned provider was requested without its target."""


# --- numerical / runtime problems -------------------------------------------


class NonPositiveDepth(ComputationError):
    """A point sits on or behind the camera plane (z <= 1e-9)."""


class DegenerateConfiguration(ComputationError):
    """Input geometry is rank-deficient for the requested solve."""


class NumericalFailure(ComputationError):
    """A linear solve or iteration broke down irrecoverably."""


class NotStationary(ComputationError):
    """Implicit differentiation requires a stationary solution and got none."""


class SingularHessian(ComputationError):
    """The constraint Hessian is too ill-conditioned to invert."""


class NoConsensus(ComputationError):
    """Robust estimation found no acceptable consensus set."""


class NonConvergence(ComputationError):
    """An iterative optimizer could not make progress."""


class ProvenanceMissing(ComputationError):
    """A backward pass was requested without forward provenance."""


class StaleProvenance(ComputationError):
    """Forward provenance was already consumed or no longer matches state."""


class ProviderFailure(ComputationError):
    """A score provider failed, timed out, or returned a malformed response."""
