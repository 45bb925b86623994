"""Exception types shared across the package."""


class LyapctlError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(LyapctlError):
    """Malformed input: bad dimensions, broken invariants, unreadable files."""


class DivergenceError(LyapctlError):
    """Training produced a non-finite loss; carries diagnostics."""

    def __init__(self, message, *, round_index=None, epoch=None, loss=None):
        super().__init__(message)
        self.round_index = round_index
        self.epoch = epoch
        self.loss = loss


class InconclusiveError(LyapctlError):
    """The branch-and-bound verifier exhausted its box budget.

    Not a certificate and not a refutation. Carries whatever counterexamples
    were found before the cap, and the number of unresolved boxes left in the
    work queue.
    """

    def __init__(self, message, *, boxes_processed, remaining_boxes, counterexamples):
        super().__init__(message)
        self.boxes_processed = boxes_processed
        self.remaining_boxes = remaining_boxes
        self.counterexamples = counterexamples
