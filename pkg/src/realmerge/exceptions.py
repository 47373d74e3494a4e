"""
realmerge exceptions
====================
Every error raised by the library carries a stable ``code``. The CLI maps the classes below to
its exit codes, so new errors should subclass one of them instead of ``RealMergeError`` directly.
"""


class RealMergeError(Exception):
    """
    Base class for all realmerge errors.
    """

    code = "realmerge-error"

    def __init__(self, message, code=None):
        super().__init__(message)
        if code is not None:
            self.code = code

    def __str__(self):
        return f"[{self.code}] {super().__str__()}"


class ConfigError(RealMergeError):
    """
    Invalid hyperparameters, unknown methods or keys, out-of-range ranks.
    """

    code = "config"


class ArchiveError(RealMergeError):
    """
    Problems reading or writing checkpoint archives.

    Codes: ``malformed-header``, ``truncated-payload``, ``duplicate-name``, ``non-finite``,
    ``unwritable-path``, ``missing-file``.
    """

    code = "archive"


class LayoutMismatchError(ArchiveError):
    """
    Two archives or task vectors do not share names, shapes and roles.
    """

    code = "layout-mismatch"


class RankError(RealMergeError):
    """
    A requested rank exceeds the numerical rank of the input.
    """

    code = "rank"


class ConvergenceError(RealMergeError):
    """
    The Jacobi iteration ran out of sweeps.
    """

    code = "non-convergence"

    def __init__(self, message, residual):
        super().__init__(message)
        self.residual = residual


class DegenerateError(RealMergeError):
    """
    Degenerate numerical input: zero vectors, empty subsets, zero core response.
    """

    code = "degenerate"


class DivergenceError(RealMergeError):
    """
    Toy training diverged. ``losses`` holds the curve up to the failing epoch.
    """

    code = "divergence"

    def __init__(self, message, losses):
        super().__init__(message)
        self.losses = list(losses)
