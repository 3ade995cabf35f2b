"""Exception hierarchy.

Input problems derive from :class:`InputError` and computation problems from
:class:`ComputationError`; the CLI maps them to exit codes 2 and 3.
"""


class IcsohError(Exception):
    """Base class for all package errors."""


class InputError(IcsohError, ValueError):
    pass


class ComputationError(IcsohError, RuntimeError):
    pass


# -- dataset_io -------------------------------------------------------------

class MissingColumn(InputError):
    def __init__(self, column):
        self.column = column
        super().__init__(f"missing column: {column!r}")


class EmptyDataset(InputError):
    def __init__(self, message="dataset contains no samples"):
        super().__init__(message)


class NonMonotonicTime(InputError):
    def __init__(self, cycle_index, phase=None):
        self.cycle_index = cycle_index
        where = f" ({phase} phase)" if phase else ""
        super().__init__(f"time_s not strictly increasing in cycle {cycle_index}{where}")


class NegativeCapacity(InputError):
    def __init__(self, cycle_index):
        self.cycle_index = cycle_index
        super().__init__(f"discharge capacity must be > 0 in cycle {cycle_index}")


class InvalidSample(InputError):
    """A sample violates a sanity window (voltage, time, or a non-finite value)."""


class SegmentTooShort(InputError):
    def __init__(self, cycle_index, n_samples, minimum=20):
        self.cycle_index = cycle_index
        self.n_samples = n_samples
        super().__init__(
            f"cycle {cycle_index}: constant-current run has {n_samples} samples (< {minimum})"
        )


class NonPositiveReference(InputError):
    def __init__(self, q_ref):
        super().__init__(f"reference capacity must be > 0, got {q_ref!r}")


# -- ic_analysis ------------------------------------------------------------

class DegenerateVoltageRange(InputError):
    def __init__(self, span, minimum):
        self.span = span
        super().__init__(f"rectified voltage span {span:.6g} V is below {minimum:.6g} V")


class WindowTooLarge(InputError):
    pass


class KernelTooLong(InputError):
    pass


class GridDoesNotCoverWindow(InputError):
    def __init__(self, covered, window):
        self.covered = covered
        self.window = window
        super().__init__(
            "IC grid covers [{:.4f}, {:.4f}] V, feature window needs [{:.4f}, {:.4f}] V".format(
                covered[0], covered[1], window[0], window[1]
            )
        )


# -- gpr --------------------------------------------------------------------

class DimensionMismatch(InputError):
    pass


class FactorizationFailure(ComputationError):
    pass


class AllRestartsFailed(ComputationError):
    pass


class UnknownCycle(InputError, KeyError):
    def __init__(self, cycle_index):
        self.cycle_index = cycle_index
        super().__init__(f"unknown cycle index {cycle_index}")

    def __str__(self):
        return self.args[0]


# -- evaluation -------------------------------------------------------------

class NotEnoughCycles(ComputationError):
    pass


class LengthMismatch(InputError):
    pass


class Empty(InputError):
    pass
