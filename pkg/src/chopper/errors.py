"""Exception hierarchy shared by every stage of the pipeline."""

from __future__ import annotations


class ChopperError(Exception):
    """Base class for all pipeline errors."""


class MalformedInput(ChopperError, ValueError):
    pass


class NonFiniteValue(MalformedInput):
    def __init__(self, row: int, detail: str = ""):
        self.row = row
        super().__init__(f"non-finite value at data row {row}{': ' + detail if detail else ''}")


class DuplicateCounterKey(MalformedInput):
    def __init__(self, key: tuple, row: int):
        self.key = key
        self.row = row
        super().__init__(f"duplicate counter key {key} at data row {row}")


class UtilOutOfRange(MalformedInput):
    def __init__(self, row: int, value: float):
        self.row = row
        self.value = value
        super().__init__(f"utilization {value} outside [0, 100] at data row {row}")


class TraceIOError(ChopperError, OSError):
    """A required bundle file is missing or unreadable."""

    def __init__(self, path, detail: str = "missing or unreadable"):
        self.path = str(path)
        super().__init__(f"{self.path}: {detail}")


class ValidationFailed(ChopperError):
    def __init__(self, violations):
        self.violations = list(violations)
        head = "; ".join(str(v) for v in self.violations[:5])
        more = f" (+{len(self.violations) - 5} more)" if len(self.violations) > 5 else ""
        super().__init__(f"{len(self.violations)} validation violation(s): {head}{more}")


class AlignmentFailed(ChopperError):
    pass


class AmbiguousSpans(AlignmentFailed):
    def __init__(self, level: str, first, second, dispatch_ts: int):
        self.level = level
        self.spans = (first, second)
        self.dispatch_ts = dispatch_ts
        super().__init__(
            f"overlapping {level} spans {first.label!r} and {second.label!r} "
            f"both contain dispatch {dispatch_ts}"
        )


class MismatchedKernelSequence(AlignmentFailed):
    def __init__(self, gpu_id: int, pass_id: int, index: int, expected, found):
        self.gpu_id = gpu_id
        self.pass_id = pass_id
        self.index = index
        super().__init__(
            f"gpu {gpu_id} pass {pass_id}: kernel sequence diverges at index {index} "
            f"(runtime {expected!r}, counters {found!r})"
        )


class ConflictingCounter(AlignmentFailed):
    def __init__(self, gpu_id: int, index: int, counter: str, a: float, b: float):
        self.gpu_id = gpu_id
        self.index = index
        self.counter = counter
        super().__init__(
            f"gpu {gpu_id} kernel {index}: passes disagree on {counter} ({a!r} vs {b!r})"
        )


class DanglingLink(ChopperError):
    def __init__(self, gpu_id: int, correlation_id: int, target: int):
        self.gpu_id = gpu_id
        self.correlation_id = correlation_id
        self.target = target
        super().__init__(f"gpu {gpu_id} kernel {correlation_id} links to absent kernel {target}")


class ZeroDurationKernel(ChopperError):
    pass


class ParseError(ChopperError, ValueError):
    pass


class MissingCounter(ChopperError, KeyError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(name)

    def __str__(self) -> str:
        return f"MissingCounter({self.name})"


class DivisionByZero(ChopperError, ZeroDivisionError):
    pass


class UnknownShape(ChopperError, KeyError):
    def __init__(self, op: str):
        self.op = op
        super().__init__(op)

    def __str__(self) -> str:
        return f"UnknownShape({self.op})"


class UtilizationOutOfRange(ChopperError, ValueError):
    pass


class InsufficientData(ChopperError, ValueError):
    pass


class ZeroBaselineDuration(ChopperError, ValueError):
    pass


class UnknownKey(ChopperError, KeyError):
    def __init__(self, key: str):
        self.key = key
        super().__init__(key)

    def __str__(self) -> str:
        return f"UnknownKey({self.key})"


class InvalidConfig(ChopperError, ValueError):
    pass


class InvalidPerturbation(ChopperError, ValueError):
    pass
