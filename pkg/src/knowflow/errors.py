"""Exception hierarchy shared by every knowflow module."""

from __future__ import annotations


class KnowFlowError(Exception):
    """Base class for all errors raised by knowflow."""


class Malformed(KnowFlowError):
    """A document could not be parsed or does not match its format."""


class MissingField(Malformed):
    def __init__(self, field: str, where: str = "document"):
        super().__init__(f"{where}: missing required field {field!r}")
        self.field = field


class DuplicateParam(Malformed):
    pass


class ConflictingEffect(Malformed):
    pass


class DuplicateToolName(KnowFlowError):
    pass


class UnknownTool(KnowFlowError):
    pass


class UnboundPlaceholder(KnowFlowError):
    pass


class PreconditionViolated(KnowFlowError):
    pass


class CycleDetected(KnowFlowError):
    pass


class NoSuchNode(KnowFlowError):
    pass


class NoSuchEdge(KnowFlowError):
    pass


class DuplicateNodeId(KnowFlowError):
    pass


class ArgKindMismatch(KnowFlowError):
    pass


class EmptyLibrary(KnowFlowError):
    pass


class UnboundContextKey(KnowFlowError):
    def __init__(self, key: str):
        super().__init__(f"no context value for placeholder ?{key}")
        self.key = key


class InvalidInstantiation(KnowFlowError):
    def __init__(self, message: str, report=None):
        super().__init__(message)
        self.report = report


class NotEligible(KnowFlowError):
    pass


class DuplicateTraceId(KnowFlowError):
    pass


class NotAFailure(KnowFlowError):
    pass


class RepairRejected(KnowFlowError):
    def __init__(self, message: str, report=None):
        super().__init__(message)
        self.report = report


class PlannerUnavailable(KnowFlowError):
    pass


class DuplicateCaseId(Malformed):
    pass


class EmptySuite(KnowFlowError):
    pass
