"""Exception hierarchy shared across the orchestration layers."""

import enum


class LabError(Exception):
    """Base class for every error raised by labctl."""


class ParseError(LabError):
    def __init__(self, message, line=None, column=None):
        self.line = line
        self.column = column
        where = f" (line {line}, column {column})" if line is not None else ""
        super().__init__(f"{message}{where}")


class SchemaError(LabError):
    def __init__(self, path, message):
        self.path = path
        super().__init__(f"{path}: {message}")


class InvariantViolation(LabError):
    def __init__(self, rule, subject=""):
        self.rule = rule
        self.subject = subject
        super().__init__(f"{rule}: {subject}" if subject else rule)


class UnknownPhy(SchemaError):
    pass


class UnknownHost(LabError):
    pass


class UnknownRegion(LabError):
    pass


class InsufficientRadios(LabError):
    def __init__(self, capability):
        self.capability = capability
        super().__init__(f"insufficient radios with capability {capability}")


class PortConflict(LabError):
    pass


class SubnetExhausted(LabError):
    pass


class DriverError(LabError):
    """A driver command failed.

    ``succeeded`` lists the commands that completed before the failure and
    ``handle`` (when set) is the partial layer handle to unwind.
    """

    def __init__(self, command, response, succeeded=(), handle=None):
        self.command = command
        self.response = response
        self.succeeded = list(succeeded)
        self.handle = handle
        super().__init__(f"{command!r} failed: {response}")


class InjectedFault(DriverError):
    pass


class Aborted(LabError):
    pass


class TeardownErrors(LabError):
    """Aggregate of failures collected while a teardown kept going."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(str(e) for e in self.errors))


class ProviderError(LabError):
    pass


class CapacityError(ProviderError):
    pass


class EngineError(LabError):
    def __init__(self, host, status, message):
        self.host = host
        self.status = status
        super().__init__(f"{host}: HTTP {status}: {message}")


class ImagePullError(EngineError):
    pass


class PlacementError(LabError):
    pass


class NoEligibleHost(LabError):
    pass


class AlreadyTerminal(LabError):
    pass


class AlreadyStopped(LabError):
    pass


class BindError(LabError):
    pass


class ProtocolError(LabError):
    pass


class InvalidTransition(LabError):
    pass


class ValidationFailed(LabError):
    def __init__(self, report):
        self.report = report
        super().__init__(f"{len(report.findings)} validation finding(s)")


class TeardownStatus(enum.Enum):
    DONE = "done"
    ALREADY_TORN_DOWN = "already-torn-down"


class ProviderTeardownErrors(TeardownErrors, ProviderError):
    """Cloud teardown kept going past provider failures."""
