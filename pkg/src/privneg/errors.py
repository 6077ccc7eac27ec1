"""Exception hierarchy shared across the package."""


class PrivnegError(Exception):
    """Base class for every error raised by privneg."""


# policy model
class PolicyError(PrivnegError):
    pass


class MalformedXml(PolicyError):
    pass


class UnknownElement(PolicyError):
    pass


class BadValue(PolicyError, ValueError):
    pass


class DuplicateRule(PolicyError):
    pass


class TypeMismatch(PolicyError, ValueError):
    pass


# negotiation
class ProtocolViolation(PrivnegError):
    pass


class NegotiationTimeout(PrivnegError):
    pass


# wire
class TransportError(PrivnegError):
    pass


class DecodeError(PrivnegError):
    """Raised for frames that cannot be decoded; ``kind`` names the cause."""

    def __init__(self, kind: str, detail: str = ""):
        self.kind = kind
        super().__init__(f"{kind}: {detail}" if detail else kind)


# group negotiation
class GroupError(PrivnegError):
    pass


class EmptyGroup(GroupError):
    pass


class RaggedMatrix(GroupError):
    pass


class CombinatorialLimit(GroupError):
    def __init__(self, cardinality: int, cap: int):
        self.cardinality = cardinality
        self.cap = cap
        super().__init__(f"{cardinality} candidates exceeds cap {cap}")


class UnknownUser(GroupError, KeyError):
    pass


# pipeline
class PipelineError(PrivnegError):
    pass


class StoreIoError(PipelineError):
    pass


class UnknownCaptureId(PipelineError, KeyError):
    pass


class FilterError(PipelineError):
    pass


class UnknownFilter(FilterError, ValueError):
    pass
