"""
Exception hierarchy shared by every scripts module.
The CLI maps ScfdError to exit code 1.
"""


class ScfdError(Exception):
    pass


# --- trace parsing ---

class MalformedLine(ScfdError):
    def __init__(self, line_no, reason=""):
        self.line_no = line_no
        self.reason = reason
        msg = f"malformed line {line_no}"
        if reason:
            msg += f": {reason}"
        super().__init__(msg)


class UnbalancedRegion(ScfdError):
    def __init__(self, line_no):
        self.line_no = line_no
        super().__init__(f"unbalanced region marker at line {line_no}")


class UnknownSyscall(ScfdError):
    def __init__(self, name):
        self.name = name
        super().__init__(f"syscall '{name}' is not in the alphabet")


class EmptyInput(ScfdError):
    pass


# --- statistics ---

class DimensionMismatch(ScfdError):
    def __init__(self, expected, got):
        self.expected = expected
        self.got = got
        super().__init__(f"dimension mismatch: expected {expected}, got {got}")


class SingularCovariance(ScfdError):
    pass


class OutOfRange(ScfdError):
    pass


# --- profiles ---

class ProfileIoError(ScfdError):
    pass


class VersionMismatch(ScfdError):
    def __init__(self, found, supported):
        self.found = found
        self.supported = supported
        super().__init__(f"profile format version {found} is not supported (tool reads version {supported})")


class CorruptProfile(ScfdError):
    pass


class InsufficientTraining(ScfdError):
    pass


# --- evaluation ---

class EmptyCorpus(ScfdError):
    pass


class EvalInvariantError(ScfdError):
    pass
