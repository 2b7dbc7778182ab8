"""Exception hierarchy shared across the store, DSL, platform and coordinator."""


class NibError(Exception):
    pass


class VersionMismatch(NibError):
    def __init__(self, namespace, expected, actual):
        self.namespace = namespace
        self.expected = expected
        self.actual = actual
        super().__init__(
            f"VersionMismatch: namespace {namespace!r} expected {expected!r}, actual {actual!r}"
        )


class UnknownNamespace(NibError):
    def __init__(self, namespace):
        self.namespace = namespace
        super().__init__(f"UnknownNamespace: {namespace!r}")


class NamespaceNotHeld(NibError):
    def __init__(self, namespace, app_id):
        self.namespace = namespace
        self.app_id = app_id
        super().__init__(f"session {app_id!r} does not hold namespace {namespace!r}")


class ChainMismatch(NibError):
    def __init__(self, namespace, expected, got, message=None):
        self.namespace = namespace
        self.expected = expected
        self.got = got
        super().__init__(
            message or f"namespace {namespace!r} is at {expected!r}, transformer starts at {got!r}"
        )


class TransformFailure(NibError):
    """A transformer could not be applied to a document.

    Raised by the DSL interpreter with ``directive``/``reason`` filled in; the
    store re-raises it with the key and version step attached.
    """

    def __init__(self, reason, directive=None, key=None, from_version=None,
                 to_version=None, cause=None):
        self.reason = reason
        self.directive = directive
        self.key = key
        self.from_version = from_version
        self.to_version = to_version
        self.cause = cause
        where = f" on key {key!r} ({from_version}->{to_version})" if key is not None else ""
        what = f" in {directive}" if directive else ""
        super().__init__(f"TransformFailure{where}{what}: {reason}")


class DslSyntaxError(ValueError):
    def __init__(self, message, line, col):
        self.message = message
        self.line = line
        self.col = col
        super().__init__(f"{line}:{col}: {message}")


class DuplicateRule(ValueError):
    pass


class ValidationError(ValueError):
    pass


class Unsupported(ValueError):
    def __init__(self, construct):
        self.construct = construct
        super().__init__(f"unsupported construct: {construct}")


class Disconnected(RuntimeError):
    pass


class UnknownSwitch(KeyError):
    pass


class UpdateInProgress(RuntimeError):
    pass


class NoUpdateInProgress(RuntimeError):
    pass


class NoServers(RuntimeError):
    pass


class UnreachableHost(RuntimeError):
    pass


class TopologyError(ValueError):
    pass


class UpdateAborted(RuntimeError):
    """Base for deploy aborts; ``report`` carries the partial UpdateReport."""

    kind = "Aborted"

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class AbortChainMismatch(UpdateAborted):
    kind = "ChainMismatch"


class AbortHoldTimeout(UpdateAborted):
    kind = "HoldTimeout"


class AbortAppStartFailure(UpdateAborted):
    kind = "AppStartFailure"
