"""Exception hierarchy shared by the detector, simulator and CLI."""


class BSentinelError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(BSentinelError, ValueError):
    """Invalid scenario, detector or baseline configuration."""


class DataError(BSentinelError, ValueError):
    """An observation violates a data precondition (e.g. non-positive time)."""


class InputError(BSentinelError):
    """A trace or event-log file cannot be read or fails its schema gate."""


class LifecycleError(BSentinelError, RuntimeError):
    """A transition was requested from the absorbing fail-stop state."""


class InjectionError(BSentinelError):
    """A fault was injected into a node that is not active."""


class OutputError(BSentinelError, OSError):
    """A report or log could not be written."""


class SupervisorSuspect(BSentinelError):
    """Every node disagreed with the expected digest.

    When the observed digests are disjoint from the expected one, the
    fault may sit in the supervisor rather than in the pool.
    """

    def __init__(self, node_ids):
        self.node_ids = tuple(sorted(node_ids))
        super().__init__(
            f"all {len(self.node_ids)} nodes returned a foreign digest; "
            "supervisor may be compromised"
        )
