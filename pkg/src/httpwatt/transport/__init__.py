"""Transport implementations behind one contract: the HTTP/1.1 engine and, in
:mod:`httpwatt.simulator`, a deterministic simulated path."""
from .base import (
    EventKind,
    GroupStats,
    RangeTask,
    Transport,
    TransferEvent,
    WindowReport,
    split_ranges,
)
from .http import (
    ChannelState,
    HostCapabilities,
    HttpTransport,
    discover_sizes,
    probe,
    probe_capabilities,
)

__all__ = [
    "ChannelState",
    "EventKind",
    "GroupStats",
    "HostCapabilities",
    "HttpTransport",
    "RangeTask",
    "Transport",
    "TransferEvent",
    "WindowReport",
    "discover_sizes",
    "probe",
    "probe_capabilities",
    "split_ranges",
]
