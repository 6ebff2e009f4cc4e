"""Exception hierarchy shared by all httpwatt modules."""


class HttpWattError(Exception):
    """Base class for every error raised by this package."""


# power
class CalibrationError(HttpWattError, ValueError):
    pass


class UnderDetermined(CalibrationError):
    """Too few calibration rows for the requested model kind."""


class DegenerateDesign(CalibrationError):
    """A regressor has zero variance, so its coefficient is not identifiable."""


class OutOfRangeSample(HttpWattError, ValueError):
    """A utilization field lies outside [0, 1]."""


class UnsortedTimeline(HttpWattError, ValueError):
    pass


class TooFewSamples(HttpWattError, ValueError):
    pass


# planner / sla
class EmptyDataset(HttpWattError, ValueError):
    pass


class NoActiveGroups(HttpWattError):
    """Every subgroup has finished; there is nobody to hand channels to."""


class DatasetExhaustedDuringSearch(HttpWattError):
    """The dataset completed before the efficiency search visited every probe."""


class TargetUnreachable(HttpWattError):
    """Concurrency hit its ceiling while throughput stayed below target."""


# transport
class TransportError(HttpWattError):
    pass


class ChannelError(TransportError):
    pass


class FileFailed(TransportError):
    def __init__(self, file_id: str, reason: str):
        super().__init__(f"{file_id}: {reason}")
        self.file_id = file_id
        self.reason = reason


class PipelineUnsupported(TransportError):
    pass


class Unreachable(TransportError):
    pass


class HeadNotAllowed(TransportError):
    pass


# telemetry
class MetricsUnavailable(HttpWattError):
    pass


# cli
class SchemaMismatch(HttpWattError, ValueError):
    def __init__(self, path, detail: str):
        super().__init__(f"{path}: {detail}")
        self.path = path
        self.detail = detail
