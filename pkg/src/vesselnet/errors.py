"""Exception hierarchy shared by every vesselnet module."""


class VesselNetError(Exception):
    """Base class for all errors raised by vesselnet."""

    exit_code = 1


class ShapeError(VesselNetError, ValueError):
    pass


class AxisError(VesselNetError, ValueError):
    pass


class ContractError(VesselNetError, ValueError):
    pass


class ConfigError(VesselNetError, ValueError):
    exit_code = 2


class IngestError(VesselNetError, OSError):
    exit_code = 3


class FormatError(VesselNetError, ValueError):
    """Malformed checkpoint file; ``offset`` is the byte position of the fault."""

    exit_code = 4

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class DivergenceError(VesselNetError, FloatingPointError):
    exit_code = 5


class DegenerateError(VesselNetError, ValueError):
    pass
