"""Exception hierarchy shared by every fusionbench module."""


class FusionBenchError(Exception):
    pass


class DimensionError(FusionBenchError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(FusionBenchError):
    """An API precondition was violated (e.g. backward on a non-scalar)."""


class ValidationError(FusionBenchError, ValueError):
    pass


class ConfigError(FusionBenchError, ValueError):
    pass


class DegenerateDataError(FusionBenchError, ValueError):
    pass


class ParseError(FusionBenchError, ValueError):
    """Malformed binary input. ``offset`` is the byte position of the fault."""

    def __init__(self, message, offset=0):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class TruncationError(ParseError):
    pass


class RecordValueError(ParseError):
    """A record field holds an out-of-range value; ``record`` is its index."""

    def __init__(self, message, record, offset):
        super().__init__(f"record {record}: {message}", offset)
        self.record = record
