class ConheatError(Exception):
    """Base class for all errors raised by conheat."""


class InputError(ConheatError, ValueError):
    """Bad user input: unknown generator, unparsable file, invalid parameter."""


class GeometryError(ConheatError, ValueError):
    """The sampled geometry cannot support the requested operation
    (disconnected graph, rank-deficient neighborhood, singular transport)."""


class SpectrumError(ConheatError, RuntimeError):
    """Eigensolver failure, or a request that the computed spectrum cannot serve."""
