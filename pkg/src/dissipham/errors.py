class ConfigurationError(ValueError):
    """Invalid system, state, domain or scenario definition."""

    def __init__(self, message, field=None, line=None):
        self.field = field
        self.line = line
        prefix = ""
        if field is not None:
            prefix += f"{field}: "
        if line is not None:
            prefix = f"line {line}: " + prefix
        super().__init__(prefix + message)


class IntegrationError(RuntimeError):
    """Time integration could not continue; ``last_t`` is the last accepted time."""

    def __init__(self, message, last_t):
        self.last_t = last_t
        super().__init__(f"{message} (last good t = {last_t!r})")


class OutOfRangeError(ValueError):
    """A time query outside the stored interval."""


class ForceDomainError(ValueError):
    """A substituted force was evaluated outside the coordinate range it is defined on."""

    def __init__(self, coord, value, bounds, t=None):
        self.coord = coord
        bounds = tuple(float(b) for b in bounds)
        value = float(value)
        self.value = value
        self.bounds = bounds
        self.t = t
        where = "" if t is None else f" at t = {float(t)!r}"
        super().__init__(
            f"q_{coord + 1} = {value!r} outside force domain [{bounds[0]!r}, {bounds[1]!r}]{where}"
        )
