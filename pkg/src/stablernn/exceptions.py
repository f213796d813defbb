"""Exception types raised across the package."""


class ShapeError(ValueError):
    """A weight matrix, state or input has the wrong shape.

    ``name`` identifies the offending array.
    """

    def __init__(self, name, expected, got):
        self.name = name
        self.expected = tuple(expected) if expected is not None else None
        self.got = tuple(got) if got is not None else None
        super().__init__(f"{name}: expected shape {self.expected}, got {self.got}")


class NonFiniteError(FloatingPointError):
    """A simulated trajectory produced inf/nan; ``step`` is the first bad index."""

    def __init__(self, step, what="state"):
        self.step = int(step)
        super().__init__(f"non-finite {what} at time step {self.step}")


class PlantEventError(RuntimeError):
    """The plant left its admissible region (vessel emptied, fraction bound hit...)."""

    def __init__(self, vessel, variable, value):
        self.vessel = vessel
        self.variable = variable
        self.value = value
        super().__init__(f"vessel {vessel}: {variable} left admissible range (value {value!r})")


class CertificationError(RuntimeError):
    """Training ended without any snapshot satisfying the stability certificate."""

    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


class ModelFileError(ValueError):
    """A model/report file could not be parsed; ``location`` is ``line:col`` when known."""

    def __init__(self, message, location=None):
        self.location = location
        super().__init__(f"{message} (at {location})" if location else message)


class UnknownArchitectureError(ModelFileError):
    pass
