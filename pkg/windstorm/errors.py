from typing import Optional


class WindstormError(Exception):
    """Error base del paquete"""


class ConfigError(WindstormError):
    pass


class FieldFormatError(WindstormError):
    """Contenedor de campos mal formado; `offset` es el byte donde se detectó"""

    def __init__(self, message: str, offset: Optional[int] = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (byte {offset})"
        super().__init__(message)


class TrackFormatError(WindstormError):
    pass


class FitError(WindstormError):
    pass


class ConvergenceError(FitError):
    def __init__(self, message: str, iterations: int):
        self.iterations = iterations
        super().__init__(f"{message} tras {iterations} iteraciones")


class ExtractionError(WindstormError):
    pass


class SimulationError(WindstormError):
    pass
