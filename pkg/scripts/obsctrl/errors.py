# scripts/obsctrl/errors.py
"""
Jerarquía de errores del paquete.

Las funciones de librería lanzan estas excepciones; sólo la CLI las
convierte en códigos de salida (2 validación, 3 fallo numérico,
4 no convergencia).
"""


class ObsCtrlError(Exception):
    """Base de todos los errores de obsctrl."""

    exit_code = 1

    def __init__(self, message, **context):
        super().__init__(message)
        self.message = message
        self.context = context

    def to_dict(self):
        payload = {
            "error": type(self).__name__,
            "message": self.message,
            "exit_code": self.exit_code,
        }
        for key, value in self.context.items():
            if value is not None:
                payload[key] = value
        return payload


class ValidationError(ObsCtrlError):
    """Entrada inválida (escenario, dimensiones, parámetros)."""

    exit_code = 2

    def __init__(self, message, field=None, **context):
        super().__init__(message, field=field, **context)
        self.field = field


class ExpressionSyntaxError(ObsCtrlError):
    """Texto de expresión mal formado; `offset` es la posición en bytes."""

    exit_code = 2

    def __init__(self, message, offset=None, text=None):
        super().__init__(message, offset=offset, text=text)
        self.offset = offset
        self.text = text


class NumericalError(ObsCtrlError):
    exit_code = 3


class DivergenceError(NumericalError):
    """Estado no finito durante la integración."""

    def __init__(self, message, time=None, **context):
        super().__init__(message, time=time, **context)
        self.time = time


class DomainError(NumericalError):
    """Evaluación fuera del dominio del modelo."""

    def __init__(self, message, time=None, detail=None, **context):
        super().__init__(message, time=time, detail=detail, **context)
        self.time = time
        self.detail = detail


class OutputDomainError(DomainError):
    """La trayectoria tocó una singularidad del sensor (p.ej. x1 = 0)."""


class ExpressionDomainError(DomainError):
    """División por cero, log de no positivo, etc. `detail` es la subexpresión."""


class RiccatiError(NumericalError):
    """Newton-Kleinman no encontró una solución estabilizante."""


class NonConvergenceError(ObsCtrlError):
    exit_code = 4


def with_time(error, time):
    """Devuelve el mismo error anotado con el instante de fallo (si no lo tenía)."""
    if isinstance(error, (DomainError, DivergenceError)) and error.time is None:
        error.time = float(time)
        error.context["time"] = float(time)
    return error
