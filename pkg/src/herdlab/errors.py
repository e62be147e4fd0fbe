"""Exception hierarchy for herdlab.

Every error carries an ``exit_code`` used by the command-line front end.
"""


class HerdlabError(Exception):
    exit_code = 1

    def to_record(self):
        return {"type": type(self).__name__, "message": str(self)}


class ValidationError(HerdlabError):
    """A coefficient or configuration violates a structural bound."""

    exit_code = 2

    def __init__(self, message, coefficient=None, point=None):
        super().__init__(message)
        self.coefficient = coefficient
        self.point = point

    def to_record(self):
        rec = super().to_record()
        rec["coefficient"] = self.coefficient
        rec["point"] = None if self.point is None else [float(v) for v in _flat(self.point)]
        return rec


class ScenarioError(ValidationError):
    """Malformed scenario document (bad field, wrong type, unknown key)."""

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field

    def to_record(self):
        rec = HerdlabError.to_record(self)
        rec["field"] = self.field
        return rec


class DimensionError(HerdlabError, ValueError):
    exit_code = 2


class SizeError(HerdlabError, ValueError):
    exit_code = 2


class CapacityError(HerdlabError, ValueError):
    exit_code = 2


class CoefficientError(HerdlabError, ArithmeticError):
    exit_code = 3


class BlowupError(HerdlabError, ArithmeticError):
    """Non-finite state produced by the integrator."""

    exit_code = 3

    def __init__(self, message, step=None, time=None, replica=None):
        super().__init__(message)
        self.step = step
        self.time = time
        self.replica = replica

    def to_record(self):
        rec = super().to_record()
        rec.update(step=self.step, time=self.time, replica=self.replica)
        return rec


class UnsupportedError(HerdlabError, ValueError):
    exit_code = 2


class FitError(HerdlabError, ValueError):
    exit_code = 3


class ObservableError(HerdlabError, ValueError):
    exit_code = 2


class MissingNoiseError(HerdlabError, ValueError):
    exit_code = 2


class EvaluationError(HerdlabError, RuntimeError):
    exit_code = 3


def _flat(x):
    try:
        import numpy as np

        return np.ravel(np.asarray(x, dtype=float))
    except Exception:  # pragma: no cover
        return []
