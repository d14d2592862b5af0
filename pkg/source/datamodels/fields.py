from __future__ import annotations

import math

from source.utils import UINT64_LIMIT


__all__ = [
    "Choice",
    "Duration",
    "Field",
    "FieldStrength",
    "FokkerPlanckMethod",
    "FP_METHODS",
    "INTEGRATORS",
    "IntegratorName",
    "MaxOrder",
    "PositiveFloat",
    "PositiveInt",
    "QubitCount",
    "RECORD_KINDS",
    "RecordKind",
    "Seed",
    "StepCount",
    "TimeStep",
]

INTEGRATORS = ("euler", "kraus")
RECORD_KINDS = ("dW", "dY")
FP_METHODS = ("euler", "exponential")


class Field:
    def __init__(self, value):
        self.value = value

    def __str__(self):
        return str(self.value)


class TimeStep(Field):
    def __init__(self, value):
        super().__init__(value=self.validate_time_step(value))

    @staticmethod
    def validate_time_step(value) -> float:
        """Validate time step, raises ValueError if it is not a positive finite number"""
        try:
            dt = float(value)
            if not math.isfinite(dt) or dt <= 0:
                raise ValueError
        except (TypeError, ValueError) as e:
            raise ValueError(f"Time step should be a positive finite number, entered: {value}") from e

        return dt


class Duration(Field):
    def __init__(self, value):
        super().__init__(value=self.validate_duration(value))

    @staticmethod
    def validate_duration(value) -> float:
        """Validate total time, raises ValueError if it is negative or not finite"""
        try:
            total = float(value)
            if not math.isfinite(total) or total < 0:
                raise ValueError
        except (TypeError, ValueError) as e:
            raise ValueError(f"Duration should be a non-negative finite number, entered: {value}") from e

        return total


class FieldStrength(Field):
    """Magnetic field B in units of the measurement rate."""

    def __init__(self, value):
        super().__init__(value=self.validate_field(value))

    @staticmethod
    def validate_field(value) -> float:
        try:
            b = float(value)
            if not math.isfinite(b):
                raise ValueError
        except (TypeError, ValueError) as e:
            raise ValueError(f"Field should be a finite number, entered: {value}") from e

        return b


class PositiveFloat(Field):
    def __init__(self, value):
        super().__init__(value=self.validate_positive(value))

    @staticmethod
    def validate_positive(value) -> float:
        """Validate a rate or bound, raises ValueError if it is not strictly positive"""
        try:
            number = float(value)
            if not math.isfinite(number) or number <= 0:
                raise ValueError
        except (TypeError, ValueError) as e:
            raise ValueError(f"Value should be a positive finite number, entered: {value}") from e

        return number


class QubitCount(Field):
    def __init__(self, value):
        super().__init__(value=self.validate_qubits(value))

    @staticmethod
    def validate_qubits(value) -> int:
        """Validate number of qubits, raises ValueError if it is not a positive integer"""
        count = PositiveInt.validate_positive_int(value)
        if count > 400:
            raise ValueError(f"Dense Dicke matrices are limited to 400 qubits, entered: {value}")
        return count


class PositiveInt(Field):
    def __init__(self, value):
        super().__init__(value=self.validate_positive_int(value))

    @staticmethod
    def validate_positive_int(value) -> int:
        try:
            if isinstance(value, bool) or float(value) != int(float(value)):
                raise ValueError
            number = int(float(value))
            if number < 1:
                raise ValueError
        except (TypeError, ValueError, OverflowError) as e:
            raise ValueError(f"Value should be a positive integer, entered: {value}") from e

        return number


class StepCount(Field):
    def __init__(self, value):
        super().__init__(value=self.validate_steps(value))

    @staticmethod
    def validate_steps(value) -> int:
        """Validate number of steps, raises ValueError if it is negative or not integral"""
        try:
            if isinstance(value, bool) or float(value) != int(float(value)):
                raise ValueError
            steps = int(float(value))
            if steps < 0:
                raise ValueError
        except (TypeError, ValueError, OverflowError) as e:
            raise ValueError(f"Number of steps should be a non-negative integer, entered: {value}") from e

        return steps


class Seed(Field):
    def __init__(self, value):
        if value is not None and value != "none":
            value = self.validate_seed(value)
        else:
            value = None
        super().__init__(value=value)

    @staticmethod
    def validate_seed(value) -> int:
        """Validate seed, raises ValueError if it is not an unsigned 64-bit integer"""
        try:
            seed = int(value)
            if not 0 <= seed < UINT64_LIMIT:
                raise ValueError
        except (TypeError, ValueError) as e:
            raise ValueError(f"Seed should be an unsigned 64-bit integer, entered: {value}") from e

        return seed

    def __str__(self):
        return "none" if self.value is None else str(self.value)


class MaxOrder(Field):
    """Fourier mode cap M of a stationary distribution."""

    def __init__(self, value):
        super().__init__(value=self.validate_max_order(value))

    @staticmethod
    def validate_max_order(value) -> int:
        try:
            order = PositiveInt.validate_positive_int(value)
            if order < 2 or order % 2:
                raise ValueError
        except ValueError as e:
            raise ValueError(f"Mode cap should be an even integer >= 2, entered: {value}") from e

        return order


class Choice(Field):
    """Generic class for enumerated knobs"""

    options: tuple[str, ...] = ()

    def __init__(self, value):
        super().__init__(value=self.validate_choice(value, self.options))

    @staticmethod
    def validate_choice(value, options: tuple[str, ...]) -> str:
        if value not in options:
            raise ValueError(f"Value should be one of {', '.join(options)}, entered: {value}")
        return value


class IntegratorName(Choice):
    options = INTEGRATORS


class RecordKind(Choice):
    options = RECORD_KINDS


class FokkerPlanckMethod(Choice):
    options = FP_METHODS
