from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .fields import Seed, TimeStep


__all__ = ["MeasurementRecord", "TrajectorySeries", "WienerRealization"]


@dataclass
class WienerRealization:
    """One sampled path of Wiener increments dW_1..dW_K on a fixed time step."""

    dt: float
    increments: np.ndarray
    seed: None | int = None

    kind = "dW"

    def __post_init__(self):
        self.dt = TimeStep.validate_time_step(self.dt)
        self.increments = np.asarray(self.increments, dtype=float)
        self.seed = Seed(self.seed).value

    @property
    def steps(self) -> int:
        return int(self.increments.shape[0])

    @property
    def total_time(self) -> float:
        return self.steps * self.dt

    def times(self) -> np.ndarray:
        return self.dt * np.arange(self.steps + 1)

    def coarsen(self, factor: int) -> WienerRealization:
        """Sum increments in consecutive groups of ``factor``; the same Brownian path on a coarser grid."""
        if factor < 1 or self.steps % factor:
            raise ValueError(f"Coarsening factor should divide {self.steps} steps, entered: {factor}")
        summed = self.increments.reshape(self.steps // factor, factor, *self.increments.shape[1:]).sum(axis=1)
        return WienerRealization(dt=self.dt * factor, increments=summed, seed=self.seed)


@dataclass
class MeasurementRecord:
    """Measured increments dY_1..dY_K, optionally tagged with the field that produced them."""

    dt: float
    increments: np.ndarray
    b_true: None | float = None
    seed: None | int = None

    kind = "dY"

    def __post_init__(self):
        self.dt = TimeStep.validate_time_step(self.dt)
        self.increments = np.asarray(self.increments, dtype=float)
        self.seed = Seed(self.seed).value
        if self.b_true is not None:
            self.b_true = float(self.b_true)

    @property
    def steps(self) -> int:
        return int(self.increments.shape[0])

    @property
    def total_time(self) -> float:
        return self.steps * self.dt

    def times(self) -> np.ndarray:
        return self.dt * np.arange(self.steps + 1)

    def coarsen(self, factor: int) -> MeasurementRecord:
        """Sum increments in consecutive groups of ``factor``: the record integrated over coarser time bins."""
        if factor < 1 or self.steps % factor:
            raise ValueError(f"Coarsening factor should divide {self.steps} steps, entered: {factor}")
        summed = self.increments.reshape(self.steps // factor, factor, *self.increments.shape[1:]).sum(axis=1)
        return MeasurementRecord(dt=self.dt * factor, increments=summed, b_true=self.b_true, seed=self.seed)

    def member(self, index: int) -> MeasurementRecord:
        """Record of one batch member when the record was emitted by a batched trajectory."""
        return MeasurementRecord(self.dt, self.increments[:, index], b_true=self.b_true, seed=self.seed)


@dataclass
class TrajectorySeries:
    """States sampled along a trajectory plus the full record it emitted or consumed.

    ``states`` has shape (samples, *batch, d, d); ``sample_steps`` holds the step index of each sample.
    """

    times: np.ndarray
    sample_steps: np.ndarray
    states: np.ndarray
    record: MeasurementRecord
    innovations: np.ndarray
    integrator: str = "kraus"
    stride: int = 1
    extras: dict = field(default_factory=dict)

    @property
    def final_state(self) -> np.ndarray:
        return self.states[-1]

    def __len__(self):
        return len(self.times)
