from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from source.utils import wrap_angle


__all__ = [
    "AngularState",
    "BlochState",
    "CollectiveOps",
    "DensityMatrix",
    "dagger",
    "expectation",
]

HERMITIAN_TOL = 1e-10
TRACE_TOL = 1e-10
EIGENVALUE_TOL = 1e-8
BLOCH_NORM_TOL = 1e-9


def dagger(matrix: np.ndarray) -> np.ndarray:
    """Conjugate transpose over the last two axes."""
    return np.conj(np.swapaxes(matrix, -1, -2))


def expectation(rho: np.ndarray, op: np.ndarray) -> np.ndarray | float:
    """Real part of tr[rho @ op], batched over leading axes of ``rho``."""
    value = np.einsum("...ij,ji->...", rho, op).real
    return float(value) if np.ndim(value) == 0 else value


@dataclass(frozen=True, eq=False)
class CollectiveOps:
    """Collective angular-momentum matrices on the (N+1)-dimensional Dicke subspace."""

    n_qubits: int
    jx: np.ndarray
    jy: np.ndarray
    jz: np.ndarray

    @property
    def dim(self) -> int:
        return self.n_qubits + 1

    @property
    def total_spin(self) -> float:
        return self.n_qubits / 2

    @cached_property
    def jz_squared(self) -> np.ndarray:
        return self.jz @ self.jz

    @cached_property
    def identity(self) -> np.ndarray:
        return np.eye(self.dim, dtype=complex)

    def residuals(self) -> dict[str, float]:
        """Max-norm residuals of Hermiticity, the [jx, jy] = i jz commutator and the Casimir."""
        casimir = self.jx @ self.jx + self.jy @ self.jy + self.jz_squared
        j = self.total_spin
        return {
            "hermiticity": max(float(np.max(np.abs(op - dagger(op)))) for op in (self.jx, self.jy, self.jz)),
            "commutator": float(np.max(np.abs(self.jx @ self.jy - self.jy @ self.jx - 1j * self.jz))),
            "casimir": float(np.max(np.abs(casimir - j * (j + 1) * self.identity))),
        }


class DensityMatrix:
    """Hermitian, unit-trace, positive semidefinite matrix on the Dicke subspace.

    Integrators work on plain arrays; this wrapper marks the validated boundary and exposes the
    usual scalar summaries.
    """

    def __init__(self, data, validate: bool = True):
        data = np.array(data, dtype=complex)
        if data.ndim != 2 or data.shape[0] != data.shape[1]:
            raise ValueError(f"Density matrix should be a square 2D array, entered shape: {data.shape}")
        if validate:
            self.validate_density_matrix(data)
        self.data = data

    @staticmethod
    def validate_density_matrix(data: np.ndarray) -> None:
        """Validate density matrix invariants, raises ValueError on the first violated one"""
        hermiticity = float(np.max(np.abs(data - dagger(data))))
        if hermiticity > HERMITIAN_TOL:
            raise ValueError(f"Density matrix should be Hermitian, residual: {hermiticity:.3e}")

        trace = np.trace(data)
        if abs(trace - 1) > TRACE_TOL:
            raise ValueError(f"Density matrix should have unit trace, entered trace: {trace:.12g}")

        min_eigenvalue = float(np.linalg.eigvalsh(0.5 * (data + dagger(data)))[0])
        if min_eigenvalue < -EIGENVALUE_TOL:
            raise ValueError(f"Density matrix should be positive, minimum eigenvalue: {min_eigenvalue:.3e}")

    @property
    def dim(self) -> int:
        return self.data.shape[0]

    def purity(self) -> float:
        return float(np.einsum("ij,ji->", self.data, self.data).real)

    def expectation(self, op: np.ndarray) -> float:
        return expectation(self.data, op)

    def min_eigenvalue(self) -> float:
        return float(np.linalg.eigvalsh(self.data)[0])

    def __array__(self, dtype=None, copy=None):
        return self.data if dtype is None else self.data.astype(dtype)

    def __repr__(self):
        return f"DensityMatrix(dim={self.dim}, purity={self.purity():.6f})"


@dataclass
class BlochState:
    """Single-qubit Bloch vector, rho = I/2 + rho_x jx + rho_y jy + rho_z jz."""

    rho_x: float
    rho_y: float
    rho_z: float

    @classmethod
    def from_array(cls, values) -> BlochState:
        rho_x, rho_y, rho_z = (float(v) for v in values)
        return cls(rho_x, rho_y, rho_z)

    @classmethod
    def from_matrix(cls, rho, ops: CollectiveOps) -> BlochState:
        """Read Bloch components as 2 tr[rho j_a]; ``ops`` must be the single-qubit set."""
        rho = np.asarray(rho)
        return cls(2 * expectation(rho, ops.jx), 2 * expectation(rho, ops.jy), 2 * expectation(rho, ops.jz))

    def to_array(self) -> np.ndarray:
        return np.array([self.rho_x, self.rho_y, self.rho_z], dtype=float)

    def to_matrix(self, ops: CollectiveOps) -> DensityMatrix:
        if ops.n_qubits != 1:
            raise ValueError(f"Bloch states describe a single qubit, entered ops for {ops.n_qubits} qubits")
        data = 0.5 * ops.identity + self.rho_x * ops.jx + self.rho_y * ops.jy + self.rho_z * ops.jz
        return DensityMatrix(data)

    def norm_squared(self) -> float:
        return self.rho_x**2 + self.rho_y**2 + self.rho_z**2

    def validate(self) -> BlochState:
        """Raises ValueError if the vector lies outside the Bloch ball."""
        if self.norm_squared() > 1 + BLOCH_NORM_TOL:
            raise ValueError(f"Bloch vector should have norm <= 1, entered: {self.to_array()}")
        return self

    def to_angular(self) -> AngularState:
        """Polar form of the (rho_x, rho_z) plane, rho_x + i rho_z = r exp(i theta)."""
        return AngularState(r=float(np.hypot(self.rho_x, self.rho_z)), theta=float(np.arctan2(self.rho_z, self.rho_x)))


@dataclass
class AngularState:
    r: float
    theta: float = field(default=0.0)

    def __post_init__(self):
        if self.r < 0:
            raise ValueError(f"Radius should be non-negative, entered: {self.r}")
        self.theta = wrap_angle(self.theta)

    @property
    def mixedness(self) -> float:
        """1 - r^2, the distance from purity of a state with vanishing rho_y."""
        return 1 - self.r**2

    def to_bloch(self) -> BlochState:
        return BlochState(self.r * np.cos(self.theta), 0.0, self.r * np.sin(self.theta))
