from __future__ import annotations

from dataclasses import dataclass

import numpy as np


__all__ = ["CFCoefficients", "FourierDistribution"]

C0 = 1 / (2 * np.pi)


@dataclass(frozen=True)
class CFCoefficients:
    """Three-term recursion coefficients of the stationary angular density at mode index m.

    Q_m = 1 - 4iB/m and Q+-_m = (1 -+ 1/m)/2.
    """

    m: int
    q: complex
    q_plus: complex
    q_minus: complex

    @classmethod
    def at(cls, b: float, m: int) -> CFCoefficients:
        if m == 0:
            raise ValueError("Recursion coefficients are undefined at m=0")
        return cls(m=m, q=1 - 4j * b / m, q_plus=0.5 * (1 - 1 / m), q_minus=0.5 * (1 + 1 / m))


@dataclass
class FourierDistribution:
    """Periodic density P(theta) = sum_m c_m exp(-i m theta) on (-pi, pi].

    ``coeffs`` is indexed by m + max_order for m = -M..M.
    """

    b: float
    coeffs: np.ndarray
    max_order: int
    quotients: None | np.ndarray = None

    @classmethod
    def from_positive_modes(cls, b: float, positive: np.ndarray, quotients: None | np.ndarray = None) -> FourierDistribution:
        """Assemble the two-sided vector from c_0..c_M by conjugate symmetry."""
        positive = np.asarray(positive, dtype=complex)
        max_order = positive.shape[0] - 1
        coeffs = np.concatenate([np.conj(positive[:0:-1]), positive])
        return cls(b=float(b), coeffs=coeffs, max_order=max_order, quotients=quotients)

    @property
    def modes(self) -> np.ndarray:
        return np.arange(-self.max_order, self.max_order + 1)

    def coefficient(self, m: int) -> complex:
        if abs(m) > self.max_order:
            return 0j
        return complex(self.coeffs[m + self.max_order])

    @property
    def positive(self) -> np.ndarray:
        """c_0..c_M"""
        return self.coeffs[self.max_order:]

    def symmetry_residual(self) -> float:
        """max |c_-m - conj(c_m)|"""
        return float(np.max(np.abs(self.coeffs[::-1] - np.conj(self.coeffs))))
