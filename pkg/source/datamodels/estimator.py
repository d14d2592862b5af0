from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .spin import dagger


__all__ = ["EstimatorState"]


@dataclass
class EstimatorState:
    """Conditioned estimate of the state together with the field estimate and likelihood accumulators.

    Attributes:
        rho_est: Estimated density matrix.
        tau: B-derivative of the un-normalised state divided by its trace.
        b_est: Current field estimate.
        loglik: Accumulated Ito log-likelihood.
        loglik_grad: Accumulated B-gradient of the log-likelihood.
        log_norm: Accumulated log of the Kraus normalisations, the exact discrete log-likelihood.
        step: Number of record increments consumed.
    """

    rho_est: np.ndarray
    tau: np.ndarray
    b_est: float = 0.0
    loglik: float = 0.0
    loglik_grad: float = 0.0
    log_norm: float = 0.0
    step: int = 0

    @classmethod
    def start(cls, rho, b_est: float = 0.0) -> EstimatorState:
        """Fresh estimator: tau starts at zero since the initial state does not depend on B."""
        rho = np.array(rho, dtype=complex)
        return cls(rho_est=rho, tau=np.zeros_like(rho), b_est=float(b_est))

    def tau_trace(self) -> float:
        return float(np.trace(self.tau).real)

    def tau_hermiticity(self) -> float:
        return float(np.max(np.abs(self.tau - dagger(self.tau))))

    def evolve(self, **changes) -> EstimatorState:
        return replace(self, **changes)
