"""Collective spin operators and canonical initial states on the Dicke subspace of N qubits.

The Dicke basis is ordered by ascending magnetic number, m = -J..J with J = N/2, so ``jz`` is
diag(-J, ..., J) and the raising operator sits on the first sub-diagonal.
"""
from __future__ import annotations

import logging

import numpy as np
from scipy import linalg

from source.datamodels import BlochState, CollectiveOps, DensityMatrix, QubitCount


logger = logging.getLogger(__name__)


def build_collective_ops(n_qubits: int) -> CollectiveOps:
    """Build jx, jy, jz for total spin J = N/2 from the ladder operators.

    Args:
        n_qubits: Number of qubits N (at least 1).

    Returns:
        CollectiveOps with (N+1)x(N+1) complex matrices.

    Raises:
        ValueError: if n_qubits is not a positive integer.
    """
    n_qubits = QubitCount.validate_qubits(n_qubits)
    j = n_qubits / 2
    m = np.arange(n_qubits + 1, dtype=float) - j

    # <m+1| J+ |m> = sqrt(J(J+1) - m(m+1))
    raising = np.diag(np.sqrt(j * (j + 1) - m[:-1] * (m[:-1] + 1)), k=-1).astype(complex)
    lowering = raising.T.copy()

    ops = CollectiveOps(
        n_qubits=n_qubits,
        jx=0.5 * (raising + lowering),
        jy=-0.5j * (raising - lowering),
        jz=np.diag(m).astype(complex),
    )
    logger.debug("Built collective operators for N=%d, residuals %s", n_qubits, ops.residuals())
    return ops


def coherent_state_x(ops: CollectiveOps) -> DensityMatrix:
    """Pure spin-coherent state along +x, the top eigenvector of jx."""
    _, vectors = linalg.eigh(ops.jx)
    top = vectors[:, -1]
    # fix global phase so the largest component is real positive
    pivot = np.argmax(np.abs(top))
    top = top * np.exp(-1j * np.angle(top[pivot]))
    rho = np.outer(top, top.conj())
    return DensityMatrix(0.5 * (rho + rho.conj().T))


def max_entropy_state(ops: CollectiveOps) -> DensityMatrix:
    """Identity on the Dicke subspace, normalised."""
    return DensityMatrix(ops.identity / ops.dim)


def qubit_state(rho_x: float, rho_z: float, rho_y: float = 0.0, ops: None | CollectiveOps = None) -> DensityMatrix:
    """Single-qubit density matrix from Bloch components."""
    ops = ops or build_collective_ops(1)
    return BlochState(rho_x, rho_y, rho_z).validate().to_matrix(ops)


def jz_eigenstate(ops: CollectiveOps, index: int = -1) -> DensityMatrix:
    """Projector on the ``index``-th Dicke state (default: m = +J)."""
    rho = np.zeros((ops.dim, ops.dim), dtype=complex)
    rho[index, index] = 1
    return DensityMatrix(rho)
