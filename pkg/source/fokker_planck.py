"""Fokker-Planck analysis of the pure-state angle SDE dtheta = (b + sin(2 theta)/4) dt + cos(theta) dW.

The density is expanded as P(theta) = sum_m c_m exp(-i m theta). Stationarity gives the three-term
recursion Q_m c_m + Q+_m c_{m+2} + Q-_m c_{m-2} = 0 (even m != 0), solved through the quotients
S_m = c_{m+2} / c_m by backward continued fractions. The time-dependent equation is evolved on the
truncated mode-coupling system dc_m/dt = -(m^2/4) [Q_m c_m + Q+_m c_{m+2} + Q-_m c_{m-2}].
"""
from __future__ import annotations

from dataclasses import dataclass
import logging
import math
import warnings

import numpy as np
from scipy import linalg, sparse
from scipy.special import rel_entr

from source.datamodels import (
    CFCoefficients,
    FieldStrength,
    FokkerPlanckMethod,
    FourierDistribution,
    MaxOrder,
    PositiveInt,
    StepCount,
    TimeStep,
)
from source.errors import NumericalFailure
from source.utils import make_rng
from source.trajectory import iter_angular_path


logger = logging.getLogger(__name__)

C0 = 1 / (2 * math.pi)
DENOMINATOR_FLOOR = 1e-300
CONVERGENCE_TOL = 1e-10
MAX_DEPTH = 3200
MIN_CF_FIELD = 1e-3
TAIL_WEIGHT_TOL = 1e-8
DEFAULT_MAX_ORDER = 500
DEFAULT_DEPTH = 100
DEFAULT_GRID = 4096
DEFAULT_BINS = 63
INSTABILITY_BOUND = 1e6


def recursion_coefficients(b: float, m) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorised (Q_m, Q+_m, Q-_m) for m != 0."""
    m = np.asarray(m, dtype=float)
    return 1 - 4j * b / m, 0.5 * (1 - 1 / m), 0.5 * (1 + 1 / m)


def continued_fraction(a, b, depth: int, tail: complex = 0.0) -> complex:
    """Evaluate the depth-th approximant a_1 / (b_1 + a_2 / (b_2 + ... a_depth / (b_depth + tail))).

    Args:
        a: Partial numerators a_1, a_2, ...
        b: Partial denominators b_1, b_2, ...
        depth: Number of levels used.
        tail: Estimate of the remainder added to the deepest denominator.

    Raises:
        ValueError: if depth exceeds the length of either list or is below 1.
        NumericalFailure: if a denominator falls below 1e-300 in modulus.
    """
    if depth < 1 or depth > len(a) or depth > len(b):
        raise ValueError(f"Depth should be between 1 and the list lengths ({len(a)}, {len(b)}), entered: {depth}")

    value = tail
    for p in range(depth - 1, -1, -1):
        denominator = b[p] + value
        if abs(denominator) < DENOMINATOR_FLOOR:
            raise NumericalFailure(f"continued fraction denominator vanished at level {p + 1}")
        value = a[p] / denominator
    return value


def partial_quotient_lists(b: float, m: int, depth: int) -> tuple[np.ndarray, np.ndarray]:
    """Partial numerators and denominators whose continued fraction is S_m.

    S_m = -Q-_{m+2} / (Q_{m+2} - Q+_{m+2} Q-_{m+4} / (Q_{m+4} - ...)).
    """
    if m < 0 or m % 2:
        raise ValueError(f"Quotient index should be a non-negative even integer, entered: {m}")
    idx = m + 2 * np.arange(1, depth + 1)
    q, q_plus, q_minus = recursion_coefficients(b, idx)
    numerators = np.empty(depth, dtype=complex)
    numerators[0] = -q_minus[0]
    numerators[1:] = -q_plus[:-1] * q_minus[1:]
    return numerators, q.astype(complex)


def quotient_tail(b: float, n: int) -> complex:
    """Minimal-modulus root of Q+_n S^2 + Q_n S + Q-_n = 0, the fixed point of the recursion at index n.

    Used as Q+_n S_n to close a truncated fraction. At b = 0 the root is exactly -1.
    """
    coeffs = CFCoefficients.at(b, n)
    disc = np.sqrt(complex(coeffs.q * coeffs.q - 4 * coeffs.q_plus * coeffs.q_minus))
    sign = 1.0 if (coeffs.q.conjugate() * disc).real >= 0 else -1.0
    half = -0.5 * (coeffs.q + sign * disc)
    roots = (half / coeffs.q_plus, coeffs.q_minus / half)
    return min(roots, key=abs)


def quotient(b: float, m: int, depth: int = DEFAULT_DEPTH, close_tail: bool = True) -> complex:
    """S_m from its continued fraction truncated at ``depth`` levels.

    With ``close_tail`` the deepest denominator receives Q+_n S_n, S_n taken from ``quotient_tail``.
    """
    numerators, denominators = partial_quotient_lists(b, m, depth)
    tail = 0.0
    if close_tail:
        n = m + 2 * depth
        tail = CFCoefficients.at(b, n).q_plus * quotient_tail(b, n + 2)
    return continued_fraction(numerators, denominators, depth, tail)


def _quotient_sweep(b: float, max_order: int, depth: int) -> np.ndarray:
    """S_0, S_2, ..., S_max_order from one backward sweep seeded by the tail root."""
    top = max_order + 2 * depth
    quotients = np.empty(top // 2 + 1, dtype=complex)
    quotients[-1] = quotient_tail(b, top + 2)
    for k in range(top // 2 - 1, -1, -1):
        n = 2 * k + 2
        q, q_plus, q_minus = 1 - 4j * b / n, 0.5 * (1 - 1 / n), 0.5 * (1 + 1 / n)
        denominator = q + q_plus * quotients[k + 1]
        if abs(denominator) < DENOMINATOR_FLOOR:
            raise NumericalFailure(f"quotient recursion denominator vanished at m={n}")
        quotients[k] = -q_minus / denominator
    return quotients[: max_order // 2 + 1]


def suggest_max_order(b: float, tol: float = 1e-12) -> int:
    """Smallest even mode cap with c_M / c_0 below ``tol``, from |c_m| ~ c_0 exp(-2 sqrt(|b| m))."""
    if b == 0:
        raise ValueError("The b=0 distribution has no decaying Fourier tail")
    order = math.ceil(math.log(1 / tol) ** 2 / (4 * abs(b)))
    return max(2, order + order % 2)


def zero_field_distribution(max_order: int = DEFAULT_MAX_ORDER) -> FourierDistribution:
    """P = (delta(theta - pi/2) + delta(theta + pi/2)) / 2, i.e. c_2m = (-1)^m / (2 pi), odd modes zero."""
    max_order = MaxOrder.validate_max_order(max_order)
    positive = np.zeros(max_order + 1, dtype=complex)
    positive[::2] = C0 * (-1.0) ** np.arange(max_order // 2 + 1)
    return FourierDistribution.from_positive_modes(0.0, positive, quotients=-np.ones(max_order // 2 + 1, dtype=complex))


def _modes_from_quotients(quotients: np.ndarray, max_order: int) -> np.ndarray:
    positive = np.zeros(max_order + 1, dtype=complex)
    positive[0] = C0
    for k, quotient in enumerate(quotients[:-1]):
        positive[2 * k + 2] = quotient * positive[2 * k]
    return positive


def _converged_quotients(b: float, max_order: int, depth: int) -> np.ndarray:
    """Quotient sweep deepened by doubling until modes built at depth and depth - 10 agree.

    The change of each quotient is weighted by the magnitude of the mode it multiplies, relative to c_0,
    so slowly converging quotients far out in a negligible tail do not force a failure.
    """
    while True:
        quotients = _quotient_sweep(b, max_order, depth)
        if depth <= 10:
            return quotients
        shallow = _quotient_sweep(b, max_order, depth - 10)
        change = np.abs(quotients - shallow)
        weighted = float(np.max(change * np.abs(_modes_from_quotients(quotients, max_order)[::2]) / C0))
        logger.debug("b=%g, depth %d: max raw quotient change %.3e, weighted %.3e", b, depth, float(change.max()), weighted)
        if weighted <= CONVERGENCE_TOL:
            return quotients
        if 2 * depth > MAX_DEPTH:
            raise NumericalFailure(
                f"continued fractions not converged at b={b}: weighted quotient change {weighted:.3e} "
                f"between depth {depth} and {depth - 10}"
            )
        logger.info("b=%g: quotients not converged at depth %d, deepening to %d", b, depth, 2 * depth)
        depth *= 2


def stationary_distribution(b: float, max_order: int = DEFAULT_MAX_ORDER, depth: int = DEFAULT_DEPTH) -> FourierDistribution:
    """Stationary angular density by continued fractions.

    Args:
        b: Field; b = 0 returns the analytic two-delta distribution.
        max_order: Even mode cap M.
        depth: Minimum approximant depth of every quotient.

    Returns:
        FourierDistribution with c_0 = 1/(2 pi), conjugate-symmetric, odd modes zero.

    Raises:
        ValueError: if 0 < |b| < 1e-3 or the caps are invalid.
        NumericalFailure: if quotients at depth and depth - 10 still disagree on a non-negligible mode
            once the depth has been doubled up to MAX_DEPTH.
    """
    b = FieldStrength.validate_field(b)
    max_order = MaxOrder.validate_max_order(max_order)
    depth = PositiveInt.validate_positive_int(depth)
    if b == 0:
        return zero_field_distribution(max_order)
    if abs(b) < MIN_CF_FIELD:
        raise ValueError(f"Continued fractions need |b| >= {MIN_CF_FIELD}, entered: {b}")

    quotients = _converged_quotients(b, max_order, depth)
    positive = _modes_from_quotients(quotients, max_order)

    tail_weight = abs(positive[-1]) / C0
    if tail_weight > TAIL_WEIGHT_TOL:
        warnings.warn(
            f"mode cap {max_order} truncates a non-negligible tail at b={b} (|c_M|/c_0 = {tail_weight:.2e}); "
            f"suggested cap {suggest_max_order(b)}"
        )
    return FourierDistribution.from_positive_modes(b, positive, quotients=quotients)


def recursion_residual(dist: FourierDistribution) -> float:
    """max over even 0 < m <= M-2 of |Q_m c_m + Q+_m c_{m+2} + Q-_m c_{m-2}|"""
    m = np.arange(2, dist.max_order - 1, 2)
    if len(m) == 0:
        return 0.0
    c = dist.positive
    q, q_plus, q_minus = recursion_coefficients(dist.b, m)
    return float(np.max(np.abs(q * c[m] + q_plus * c[m + 2] + q_minus * c[m - 2])))


def quotient_residual(dist: FourierDistribution) -> float:
    """max |Q-_{m+2} / S_m + Q_{m+2} + Q+_{m+2} S_{m+2}| over the stored quotients."""
    s = dist.quotients
    if s is None or len(s) < 3:
        return 0.0
    n = 2 * np.arange(1, len(s))
    q, q_plus, q_minus = recursion_coefficients(dist.b, n)
    return float(np.max(np.abs(q_minus / s[:-1] + q + q_plus * s[1:])))


def _grid_size(max_order: int, points: int) -> int:
    size = points
    while size < 2 * max_order + 1:
        size *= 2
    return size


def synthesize(coeffs: np.ndarray, max_order: int, points: int = DEFAULT_GRID) -> tuple[np.ndarray, np.ndarray]:
    """Evaluate sum_m c_m exp(-i m theta) on theta_j = -pi + 2 pi j / G by FFT.

    Returns:
        (theta, values); values are complex.
    """
    size = _grid_size(max_order, points)
    m = np.arange(-max_order, max_order + 1)
    spectrum = np.zeros(size, dtype=complex)
    np.add.at(spectrum, m % size, coeffs * (-1.0) ** np.abs(m))
    theta = -math.pi + 2 * math.pi * np.arange(size) / size
    return theta, np.fft.fft(spectrum)


def density_on_grid(dist: FourierDistribution, points: int = DEFAULT_GRID) -> tuple[np.ndarray, np.ndarray]:
    """Real density on a uniform grid over [-pi, pi)."""
    theta, values = synthesize(dist.coeffs, dist.max_order, points)
    return theta, values.real


def normalization(dist: FourierDistribution, points: int = DEFAULT_GRID) -> float:
    """Grid integral of P; exact for trigonometric polynomials when the grid resolves all modes."""
    theta, density = density_on_grid(dist, points)
    return float(density.sum() * 2 * math.pi / len(theta))


def current_modes(dist: FourierDistribution) -> tuple[np.ndarray, np.ndarray]:
    """Fourier modes J_k, |k| <= M + 2, of J(theta) = P (b + 3 sin(2 theta)/4) - cos^2(theta) P' / 2.

    J_k = (b + i k/4) c_k + i (k-1)/8 c_{k+2} + i (k+1)/8 c_{k-2}, which equals (i k / 4) times the
    recursion residual at k; modes past the cap count as zero.

    Returns:
        (k, J_k)
    """
    cap = dist.max_order
    padded = np.zeros(2 * cap + 9, dtype=complex)
    padded[4:-4] = dist.coeffs
    k = np.arange(-cap - 2, cap + 3)
    modes = (
        (dist.b + 0.25j * k) * padded[2:-2]
        + 0.125j * (k - 1) * padded[4:]
        + 0.125j * (k + 1) * padded[:-4]
    )
    return k, modes


def probability_current(dist: FourierDistribution) -> tuple[float, float]:
    """Closed-form stationary current and its flatness.

    J_sta = c_0 b + Im[c_2] / 4 = c_0 b (1 + Im[S_0] / (4 b)). The flatness bounds max |J(theta) - J_sta|
    by the l1 norm of the non-constant current modes.
    """
    j_sta = C0 * dist.b + dist.coefficient(2).imag / 4
    k, modes = current_modes(dist)
    return float(j_sta), float(np.sum(np.abs(modes[k != 0])))


def current_ratio(dist: FourierDistribution) -> float:
    """J_sta / J_classical with J_classical = b / (2 pi)."""
    if dist.b == 0:
        raise ValueError("Current ratio is undefined at b=0")
    return 1 + dist.coefficient(2).imag / (4 * C0 * dist.b)


def stationary_mean_theta(dist: FourierDistribution) -> float:
    """E[theta] = -2 pi sum_{m>=1} Im[c_2m] / m over the retained modes."""
    c_even = dist.positive[2::2]
    if len(c_even) == 0:
        return 0.0
    m = np.arange(1, len(c_even) + 1)
    return float(-2 * math.pi * np.sum(c_even.imag / m))


def current_sweep(b_values, max_order: int = DEFAULT_MAX_ORDER, depth: int = DEFAULT_DEPTH, tol: float = 1e-12) -> np.ndarray:
    """Rows (b, J_sta, J_ratio, mean_theta); the mode cap is raised per b to reach ``tol``."""
    rows = []
    for b in b_values:
        order = max(max_order, suggest_max_order(b, tol))
        dist = stationary_distribution(b, order, depth)
        j_sta = C0 * b + dist.coefficient(2).imag / 4
        rows.append((b, j_sta, current_ratio(dist), stationary_mean_theta(dist)))
        logger.debug("b=%g: M=%d, J_ratio=%.6f", b, order, rows[-1][2])
    return np.asarray(rows, dtype=float)


def bin_probabilities(dist: FourierDistribution, bins: int = DEFAULT_BINS) -> np.ndarray:
    """Exact probability of each of ``bins`` uniform bins over (-pi, pi] by integrating the Fourier series."""
    bins = PositiveInt.validate_positive_int(bins)
    edges = np.linspace(-math.pi, math.pi, bins + 1)
    m = dist.modes
    nonzero = m != 0
    # antiderivative F(theta) = c_0 theta + sum_{m != 0} c_m exp(-i m theta) / (-i m)
    phases = np.exp(-1j * np.outer(edges, m[nonzero]))
    antiderivative = C0 * edges + (phases @ (dist.coeffs[nonzero] / (-1j * m[nonzero]))).real
    return np.diff(antiderivative)


def uniform_coefficients(max_order: int) -> np.ndarray:
    coeffs = np.zeros(2 * max_order + 1, dtype=complex)
    coeffs[max_order] = C0
    return coeffs


def mode_coupling_operator(b: float, max_order: int) -> sparse.csr_matrix:
    """Sparse generator of the truncated Fourier system on m = -M..M, with c_{+-(M+2)} = 0."""
    m = np.arange(-max_order, max_order + 1, dtype=float)
    safe_m = np.where(m == 0, 1.0, m)
    q, q_plus, q_minus = recursion_coefficients(b, safe_m)
    scale = -(m * m) / 4
    diagonal = np.where(m == 0, 0, scale * q)
    upper = (scale * q_plus)[:-2]
    lower = (scale * q_minus)[2:]
    return sparse.diags([lower, diagonal, upper], offsets=[-2, 0, 2], format="csr", dtype=complex)


def euler_stability_limit(b: float, max_order: int) -> float:
    """Largest explicit-Euler step from the Gershgorin radius of the mode-coupling operator."""
    m = np.arange(1, max_order + 1, dtype=float)
    q, q_plus, q_minus = recursion_coefficients(b, m)
    radius = np.max((m * m / 4) * (np.abs(q) + np.abs(q_plus) + np.abs(q_minus)))
    return float(2 / radius)


@dataclass
class CoefficientSeries:
    times: np.ndarray
    coeffs: np.ndarray
    max_order: int
    b: float

    def distribution(self, index: int = -1) -> FourierDistribution:
        return FourierDistribution(b=self.b, coeffs=self.coeffs[index], max_order=self.max_order)


def fp_evolve(
    initial,
    b: float,
    dt: float,
    steps: int,
    sample_every: int = 1,
    method: str = "euler",
) -> CoefficientSeries:
    """Evolve Fourier coefficients of the angular density.

    Args:
        initial: Coefficient vector on m = -M..M (or a FourierDistribution) with c_0 = 1/(2 pi).
        b: Field.
        dt: Time step.
        steps: Number of steps.
        sample_every: Keep every n-th coefficient vector; the last one is always kept.
        method: "euler" for explicit stepping, "exponential" for the exact propagator of the truncated system.

    Returns:
        CoefficientSeries; c_0 stays exactly 1/(2 pi).

    Raises:
        ValueError: if the initial vector is not normalised.
        NumericalFailure: if dt exceeds the explicit stability limit or a coefficient exceeds 1e6.
    """
    if isinstance(initial, FourierDistribution):
        initial = initial.coeffs
    coeffs = np.array(initial, dtype=complex)
    max_order = (len(coeffs) - 1) // 2
    if len(coeffs) % 2 == 0 or abs(coeffs[max_order] - C0) > 1e-12:
        raise ValueError(f"Initial coefficients should be an odd-length vector with c_0 = 1/(2 pi), entered c_0: {coeffs[max_order]}")
    dt = TimeStep.validate_time_step(dt)
    steps = StepCount.validate_steps(steps)
    method = FokkerPlanckMethod(method).value

    operator = mode_coupling_operator(b, max_order)
    if method == "euler":
        limit = euler_stability_limit(b, max_order)
        if dt > limit:
            raise NumericalFailure(f"explicit step dt={dt:g} above the stability limit {limit:.3e} for M={max_order}")
        if dt > 0.1 / max_order**2:
            warnings.warn(f"dt={dt:g} exceeds the 0.1/M^2 diffusion heuristic for M={max_order}")
        propagate = lambda c: c + dt * (operator @ c)
    else:
        propagator = linalg.expm(operator.toarray() * dt)
        propagate = lambda c: propagator @ c

    kept_steps = list(range(0, steps + 1, sample_every))
    if kept_steps[-1] != steps:
        kept_steps.append(steps)
    series = np.empty((len(kept_steps), len(coeffs)), dtype=complex)
    series[0] = coeffs
    next_sample = 1
    for k in range(steps):
        coeffs = propagate(coeffs)
        coeffs[max_order] = C0
        if not np.all(np.abs(coeffs) <= INSTABILITY_BOUND):
            raise NumericalFailure("Fourier coefficients exceeded 1e6, evolution unstable", step=k)
        if next_sample < len(kept_steps) and kept_steps[next_sample] == k + 1:
            series[next_sample] = coeffs
            next_sample += 1

    return CoefficientSeries(times=dt * np.asarray(kept_steps), coeffs=series, max_order=max_order, b=b)


def kl_divergence(coeffs_p: np.ndarray, coeffs_q: np.ndarray, points: int = DEFAULT_GRID) -> float:
    """H = int P ln(P / Q) dtheta of two coefficient vectors of equal length, by grid quadrature.

    Raises:
        ValueError: if either density is negative somewhere on the grid.
    """
    max_order = (len(coeffs_p) - 1) // 2
    theta, p = synthesize(np.asarray(coeffs_p), max_order, points)
    _, q = synthesize(np.asarray(coeffs_q), max_order, points)
    if p.real.min() < 0 or q.real.min() <= 0:
        raise ValueError("Relative entropy needs non-negative P and positive Q on the grid")
    return float(rel_entr(p.real, q.real).sum() * 2 * math.pi / len(theta))


@dataclass
class ErgodicityResult:
    b: float
    total_time: float
    edges: np.ndarray
    histogram: np.ndarray
    stationary: np.ndarray
    tv_distance: float
    final_theta: float


def ergodicity_test(
    b: float,
    total_time: float,
    dt: float,
    seed: None | int,
    bins: int = DEFAULT_BINS,
    theta0: float = 0.3,
    dist: None | FourierDistribution = None,
) -> ErgodicityResult:
    """Compare the time-averaged occupancy of one long angular path with the stationary density.

    Raises:
        ValueError: if b == 0, where the path is trapped and there is no ergodic limit.
    """
    if b == 0:
        raise ValueError("Ergodicity needs b != 0; at b=0 the angle is trapped between -pi/2 and pi/2")
    dt = TimeStep.validate_time_step(dt)
    bins = PositiveInt.validate_positive_int(bins)
    steps = int(round(total_time / dt))
    if dist is None:
        dist = stationary_distribution(b, max(DEFAULT_MAX_ORDER, suggest_max_order(b)))

    edges = np.linspace(-math.pi, math.pi, bins + 1)
    counts = np.zeros(bins)
    last = theta0
    for chunk in iter_angular_path(theta0, b, dt, steps, make_rng(seed)):
        counts += np.histogram(chunk, bins=edges)[0]
        last = float(chunk[-1])

    histogram = counts / max(steps, 1)
    stationary = bin_probabilities(dist, bins)
    tv = 0.5 * float(np.abs(histogram - stationary).sum())
    logger.info("Ergodicity b=%g, T=%g: TV distance %.4f", b, total_time, tv)
    return ErgodicityResult(b, total_time, edges, histogram, stationary, tv, last)
