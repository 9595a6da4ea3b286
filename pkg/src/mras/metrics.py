"""Scoring: activity detection, channel reconstruction, AER/NMSE, aligned
factor distance, and the incoherence diagnostic."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize_scalar

logger = logging.getLogger(__name__)


@dataclass
class DetectionResult:
    support: np.ndarray      # sorted detected device indices
    energies: np.ndarray     # (N,) squared Frobenius norms of the estimates
    v1: float                # relative threshold used
    threshold: float         # absolute energy threshold v1 * max energy


@dataclass
class TrialScore:
    aer: float
    nmse: float
    dist_trace: list[float] | None = None
    beta: float | None = None


def detect_activity(X_hat: np.ndarray, v1: float) -> DetectionResult:
    """Device n is declared active iff ||X_n||_F^2 >= v1 * max_m ||X_m||_F^2.

    The comparison is inclusive, so equal energies are all detected. All-zero
    estimates yield an empty support.
    """
    if not (0.0 < v1 < 1.0):
        raise ValueError(f"threshold v1 must lie in (0, 1), got {v1}")
    energies = np.sum(np.abs(X_hat) ** 2, axis=(-2, -1))
    peak = float(energies.max()) if energies.size else 0.0
    if peak == 0.0:
        support = np.array([], dtype=int)
    else:
        support = np.flatnonzero(energies >= v1 * peak)
    return DetectionResult(support=support, energies=energies, v1=v1,
                           threshold=v1 * peak)


def default_v1(realization, margin: float = 0.25, floor: float = 1e-12,
               fallback: float = 0.05) -> float:
    """Scene-matched threshold: squared ratio of the weakest to the strongest
    active device amplitude (Frobenius), shrunk by a safety margin.

    Without the margin the weakest active device sits exactly on the
    threshold, so any estimation error flips it to a miss. Falls back to a
    fixed value when the scene has no usable active devices (blind operation).
    """
    support = realization.support
    if support.size == 0:
        return fallback
    amps = np.linalg.norm(realization.states[support], axis=(-2, -1))
    if amps.max() <= 0.0:
        return fallback
    v1 = margin * (amps.min() / amps.max()) ** 2
    return float(max(min(v1, 1.0 - 1e-9), floor))


def estimate_channels(X_hat: np.ndarray, A_theta: np.ndarray, A_tau: np.ndarray,
                      support) -> dict[int, np.ndarray]:
    """Reconstruct H_k = A_theta X_k A_tau^H for each detected device."""
    return {int(k): A_theta @ X_hat[int(k)] @ A_tau.conj().T for k in support}


def aer(true_support, est_support, N: int) -> float:
    """Activity error rate: miss probability plus false-alarm probability."""
    t, e = set(map(int, true_support)), set(map(int, est_support))
    K = len(t)
    miss = 0.0
    if K > 0:
        miss = len(t - e) / K
    elif e:
        logger.info("aer: no active devices, miss term taken as 0 by convention")
    false = 0.0
    if N - K > 0:
        false = len(e - t) / (N - K)
    elif t != e:
        logger.info("aer: all devices active, false-alarm term taken as 0 by convention")
    return miss + false


def nmse(H_true: dict[int, np.ndarray], H_est: dict[int, np.ndarray]) -> float:
    """sqrt(sum_k ||H_k - H_hat_k||_F^2) / sqrt(sum_k ||H_hat_k||_F^2), k over
    the true active set; missing estimates count as zero. A vanishing
    denominator returns +inf (logged)."""
    num = 0.0
    den = 0.0
    for k, H in H_true.items():
        H_hat = H_est.get(k)
        if H_hat is None:
            H_hat = np.zeros_like(H)
        num += np.linalg.norm(H - H_hat) ** 2
        den += np.linalg.norm(H_hat) ** 2
    if den == 0.0:
        logger.warning("nmse: estimated channels vanish on the active set; returning inf")
        return np.inf
    return float(np.sqrt(num) / np.sqrt(den))


def _alignment_objective(t: float, jj: float, rr: float, cj: complex, cr: complex) -> float:
    # min over the phase is closed-form: the cross terms collapse to -2|c(t)|
    return jj / t**2 + rr * t**2 - 2.0 * abs(cj / t + cr * t)


def _align_one(J, R, J_star, R_star) -> float:
    """min over complex theta of ||J/conj(theta) - J*||_F^2 + ||theta R - R*||_F^2."""
    jj = np.linalg.norm(J) ** 2
    rr = np.linalg.norm(R) ** 2
    const = np.linalg.norm(J_star) ** 2 + np.linalg.norm(R_star) ** 2
    if jj == 0.0 and rr == 0.0:
        return const
    cj = complex(np.vdot(J_star, J))
    cr = complex(np.vdot(R_star, R))
    # balance point of the two quadratic terms sets the search scale
    t0 = (jj / rr) ** 0.25 if (jj > 0 and rr > 0) else 1.0
    grid = np.log(t0) + np.linspace(-7.0, 7.0, 41)
    vals = [_alignment_objective(np.exp(u), jj, rr, cj, cr) for u in grid]
    i = int(np.argmin(vals))
    lo, hi = grid[max(i - 1, 0)], grid[min(i + 1, len(grid) - 1)]
    res = minimize_scalar(lambda u: _alignment_objective(np.exp(u), jj, rr, cj, cr),
                          bounds=(lo, hi), method="bounded",
                          options={"xatol": 1e-13})

    def stationarity(t):
        # d/dt of the phase-reduced objective and its derivative for Newton
        c2 = (abs(cj) / t) ** 2 + (abs(cr) * t) ** 2 + 2 * (cj * np.conj(cr)).real
        c_abs = np.sqrt(max(c2, 0.0))
        g = -2 * jj / t**3 + 2 * rr * t
        if c_abs > 0:
            dc2 = -2 * abs(cj) ** 2 / t**3 + 2 * abs(cr) ** 2 * t
            g -= dc2 / c_abs
        return g

    t_star = float(np.exp(res.x))
    # analytic polish: secant steps on the stationarity condition recover the
    # sharp minimum that the bounded search cannot resolve (the expanded
    # objective cancels catastrophically near zero aligned error)
    t_a, t_b = t_star * (1 - 1e-6), t_star * (1 + 1e-6)
    g_a, g_b = stationarity(t_a), stationarity(t_b)
    for _ in range(60):
        if g_b == g_a:
            break
        t_next = t_b - g_b * (t_b - t_a) / (g_b - g_a)
        if not np.isfinite(t_next) or t_next <= 0:
            break
        t_a, g_a = t_b, g_b
        t_b, g_b = t_next, stationarity(t_next)
        if abs(t_b - t_a) <= 1e-16 * t_b:
            break

    # evaluate candidates directly from the matrices (no cancellation)
    best = np.inf
    for t in (t_b, t_star, float(np.exp(grid[i]))):
        if not np.isfinite(t) or t <= 0:
            continue
        c = cj / t + cr * t
        phase = c / abs(c) if abs(c) > 0 else 1.0
        theta = t * phase.conjugate()
        direct = (np.linalg.norm(J / np.conj(theta) - J_star) ** 2
                  + np.linalg.norm(theta * R - R_star) ** 2)
        best = min(best, float(direct))
    return best


def aligned_distance(S: np.ndarray, S_star: np.ndarray, m1: int,
                     active=None) -> float:
    """Gauge-invariant distance between factor stacks.

    Per device, a complex alignment scalar absorbs the inverse-scale /
    scale ambiguity between the top and bottom factor blocks; the aligned
    squared errors are normalized by the reference factor energy and
    root-summed. Devices listed in `active` (default: all) must have nonzero
    reference factors.
    """
    if S.shape != S_star.shape:
        raise ValueError(f"factor stacks differ in shape: {S.shape} vs {S_star.shape}")
    S = S[None] if S.ndim == 2 else S
    S_star = S_star[None] if S_star.ndim == 2 else S_star
    idx = range(S.shape[0]) if active is None else [int(k) for k in active]
    total = 0.0
    for n in idx:
        J, R = S[n, :m1, :], S[n, m1:, :]
        J_star, R_star = S_star[n, :m1, :], S_star[n, m1:, :]
        ref = np.linalg.norm(J_star) ** 2 + np.linalg.norm(R_star) ** 2
        if ref <= 0.0:
            raise ValueError(f"device {n}: reference factors vanish, distance undefined")
        total += max(_align_one(J, R, J_star, R_star), 0.0) / ref
    return float(np.sqrt(total))


def incoherence(J_factors: np.ndarray, b_rows: np.ndarray,
                total_measurements: int | None = None) -> float:
    """beta = max_{n,q} sqrt(Q) ||b_q^H J_n||_2 / ||J_n||_F over the supplied
    measurement rows (Q defaults to the number of rows given)."""
    J = J_factors[None] if J_factors.ndim == 2 else J_factors
    Q = b_rows.shape[0] if total_measurements is None else int(total_measurements)
    best = 0.0
    for n in range(J.shape[0]):
        fro = np.linalg.norm(J[n])
        if fro == 0.0:
            raise ValueError(f"device {n}: zero factor has no incoherence value")
        proj = np.abs(b_rows.conj() @ J[n])        # (Q_rows, L) magnitudes
        best = max(best, float(np.sqrt(np.sum(proj**2, axis=1)).max() / fro))
    return float(np.sqrt(Q) * best)


def incoherence_rows(op) -> tuple[np.ndarray, int]:
    """Measurement row family for :func:`incoherence`, normalized so the rows
    resolve the angle domain with unit average energy: the distinct rows of B
    scaled by 1/sqrt(mean ||row||^2), each repeated Bp times in the flattened
    observation (the repetition cannot change a max, so it is dropped)."""
    rows = op.B_mat
    scale = np.sqrt(np.mean(np.sum(np.abs(rows) ** 2, axis=1)))
    return rows / scale, op.n_measurements
