"""Multi-rank aware sparse recovery solvers (RG-MRAS and RC-MRAS).

Both variants minimize a smoothed objective over stacked low-rank factors
S_n = [J_n; R_n], one per device, where the device state matrix is
X_n = J_n R_n^H:

    f(S) = 1/2 || sum_n B X_n A_n - Y ||_F^2  +  nu * sum_n sum_ij g(X_n[i,j])

with the logarithmic smoothing g(x) = |x| - ln(1 + rho |x|) / rho. The search
runs on the quotient geometry from :mod:`mras.manifold`: RG-MRAS retracts
along the negative metric-weighted Riemannian gradient, RC-MRAS along
Polak-Ribiere conjugate directions with projection-based transport. The
starting point is a truncated spectral initialization.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import manifold
from .measurement import MeasurementOperator, adjoint, opnorm_estimate


class SolverAbort(RuntimeError):
    """The iteration produced a non-finite loss."""


# fraction of the data-fit curvature given to the smoothing term when nu = 1
# under scale-invariant weighting; fixed by desk-scale calibration
NU_BALANCE = 0.1


@dataclass
class SolverConfig:
    nu: float = 0.3               # sparsity weight
    rho: float = 1.0 / 0.039      # smoothing sharpness
    step_size: float | None = None  # retraction step mu; None picks it from the operator norm
    step_scale: float | None = None  # mu = step_scale / lambda_hat; None: 2.0 (rg) / 0.6 (rc)
    max_iter: int = 1000
    trunc_mult: float = 3.0       # observation-truncation multiplier
    variant: str = "rg"           # "rg" or "rc"
    tol: float = 1e-8             # stop when max device grad norm falls below tol * initial
    rank: int | None = None       # assumed rank L_hat (None: the scenario's L_max)
    record_dist: bool = False     # track aligned distance to ground truth per iteration
    calibrate_init: bool = True   # least-squares amplitude fit of the spectral start
    # nu and rho are specified for unit-scale state amplitudes; when True the
    # solver maps them per instance so behavior is invariant to the physical
    # gain magnitude (nu_eff = nu * NU_BALANCE * s * lambda, rho_eff = rho / s)
    scale_invariant_smoothing: bool = True

    def validate(self) -> None:
        if self.nu < 0 or self.rho <= 0:
            raise ValueError("need nu >= 0 and rho > 0")
        if self.step_size is not None and self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if self.step_scale is not None and self.step_scale <= 0:
            raise ValueError("step_scale must be positive")
        if self.max_iter < 1 or (self.rank is not None and self.rank < 1):
            raise ValueError("max_iter and rank must be >= 1")
        if self.variant not in ("rg", "rc"):
            raise ValueError(f"unknown variant {self.variant!r}")

    def effective_step_scale(self) -> float:
        if self.step_scale is not None:
            return self.step_scale
        return 2.0 if self.variant == "rg" else 0.6


@dataclass
class SolverTrace:
    """Per-iteration history of one solve."""

    loss: list[float] = field(default_factory=list)
    grad_norm: list[float] = field(default_factory=list)
    dist: list[float] | None = None
    seconds: list[float] = field(default_factory=list)
    iterations: int = 0
    converged: bool = False
    final_factors: np.ndarray | None = None


def split_factors(S: np.ndarray, m1: int) -> tuple[np.ndarray, np.ndarray]:
    """Top (angle) and bottom (delay) factor blocks of stacked S (..., M1+D, L)."""
    return S[..., :m1, :], S[..., m1:, :]


def states_from_factors(S: np.ndarray, m1: int) -> np.ndarray:
    """Device state matrices X_n = J_n R_n^H, stacked (..., M1, D)."""
    J, R = split_factors(S, m1)
    return J @ np.conj(np.swapaxes(R, -1, -2))


def factors_from_states(X: np.ndarray, rank: int) -> np.ndarray:
    """Balanced rank-`rank` factors of stacked states via truncated SVD."""
    U, s, Vh = np.linalg.svd(X, full_matrices=False)
    root = np.sqrt(s[..., :rank])
    J = U[..., :, :rank] * root[..., None, :]
    R = np.conj(np.swapaxes(Vh[..., :rank, :], -1, -2)) * root[..., None, :]
    return np.concatenate([J, R], axis=-2)


def smooth_abs(x, rho: float):
    """Smoothed absolute value g(x) = |x| - ln(1 + rho |x|) / rho and its
    conjugate Wirtinger gradient rho * x / (1 + rho |x|). Smooth at 0."""
    a = np.abs(x)
    value = a - np.log1p(rho * a) / rho
    grad = rho * np.asarray(x) / (1.0 + rho * a)
    return value, grad


def _forward_pieces(S: np.ndarray, op: MeasurementOperator, m1: int):
    """BJ (N, Mp, L), AhR (N, Bp, L), and the model output sum_n (BJ)(AhR)^H."""
    J, R = split_factors(S, m1)
    BJ = np.einsum("pm,nml->npl", op.B_mat, J)
    AhR = np.einsum("ndb,ndl->nbl", np.conj(op.A_stack), R)
    Y_model = np.einsum("npl,nbl->pb", BJ, np.conj(AhR))
    return BJ, AhR, Y_model


def loss(S: np.ndarray, op: MeasurementOperator, Y: np.ndarray,
         nu: float, rho: float) -> float:
    """Objective value at stacked factors S (N, M1+D, L)."""
    m1 = op.B_mat.shape[1]
    _, _, Y_model = _forward_pieces(S, op, m1)
    val = 0.5 * np.linalg.norm(Y_model - Y) ** 2
    if nu > 0:
        X = states_from_factors(S, m1)
        val += nu * float(np.sum(smooth_abs(X, rho)[0]))
    return float(val)


def euclidean_gradient(S: np.ndarray, op: MeasurementOperator, Y: np.ndarray,
                       nu: float, rho: float,
                       pieces=None) -> np.ndarray:
    """Wirtinger gradient of the objective with respect to each S_n.

    Stacks [ (G_n + W_n) R_n ; (G_n + W_n)^H J_n ] where G_n = B^H E A_n^H is
    the back-projected residual and W_n the elementwise smoothing gradient
    nu * rho * x / (1 + rho |x|). Matches central finite differences under
    the real inner product Re Tr(G^H eta), and S_n^H D_n is Hermitian, so the
    gradient already lies in the horizontal space.
    """
    m1 = op.B_mat.shape[1]
    J, R = split_factors(S, m1)
    BJ, AhR, Y_model = pieces if pieces is not None else _forward_pieces(S, op, m1)
    E = Y_model - Y

    # data term, factored: G R = B^H E (A^H R), G^H J = A E^H (B J)
    EAhR = np.einsum("pb,nbl->npl", E, AhR)
    top = np.einsum("pm,npl->nml", np.conj(op.B_mat), EAhR)
    EhBJ = np.einsum("pb,npl->nbl", np.conj(E), BJ)
    bottom = np.einsum("ndb,nbl->ndl", op.A_stack, EhBJ)

    if nu > 0:
        X = J @ np.conj(np.swapaxes(R, -1, -2))
        W = nu * smooth_abs(X, rho)[1]
        top = top + W @ R
        bottom = bottom + np.conj(np.swapaxes(W, -1, -2)) @ J
    return np.concatenate([top, bottom], axis=-2)


def truncate_observation(Y: np.ndarray, trunc_mult: float) -> np.ndarray:
    """Zero outlier entries whose magnitude exceeds trunc_mult times the mean
    magnitude; the boundary value is kept."""
    if trunc_mult <= 0:
        raise ValueError("truncation multiplier must be positive")
    mag = np.abs(Y)
    # boundary inclusive: constant-magnitude observations survive untouched
    threshold = trunc_mult * mag.mean() * (1.0 + 1e-12)
    return np.where(mag <= threshold, Y, 0.0)


def spectral_init(op: MeasurementOperator, Y_tru: np.ndarray, rank: int) -> np.ndarray:
    """Balanced factors of the rank-`rank` truncated SVD of B^H Y_tru A_n^H.

    The represented state P1 S S^H P2 is then the best rank-`rank`
    approximation of the back-projection. Warns when the requested rank
    exceeds the numerical rank (padded with zero directions).
    """
    N, M1, D = op.shape_in
    if rank > min(M1, D):
        raise ValueError(f"rank {rank} exceeds min(M1, D) = {min(M1, D)}")
    G = adjoint(op, Y_tru)  # (N, M1, D)
    U, s, Vh = np.linalg.svd(G, full_matrices=False)
    lead = s[:, :1]
    deficient = s[:, rank - 1] <= 1e-12 * np.maximum(lead[:, 0], 0.0)
    if np.any(deficient):
        warnings.warn(f"spectral initialization rank-deficient for "
                      f"{int(deficient.sum())} device(s); padding with zeros",
                      RuntimeWarning)
    return factors_from_states(G, rank)


def calibrate_amplitudes(S: np.ndarray, op: MeasurementOperator, Y: np.ndarray,
                         m1: int) -> np.ndarray:
    """Per-device complex amplitude fit of the represented states.

    The back-projected spectral start has an arbitrary overall scale (and
    arbitrary relative device scales), far outside any contraction region.
    Solving the tiny N x N least-squares problem
    min_c || sum_n c_n B X_n A_n - Y ||_F and scaling each device's state by
    its c_n places the start at the right amplitudes without moving the
    spectral directions. The top factor block takes c's phase, both blocks
    take sqrt(|c|).
    """
    X = states_from_factors(S, m1)
    Z = np.einsum("pm,nmd,ndb->npb", op.B_mat, X, op.A_stack)
    G = np.einsum("npb,mpb->nm", Z.conj(), Z)
    rhs = np.einsum("npb,pb->n", Z.conj(), Y)
    N = S.shape[0]
    ridge = 1e-12 * max(np.trace(G).real / N, np.finfo(float).tiny)
    c = np.linalg.solve(G + ridge * np.eye(N), rhs)
    mag = np.sqrt(np.abs(c))
    phase = np.where(np.abs(c) > 0, c / np.maximum(np.abs(c), np.finfo(float).tiny), 1.0)
    S_new = S.copy()
    S_new[:, :m1, :] *= (mag * phase)[:, None, None]
    S_new[:, m1:, :] *= mag[:, None, None]
    return S_new


def _default_step(op: MeasurementOperator, rng: np.random.Generator,
                  scale: float) -> float:
    lam_hat = opnorm_estimate(op, rng) ** 2
    return scale / max(lam_hat, np.finfo(float).tiny)


def _grad_norms(grad: np.ndarray) -> np.ndarray:
    return np.linalg.norm(grad, axis=(-2, -1))


def _weights(S: np.ndarray) -> np.ndarray:
    # metric(S, S, S) per device, floored to keep zero factors harmless
    w = 2.0 * np.sum(np.abs(S) ** 2, axis=(-2, -1))
    return np.maximum(w, np.finfo(float).tiny)


def rg_step(S: np.ndarray, op: MeasurementOperator, Y: np.ndarray,
            cfg: SolverConfig, mu: float, grad: np.ndarray | None = None) -> np.ndarray:
    """One weighted Riemannian gradient step: eta = -grad / metric(S, S, S),
    then retract with mu. Halves mu (up to 10 times) if the update is
    non-finite."""
    if grad is None:
        egrad = euclidean_gradient(S, op, Y, cfg.nu, cfg.rho)
        grad = manifold.riemannian_gradient(S, egrad, regularize=True)
    eta = -grad / _weights(S)[..., None, None]
    step = mu
    for _ in range(11):
        S_new = manifold.retract(S, eta, step)
        if np.all(np.isfinite(S_new)):
            return S_new
        step *= 0.5
    raise SolverAbort("gradient step stayed non-finite after 10 halvings")


def rc_step(S: np.ndarray, eta_prev: np.ndarray | None, grad_prev: np.ndarray | None,
            op: MeasurementOperator, Y: np.ndarray, cfg: SolverConfig,
            mu: float) -> tuple[np.ndarray, np.ndarray, np.ndarray, float]:
    """One conjugate-gradient step from S; returns (S_new, eta, grad, step).

    The Polak-Ribiere coefficient is computed per device from the transported
    previous gradient, clamped at zero (automatic restart), and reset when
    the previous gradient vanishes. The first call (eta_prev None) is a pure
    gradient step. The returned step is mu, halved as needed to keep the
    update finite and bounded; the caller keeps it for later iterations.
    """
    egrad = euclidean_gradient(S, op, Y, cfg.nu, cfg.rho)
    grad = manifold.riemannian_gradient(S, egrad, regularize=True)
    if eta_prev is None or grad_prev is None:
        eta = -grad
    else:
        t_grad = manifold.vector_transport(S, grad_prev, regularize=True)
        t_eta = manifold.vector_transport(S, eta_prev, regularize=True)
        num = np.asarray(manifold.metric(S, grad, grad - t_grad))
        den = np.asarray(manifold.metric(S, grad_prev, grad_prev))
        beta = np.where(den > 0, num / np.maximum(den, np.finfo(float).tiny), 0.0)
        beta = np.maximum(beta, 0.0)  # PR+ restart on negative beta
        # devices whose previous gradient has (almost) vanished restart: their
        # beta is a ratio of rounding noise and can be astronomically large
        g_new = _grad_norms(grad)
        t_eta_norm = np.maximum(_grad_norms(t_eta), np.finfo(float).tiny)
        beta = np.minimum(beta, 10.0 * g_new / t_eta_norm)
        eta = -grad + beta[..., None, None] * t_eta
        # restart any device whose combined direction is not a descent direction
        ascent = np.asarray(manifold.metric(S, eta, grad)) >= 0.0
        if np.any(ascent):
            eta = np.where(ascent[..., None, None], -grad, eta)
    step = mu
    s_norm = np.linalg.norm(S)
    for _ in range(11):
        # guard against runaway conjugate directions: a finite but huge update
        # (relative step > 2) is already past the stable region
        if step * np.linalg.norm(eta) <= 2.0 * s_norm:
            S_new = manifold.retract(S, eta, step)
            if np.all(np.isfinite(S_new)):
                return S_new, eta, grad, step
        step *= 0.5
    raise SolverAbort("conjugate step stayed non-finite after 10 halvings")


def _gauge_fix(S_star: np.ndarray, S_ref: np.ndarray, m1: int,
               active: np.ndarray) -> np.ndarray:
    """Re-gauge the true factors toward S_ref without changing their product.

    A factorization X* = J* R*^H is only defined up to (J*, R*) ->
    (J* A, R* A^-H) with A invertible; the scalar alignment inside the
    distance cannot absorb that freedom for rank two or more. Per device,
    A is the least-squares map from J* onto the reference's top block (with
    a unitary Procrustes fallback when that map degenerates), so the
    re-gauged reference still factors the same state matrix exactly.
    """
    out = S_star.copy()
    for k in active:
        J_star, R_star = S_star[k, :m1, :], S_star[k, m1:, :]
        A, *_ = np.linalg.lstsq(J_star, S_ref[k, :m1, :], rcond=None)
        ok = np.all(np.isfinite(A))
        if ok:
            sv = np.linalg.svd(A, compute_uv=False)
            ok = sv[-1] > 1e-8 * sv[0]
        if ok:
            out[k, :m1, :] = J_star @ A
            out[k, m1:, :] = R_star @ np.linalg.inv(A).conj().T
        else:
            M = S_star[k].conj().T @ S_ref[k]
            U, _, Vh = np.linalg.svd(M)
            out[k] = S_star[k] @ (U @ Vh)
    return out


def solve(op: MeasurementOperator, Y: np.ndarray, sys_cfg, solver_cfg: SolverConfig,
          ground_truth=None) -> tuple[np.ndarray, SolverTrace]:
    """Run truncation, spectral initialization, and the chosen search variant.

    Returns the stacked state estimates X_hat (N, M1, D) and the trace. When
    `ground_truth` (a ChannelRealization) is given and record_dist is set,
    the trace carries the aligned factor distance to the true active factors
    at every iteration.
    """
    solver_cfg.validate()
    N, M1, D = op.shape_in
    rank = solver_cfg.rank if solver_cfg.rank is not None else sys_cfg.L_max
    rng = np.random.default_rng(getattr(sys_cfg, "seed", 0))

    Y_tru = truncate_observation(Y, solver_cfg.trunc_mult)
    S = spectral_init(op, Y_tru, rank)

    # a zero start is outside the manifold and has no descent direction:
    # nudge collapsed devices with a tiny random factor
    norms = np.linalg.norm(S, axis=(-2, -1))
    if np.any(norms == 0.0):
        scale = max(float(np.max(norms)), float(np.linalg.norm(Y)), 1.0) * 1e-8
        bump = rng.standard_normal(S.shape) + 1j * rng.standard_normal(S.shape)
        S = S + scale * bump * (norms == 0.0)[..., None, None]

    if solver_cfg.calibrate_init:
        S = calibrate_amplitudes(S, op, Y, M1)

    need_lam = solver_cfg.step_size is None or (
        solver_cfg.nu > 0 and solver_cfg.scale_invariant_smoothing)
    lam_hat = opnorm_estimate(op, rng) ** 2 if need_lam else None

    nu_eff, rho_eff = solver_cfg.nu, solver_cfg.rho
    if solver_cfg.nu > 0 and solver_cfg.scale_invariant_smoothing:
        X0 = states_from_factors(S, M1)
        s_hat = float(np.percentile(np.abs(X0), 99))
        if s_hat > 0:
            nu_eff = solver_cfg.nu * NU_BALANCE * s_hat * lam_hat
            rho_eff = solver_cfg.rho / s_hat

    if solver_cfg.step_size is not None:
        mu = solver_cfg.step_size
    else:
        mu = solver_cfg.effective_step_scale() / max(lam_hat, np.finfo(float).tiny)
    if solver_cfg.variant == "rc":
        # raw conjugate directions carry the factor scale, so fold the initial
        # metric weight into the constant step to keep relative steps O(step_scale)
        if solver_cfg.step_size is None:
            mu = mu / max(float(np.median(_weights(S))), np.finfo(float).tiny)

    S_star, active = None, None
    if ground_truth is not None and solver_cfg.record_dist:
        active = np.asarray(ground_truth.support, dtype=int)
        S_star = factors_from_states(ground_truth.gated_states, rank)

    from dataclasses import replace as _replace
    eff_cfg = _replace(solver_cfg, nu=nu_eff, rho=rho_eff)

    trace = SolverTrace(dist=[] if S_star is not None else None)
    iterates = [] if S_star is not None else None
    eta_prev, grad_prev = None, None
    initial_gnorm = None
    for it in range(solver_cfg.max_iter):
        tic = time.perf_counter()
        if solver_cfg.variant == "rg":
            egrad = euclidean_gradient(S, op, Y, nu_eff, rho_eff)
            grad = manifold.riemannian_gradient(S, egrad, regularize=True)
            S = rg_step(S, op, Y, eff_cfg, mu, grad=grad)
        else:
            S, eta_prev, grad_prev, mu = rc_step(S, eta_prev, grad_prev, op, Y,
                                                 eff_cfg, mu)
            grad = grad_prev
        gmax = float(np.max(_grad_norms(grad)))
        f_val = loss(S, op, Y, nu_eff, rho_eff)
        if not np.isfinite(f_val):
            raise SolverAbort(f"non-finite loss at iteration {it}: {f_val}")
        trace.loss.append(f_val)
        trace.grad_norm.append(gmax)
        if iterates is not None:
            iterates.append(S.copy())
        trace.seconds.append(time.perf_counter() - tic)
        if initial_gnorm is None:
            initial_gnorm = max(gmax, np.finfo(float).tiny)
        if gmax <= solver_cfg.tol * initial_gnorm:
            trace.converged = True
            break

    if iterates is not None:
        from .metrics import aligned_distance
        ref = _gauge_fix(S_star, iterates[-1], M1, active)
        trace.dist = [aligned_distance(St, ref, M1, active=active) for St in iterates]

    trace.iterations = len(trace.loss)
    trace.final_factors = S
    return states_from_factors(S, M1), trace
