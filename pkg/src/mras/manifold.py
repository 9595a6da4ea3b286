"""Quotient geometry of products of full-column-rank factor matrices.

A point is a stack of factors S_n of shape (M1 + D) x L; the represented
state matrix is the off-diagonal block of S_n S_n^H. Right-multiplication by
a unitary leaves that block unchanged, so optimization runs on the quotient:
tangent vectors are lifted to the horizontal space (S^H zeta Hermitian) and
moved with a projection-based transport.

All operations broadcast over any leading axes, so a whole device stack
(N, M1 + D, L) is processed in one call.
"""

from __future__ import annotations

import numpy as np

RANK_RTOL = 1e-12  # relative full-rank threshold on singular values


class SingularPointError(ValueError):
    """Factor matrix is (numerically) rank deficient where full rank is required."""


class DegenerateStepError(RuntimeError):
    """A retraction produced a rank-deficient factor; the caller should shrink the step."""


def _ctrans(A: np.ndarray) -> np.ndarray:
    return np.conj(np.swapaxes(A, -1, -2))


def metric(S: np.ndarray, xi: np.ndarray, eta: np.ndarray):
    """Riemannian inner product Tr(xi^H eta + eta^H xi) = 2 Re <xi, eta>.

    Returns a real scalar for single matrices, an array over leading axes for
    stacks. Point-independent, but S is kept in the signature because the
    metric is attached to the tangent space at S.
    """
    if xi.shape != eta.shape or xi.shape[-2:] != S.shape[-2:]:
        raise ValueError(f"shape mismatch: {S.shape}, {xi.shape}, {eta.shape}")
    val = 2.0 * np.real(np.sum(np.conj(xi) * eta, axis=(-2, -1)))
    return float(val) if np.ndim(val) == 0 else val


def gram(S: np.ndarray) -> np.ndarray:
    """S^H S, shape (..., L, L), Hermitian positive semidefinite."""
    return _ctrans(S) @ S


def solve_skew_sylvester(G: np.ndarray, C: np.ndarray, *, regularize: bool = False,
                         rank_rtol: float = RANK_RTOL) -> np.ndarray:
    """Solve G B + B G = C for B with G Hermitian PSD (L x L, batched).

    Diagonalize G = V diag(lam) V^H and divide the rotated right-hand side by
    lam_i + lam_j. With regularize=True near-zero eigenvalues are floored so
    that points that have drifted off the open manifold (factors collapsing
    toward zero) still get a well-defined, vanishing correction.
    """
    lam, V = np.linalg.eigh(G)
    lam_max = lam[..., -1:]
    floor = (rank_rtol * np.maximum(lam_max, 0.0)) + np.finfo(float).tiny
    if not regularize:
        if np.any(lam[..., 0] <= rank_rtol * lam_max[..., 0]):
            raise SingularPointError("rank-deficient factor in Sylvester solve")
    lam = np.maximum(lam, floor)
    C_rot = _ctrans(V) @ C @ V
    denom = lam[..., :, None] + lam[..., None, :]
    return V @ (C_rot / denom) @ _ctrans(V)


def horizontal_project(S: np.ndarray, xi: np.ndarray, *, regularize: bool = False,
                       rank_rtol: float = RANK_RTOL) -> np.ndarray:
    """Project xi onto the horizontal space at S: zeta = xi - S B.

    B is the skew-Hermitian solution of (S^H S) B + B (S^H S) = S^H xi - xi^H S,
    which makes S^H zeta Hermitian. Raises SingularPointError on rank-deficient
    S unless regularize=True (then the solve is floored, see above).
    """
    if xi.shape != S.shape:
        raise ValueError(f"tangent shape {xi.shape} does not match point {S.shape}")
    Sh_xi = _ctrans(S) @ xi
    C = Sh_xi - _ctrans(Sh_xi)
    B = solve_skew_sylvester(gram(S), C, regularize=regularize, rank_rtol=rank_rtol)
    return xi - S @ B


def vertical_component(S: np.ndarray, xi: np.ndarray, **kw) -> np.ndarray:
    """The gauge part S B removed by :func:`horizontal_project`."""
    return xi - horizontal_project(S, xi, **kw)


def is_horizontal(S: np.ndarray, zeta: np.ndarray, tol: float = 1e-10) -> bool:
    """Check the Hermitian condition S^H zeta = zeta^H S up to tol (relative)."""
    P = _ctrans(S) @ zeta
    scale = max(np.max(np.abs(P)), 1.0)
    return bool(np.max(np.abs(P - _ctrans(P))) <= tol * scale)


def retract(S: np.ndarray, eta: np.ndarray, mu: float, *, check_rank: bool = False,
            rank_rtol: float = RANK_RTOL) -> np.ndarray:
    """Straight-line retraction S + mu * eta.

    With check_rank=True, raises DegenerateStepError when an updated factor
    loses full column rank (the caller then shrinks mu). The default skips
    the check: factors of silent devices are allowed to collapse toward zero.
    """
    if mu <= 0:
        raise ValueError(f"step size must be positive, got {mu}")
    S_new = S + mu * eta
    if check_rank:
        sv = np.linalg.svd(S_new, compute_uv=False)
        if np.any(sv[..., -1] <= rank_rtol * sv[..., 0]):
            raise DegenerateStepError("retraction left the full-rank manifold")
    return S_new


def vector_transport(S_new: np.ndarray, eta: np.ndarray, **kw) -> np.ndarray:
    """Move eta into the horizontal space at the destination point."""
    return horizontal_project(S_new, eta, **kw)


def riemannian_gradient(S: np.ndarray, euclid_grad: np.ndarray, **kw) -> np.ndarray:
    """Horizontal lift of half the Euclidean gradient.

    The factor 1/2 compensates the 2 Re(.) in :func:`metric`, so that
    metric(S, grad, eta) equals the directional derivative along any
    horizontal eta.
    """
    return horizontal_project(S, euclid_grad / 2.0, **kw)
