"""Theory-verification tools: the weighted block-sparsity norm, measurement
bounds for simultaneously block-sparse and low-rank recovery, their
comparison with the classical sparse-and-low-rank bound, and an empirical
restricted-isometry probe for the measurement operator."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .measurement import MeasurementOperator, forward


@dataclass
class BoundParams:
    """Inputs of the measurement bounds. Natural logarithms throughout."""

    N: int
    D: int
    M1: int
    p_max: int
    p_min: int
    L_max: int
    L_min: int
    K: int
    r: int                    # rank of the stacked state matrix
    t: float                  # decomposition parameter, > 1
    kappa1: float = 1.0       # universal constant; kept at 1 for comparisons

    def validate(self) -> None:
        if self.t <= 1.0:
            raise ValueError("decomposition parameter t must exceed 1")
        for name in ("N", "D", "M1", "p_max", "p_min", "L_max", "L_min", "K", "r"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.p_min > self.p_max or self.L_min > self.L_max:
            raise ValueError("need p_min <= p_max and L_min <= L_max")

    @property
    def u(self) -> float:
        """Block-sparsity budget of a K-active scene: K * p_min^2 * L_min."""
        return self.K * self.p_min**2 * self.L_min

    @property
    def u_bar(self) -> float:
        return (1.0 + (self.t - 1.0) * self.p_max**2 * self.L_max) * self.u

    @property
    def theta(self) -> float:
        return self.u_bar / (self.p_min**2 * self.L_min)


def sg_norm(X: np.ndarray, blocks, p, L) -> float:
    """Weighted block-sparsity: sum over nonzero column blocks of p_n^2 L_n.

    `blocks` is a list of column-index arrays, one per device, that must
    cover the columns of X disjointly; `p` and `L` may be scalars or
    per-device sequences.
    """
    X = np.asarray(X)
    n_cols = X.shape[1]
    seen = np.zeros(n_cols, dtype=bool)
    for idx in blocks:
        idx = np.asarray(idx, dtype=int)
        if np.any(seen[idx]):
            raise ValueError("column blocks overlap")
        seen[idx] = True
    if not np.all(seen):
        raise ValueError("column blocks do not cover every column")
    N = len(blocks)
    p_arr = np.broadcast_to(np.asarray(p, dtype=float), (N,))
    L_arr = np.broadcast_to(np.asarray(L, dtype=float), (N,))
    total = 0.0
    for n, idx in enumerate(blocks):
        if np.any(X[:, np.asarray(idx, dtype=int)] != 0):
            total += p_arr[n] ** 2 * L_arr[n]
    return float(total)


def contiguous_blocks(N: int, D: int) -> list[np.ndarray]:
    """The natural device partition of a horizontally stacked (M1, D*N) matrix."""
    return [np.arange(n * D, (n + 1) * D) for n in range(N)]


def _log_ratio(x: float, y: float, what: str) -> float:
    if y >= x:
        warnings.warn(f"measurement bound outside its log domain: {what} "
                      f"(argument {x / y:.3g} <= 1); evaluating anyway", RuntimeWarning)
    return math.log(x / y)


def theorem_bound(bp: BoundParams) -> float:
    """Measurement bound for simultaneously block-sparse and rank-r recovery:
    kappa1 * (Theta log(N/Theta) + Theta + Theta pL log(D/(pL)) + Theta pL
    + (Theta pL + M1 + 1) r) with p = p_max, L = L_max."""
    bp.validate()
    th = bp.theta
    pL = bp.p_max * bp.L_max
    val = (
        th * _log_ratio(bp.N, th, "Theta log(N/Theta)")
        + th
        + th * pL * _log_ratio(bp.D, pL, "log(D/(pL))")
        + th * pL
        + (th * pL + bp.M1 + 1.0) * bp.r
    )
    return bp.kappa1 * val


# name used by the bound-comparison tables
theorem1_bound = theorem_bound


def traditional_bound(bp: BoundParams) -> float:
    """Classical simultaneously-sparse-and-low-rank bound:
    kappa1 * (u t log(ND/(u t)) + u t + (u t + M1 + 1) r) with u = K p^2 L.
    Requires uniform spreads and ranks (p_max = p_min, L_max = L_min)."""
    bp.validate()
    if bp.p_max != bp.p_min or bp.L_max != bp.L_min:
        raise ValueError("traditional bound assumes uniform p and L")
    ut = bp.u * bp.t
    val = (
        ut * _log_ratio(bp.N * bp.D, ut, "ut log(ND/ut)")
        + ut
        + (ut + bp.M1 + 1.0) * bp.r
    )
    return bp.kappa1 * val


def compare_bounds(bp: BoundParams) -> dict:
    """Evaluate both bounds with the same kappa1 and check the small-ut
    sufficient conditions under which the block-aware bound wins:

      (1) u t < N / e, and
      (2) u t < (K p^3 L^2 r - K p L r - Theta (pL log(D/(pL)) + pL)) / (pL r - r),

    the second requiring pL > 1 (at pL = 1 the bounds coincide up to the
    vanishing term u t)."""
    bp.validate()
    t1 = theorem_bound(bp)
    tr = traditional_bound(bp)
    ut = bp.u * bp.t
    pL = bp.p_max * bp.L_max
    cond1 = ut < bp.N / math.e
    if pL > 1:
        numer = (bp.K * bp.p_max**3 * bp.L_max**2 * bp.r
                 - bp.K * pL * bp.r
                 - bp.theta * (pL * math.log(bp.D / pL) + pL))
        denom = pL * bp.r - bp.r
        cond2 = ut < numer / denom
    else:
        cond2 = False
    return {
        "theorem1": t1,
        "traditional": tr,
        "theorem1_smaller": bool(t1 < tr),
        "conditions_hold": bool(cond1 and cond2),
        "ut": ut,
    }


def bound_table(grid: list[BoundParams]) -> list[dict]:
    """compare_bounds over a parameter grid, one row per point."""
    rows = []
    for bp in grid:
        row = compare_bounds(bp)
        row.update(p=bp.p_max, L=bp.L_max, K=bp.K, t=bp.t, N=bp.N, D=bp.D,
                   M1=bp.M1, r=bp.r)
        rows.append(row)
    return rows


def draw_block_sparse_lowrank(N: int, M1: int, D: int, p: int, L: int, r: int,
                              k_active: int, rng: np.random.Generator) -> np.ndarray:
    """Random stacked states (N, M1, D) that are simultaneously block-sparse
    (k_active blocks, each on a pL x pL support) and of total rank <= r,
    distributing the rank budget over the active blocks."""
    if p * L > min(M1, D):
        raise ValueError("block footprint pL exceeds the grid")
    X = np.zeros((N, M1, D), dtype=complex)
    active = rng.choice(N, size=k_active, replace=False)
    ranks = np.full(k_active, r // k_active)
    ranks[: r % k_active] += 1
    ranks = np.minimum(ranks, p * L)
    for n, r_b in zip(active, ranks):
        if r_b == 0:
            continue
        rows = rng.choice(M1, size=p * L, replace=False)
        cols = rng.choice(D, size=p * L, replace=False)
        U = (rng.standard_normal((p * L, r_b)) + 1j * rng.standard_normal((p * L, r_b)))
        V = (rng.standard_normal((p * L, r_b)) + 1j * rng.standard_normal((p * L, r_b)))
        block = U @ V.conj().T
        X[np.ix_([n], rows, cols)] = block[None]
    return X


def empirical_rip(op: MeasurementOperator, u: int, r: int, trials: int,
                  rng: np.random.Generator, *, p: int, L: int,
                  normalize: bool = False, forward_fn=None) -> float:
    """Empirical isometry defect over random block-sparse low-rank draws.

    Each trial draws X from the (u, r) class (u fixes the active block count
    via u // (p^2 L)), computes the ratio ||A(X)||_2 / ||X||_F, and the
    estimate is max(1 - min ratio, max ratio - 1). With normalize=True the
    map is scaled by 1/sqrt(Mp Bp), the natural isotropic calibration of the
    pilot/sampling operator; leave it off for maps that are already
    isometric (for example an injected identity). `forward_fn` overrides the
    measurement map (signature (op, X) -> array), for synthetic checks.
    """
    if trials < 1:
        raise ValueError("need at least one trial")
    apply = forward if forward_fn is None else forward_fn
    N, M1, D = op.shape_in
    k_active = max(1, min(N, int(u // (p * p * L))))
    scale = 1.0 / np.sqrt(op.n_measurements) if normalize else 1.0
    ratios = np.empty(trials)
    for i in range(trials):
        X = draw_block_sparse_lowrank(N, M1, D, p, L, r, k_active, rng)
        ratios[i] = scale * np.linalg.norm(apply(op, X)) / np.linalg.norm(X)
    return float(max(1.0 - ratios.min(), ratios.max() - 1.0))
