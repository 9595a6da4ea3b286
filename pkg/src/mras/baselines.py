"""Reference recovery algorithms: accelerated proximal gradient (FISTA) with
a per-device group penalty, and greedy block matching pursuit (OMP). Both
touch the measurement operator only through forward/adjoint."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np

from .measurement import MeasurementOperator, forward, adjoint, opnorm_estimate

logger = logging.getLogger(__name__)


@dataclass
class BaselineConfig:
    algorithm: str = "fista"          # "fista" or "omp"
    lam: float | None = None          # FISTA weight; None: lam_rel * max block norm of A*(Y)
    lam_rel: float = 0.05
    max_iter: int = 400
    tol: float = 1e-7
    sparsity_budget: int | None = None  # OMP: max selected blocks (None: set by caller)
    elementwise: bool = False           # FISTA: entrywise l1 instead of the group norm
    ls_iters: int = 200                 # OMP: inner least-squares iterations
    ridge: float = 1e-12                # OMP: relative ridge for the ill-conditioned fallback

    def validate(self) -> None:
        if self.lam is not None and self.lam < 0:
            raise ValueError("lam must be nonnegative")
        if self.sparsity_budget is not None and self.sparsity_budget < 1:
            raise ValueError("sparsity budget must be >= 1")


def _block_norms(X: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum(np.abs(X) ** 2, axis=(-2, -1)))


def _group_prox(X: np.ndarray, tau: float) -> np.ndarray:
    norms = _block_norms(X)
    scale = np.maximum(1.0 - tau / np.maximum(norms, np.finfo(float).tiny), 0.0)
    return X * scale[:, None, None]


def _entry_prox(X: np.ndarray, tau: float) -> np.ndarray:
    mag = np.abs(X)
    return X * np.maximum(1.0 - tau / np.maximum(mag, np.finfo(float).tiny), 0.0)


def fista_solve(op: MeasurementOperator, Y: np.ndarray,
                cfg: BaselineConfig) -> tuple[np.ndarray, dict]:
    """Minimize 1/2 ||A(X) - Y||_F^2 + lam * sum_n ||X_n||_F by accelerated
    proximal gradient with a function-value restart.

    Returns the stacked estimate and an info dict with the objective trace,
    restart iterations, and iteration count.
    """
    cfg.validate()
    N, M1, D = op.shape_in
    rng = np.random.default_rng(0)
    L = opnorm_estimate(op, rng) ** 2
    if not np.isfinite(L) or L <= 0:
        raise RuntimeError(f"step-size estimation failed: operator norm {L}")
    step = 1.0 / L

    corr = adjoint(op, Y)
    lam = cfg.lam if cfg.lam is not None else cfg.lam_rel * float(_block_norms(corr).max())
    prox = _entry_prox if cfg.elementwise else _group_prox

    def objective(X):
        resid = forward(op, X) - Y
        pen = np.sum(np.abs(X)) if cfg.elementwise else _block_norms(X).sum()
        return 0.5 * np.linalg.norm(resid) ** 2 + lam * pen

    X = np.zeros((N, M1, D), dtype=complex)
    Z = X.copy()
    t_mom = 1.0
    f_prev = objective(X)
    obj_trace = [f_prev]
    restarts = []
    for it in range(cfg.max_iter):
        G = adjoint(op, forward(op, Z) - Y)
        X_new = prox(Z - step * G, lam * step)
        f_new = objective(X_new)
        if f_new > f_prev:
            # momentum restart; re-do the step from the last accepted point
            restarts.append(it)
            Z = X.copy()
            t_mom = 1.0
            G = adjoint(op, forward(op, Z) - Y)
            X_new = prox(Z - step * G, lam * step)
            f_new = objective(X_new)
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t_mom**2))
        Z = X_new + ((t_mom - 1.0) / t_new) * (X_new - X)
        delta = np.linalg.norm(X_new - X) / max(np.linalg.norm(X), np.finfo(float).tiny)
        X, t_mom, f_prev = X_new, t_new, f_new
        obj_trace.append(f_new)
        if delta < cfg.tol and it > 2:
            break
    return X, {"objective": obj_trace, "restarts": restarts, "iterations": len(obj_trace) - 1,
               "lam": lam, "step": step}


def _masked_forward(op, X_sel, selected):
    BX = np.einsum("pm,nmd->npd", op.B_mat, X_sel)
    return np.einsum("npd,ndb->pb", BX, op.A_stack[selected])


def _masked_adjoint(op, V, selected):
    BV = op.B_mat.conj().T @ V
    return np.einsum("mb,ndb->nmd", BV, op.A_stack[selected].conj())


def _ls_on_support(op, Y, selected, iters, ridge_rel):
    """Least squares over the selected device blocks via conjugate gradients on
    the normal equations; falls back to a ridge-regularized solve (with a
    warning) when the iteration stagnates on an ill-conditioned system."""
    def solve_with(ridge):
        k = len(selected)
        M1, D = op.B_mat.shape[1], op.A_stack.shape[1]
        X = np.zeros((k, M1, D), dtype=complex)
        r = _masked_adjoint(op, Y, selected)
        b_norm = np.linalg.norm(r)
        if b_norm == 0.0:
            return X, 0.0
        p = r.copy()
        rs = np.vdot(r, r).real
        for _ in range(iters):
            Ap = _masked_adjoint(op, _masked_forward(op, p, selected), selected) + ridge * p
            alpha = rs / max(np.vdot(p, Ap).real, np.finfo(float).tiny)
            X = X + alpha * p
            r = r - alpha * Ap
            rs_new = np.vdot(r, r).real
            if np.sqrt(rs_new) <= 1e-12 * b_norm:
                break
            p = r + (rs_new / rs) * p
            rs = rs_new
        return X, np.sqrt(rs) / b_norm

    X, rel = solve_with(0.0)
    if not np.all(np.isfinite(X)) or rel > 0.1:
        scale = np.linalg.norm(op.B_mat) ** 2 * np.linalg.norm(op.A_stack[selected]) ** 2
        warnings.warn("ill-conditioned least squares on the selected blocks; "
                      "retrying with a ridge", RuntimeWarning)
        X, _ = solve_with(ridge_rel * max(scale, 1.0))
    return X


def omp_solve(op: MeasurementOperator, Y: np.ndarray,
              cfg: BaselineConfig) -> tuple[np.ndarray, dict]:
    """Block matching pursuit: repeatedly pick the device whose adjoint
    correlation energy ||B^H R A_n^H||_F is largest, then refit all selected
    blocks by least squares on the residual's span. Stops at the sparsity
    budget or when the residual falls below tol * ||Y||_F."""
    cfg.validate()
    N, M1, D = op.shape_in
    budget = cfg.sparsity_budget if cfg.sparsity_budget is not None else N
    if budget > N:
        raise ValueError(f"sparsity budget {budget} exceeds device count {N}")

    X = np.zeros((N, M1, D), dtype=complex)
    selected: list[int] = []
    residual = Y.copy()
    y_norm = max(np.linalg.norm(Y), np.finfo(float).tiny)
    res_trace = [1.0]
    while len(selected) < budget and res_trace[-1] > cfg.tol:
        corr = _block_norms(adjoint(op, residual))
        corr[selected] = -np.inf
        pick = int(np.argmax(corr))
        selected.append(pick)
        X_sel = _ls_on_support(op, Y, selected, cfg.ls_iters, cfg.ridge)
        X = np.zeros_like(X)
        X[selected] = X_sel
        residual = Y - forward(op, X)
        res_trace.append(float(np.linalg.norm(residual) / y_norm))
    return X, {"selected": selected, "residual": res_trace,
               "iterations": len(selected)}
