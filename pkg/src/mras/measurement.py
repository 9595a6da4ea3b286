"""Pilot/sampling measurement operator and received-signal synthesis.

The observation is Y = sum_n B X_n A_n + Z with B = P_M A_theta (selected
antenna rows of the angle dictionary) and A_n = A_tau^H P_T diag(alpha_n)
(selected subcarrier rows of the delay dictionary, scaled by device n's
pilot). The operator is kept in this blockwise form; a dense Kronecker
matrix can be materialized on demand for small oracle checks.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from .channel import SystemConfig, build_dictionaries, ConfigError


@dataclass
class MeasurementOperator:
    """Immutable blockwise measurement map. Shareable across threads."""

    pilots: np.ndarray          # (N, Bp) complex
    antenna_set: np.ndarray     # (Mp,) sorted indices into [0, M)
    subcarrier_set: np.ndarray  # (Bp,) sorted indices into [0, B)
    B_mat: np.ndarray           # (Mp, M1) = P_M A_theta
    A_stack: np.ndarray         # (N, D, Bp), A_stack[n] = A_tau^H P_T diag(pilots[n])
    A_theta: np.ndarray         # (M, M1) full angle dictionary
    A_tau: np.ndarray           # (B, D) full delay dictionary

    @property
    def shape_in(self) -> tuple[int, int, int]:
        N, D, _ = self.A_stack.shape
        return (N, self.B_mat.shape[1], D)

    @property
    def shape_out(self) -> tuple[int, int]:
        return (self.B_mat.shape[0], self.A_stack.shape[2])

    @property
    def n_measurements(self) -> int:
        Mp, Bp = self.shape_out
        return Mp * Bp


def generate_pilots(N: int, Bp: int, rng: np.random.Generator) -> np.ndarray:
    """i.i.d. CN(0, 1) pilot sequences, one length-Bp vector per device."""
    if Bp < 1:
        raise ConfigError("pilot length Bp must be >= 1")
    return (rng.standard_normal((N, Bp)) + 1j * rng.standard_normal((N, Bp))) / np.sqrt(2.0)


def sample_subsets(M: int, Mp: int, B: int, Bp: int,
                   rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Uniform antenna/subcarrier subsets without replacement, sorted ascending."""
    if Mp > M or Bp > B:
        raise ConfigError(f"subset sizes exceed grids: Mp={Mp}>M={M} or Bp={Bp}>B={B}")
    antenna_set = np.sort(rng.choice(M, size=Mp, replace=False))
    subcarrier_set = np.sort(rng.choice(B, size=Bp, replace=False))
    return antenna_set, subcarrier_set


def build_operator(A_theta: np.ndarray, A_tau: np.ndarray, pilots: np.ndarray,
                   subsets: tuple[np.ndarray, np.ndarray]) -> MeasurementOperator:
    """Assemble the blockwise operator from dictionaries, pilots, and subsets."""
    antenna_set, subcarrier_set = np.asarray(subsets[0]), np.asarray(subsets[1])
    M, M1 = A_theta.shape
    B, D = A_tau.shape
    N, Bp = pilots.shape
    if antenna_set.size and (antenna_set.min() < 0 or antenna_set.max() >= M):
        raise ConfigError("antenna_set indices out of range")
    if subcarrier_set.min() < 0 or subcarrier_set.max() >= B:
        raise ConfigError("subcarrier_set indices out of range")
    if len(np.unique(antenna_set)) != antenna_set.size \
            or len(np.unique(subcarrier_set)) != subcarrier_set.size:
        raise ConfigError("sampling sets must not contain duplicates")
    if subcarrier_set.size != Bp:
        raise ConfigError(f"pilot length {Bp} does not match subcarrier subset "
                          f"size {subcarrier_set.size}")

    B_mat = A_theta[antenna_set, :]
    # A_tau^H P_T = conj of the selected subcarrier rows, transposed to (D, Bp)
    A_sel = A_tau[subcarrier_set, :].conj().T
    A_stack = A_sel[None, :, :] * pilots[:, None, :]
    return MeasurementOperator(pilots=pilots, antenna_set=antenna_set,
                               subcarrier_set=subcarrier_set, B_mat=B_mat,
                               A_stack=A_stack, A_theta=A_theta, A_tau=A_tau)


def operator_from_config(cfg: SystemConfig, rng: np.random.Generator) -> MeasurementOperator:
    """Draw pilots and sampling sets for cfg and build the operator."""
    A_theta, A_tau = build_dictionaries(cfg)
    pilots = generate_pilots(cfg.N, cfg.Bp, rng)
    subsets = sample_subsets(cfg.M, cfg.Mp, cfg.B, cfg.Bp, rng)
    return build_operator(A_theta, A_tau, pilots, subsets)


def forward(op: MeasurementOperator, X: np.ndarray) -> np.ndarray:
    """Noise-free observation sum_n B X_n A_n for stacked states X (N, M1, D)."""
    BX = np.einsum("pm,nmd->npd", op.B_mat, X)
    return np.einsum("npd,ndb->pb", BX, op.A_stack)


def adjoint(op: MeasurementOperator, V: np.ndarray) -> np.ndarray:
    """Adjoint map V -> {B^H V A_n^H}, stacked (N, M1, D).

    Exact conjugate transpose of :func:`forward` under the trace inner
    product; needed by the proximal and greedy baselines.
    """
    BV = op.B_mat.conj().T @ V          # (M1, Bp)
    return np.einsum("mb,ndb->nmd", BV, op.A_stack.conj())


def dense_matrix(op: MeasurementOperator, max_bytes: int = 2**31) -> np.ndarray:
    """Materialize the (Mp Bp) x (M1 D N) matrix mapping vec(X) to vec(Y).

    Column-major vec convention: the matrix is kron(conj(Abar_tau), B) with
    Abar_tau the horizontal concatenation of the per-device pilot-scaled
    delay blocks. Intended for desk-scale oracle checks only; raises when the
    result would exceed max_bytes.
    """
    Mp, Bp = op.shape_out
    N, M1, D = op.shape_in
    need = Mp * Bp * M1 * D * N * 16
    if need > max_bytes:
        raise MemoryError(f"dense operator needs {need} bytes > budget {max_bytes}")
    # Abar_tau: (Bp, D N), block n = conj(pilots[n])[:, None] * A_tau[subcarriers]
    blocks = [op.A_stack[n].conj().T for n in range(N)]  # each (Bp, D)
    Abar_tau = np.hstack(blocks)
    return np.kron(Abar_tau.conj(), op.B_mat)


def add_noise(Y: np.ndarray, sigma2: float, rng: np.random.Generator) -> np.ndarray:
    """Additive i.i.d. CN(0, sigma2) noise; sigma2 = 0 returns Y unchanged."""
    if sigma2 < 0:
        raise ConfigError("noise variance must be nonnegative")
    if sigma2 == 0.0:
        return Y
    Z = np.sqrt(sigma2 / 2.0) * (rng.standard_normal(Y.shape) + 1j * rng.standard_normal(Y.shape))
    return Y + Z


def snr_of_device(op: MeasurementOperator, Xn: np.ndarray, sigma2: float) -> float:
    """Per-device SNR in dB: 10 log10(||B X_n A_n||_F^2 / (Mp Bp sigma2))."""
    Y1 = forward(op, Xn[None, ...]) if Xn.ndim == 2 else forward(op, Xn)
    num = np.linalg.norm(Y1) ** 2
    return 10.0 * np.log10(num / (op.n_measurements * sigma2))


def _active_signal_energies(op: MeasurementOperator, states: np.ndarray,
                            support: np.ndarray) -> np.ndarray:
    energies = []
    for k in support:
        Y1 = np.einsum("pm,md,db->pb", op.B_mat, states[k], op.A_stack[k])
        energies.append(np.linalg.norm(Y1) ** 2)
    return np.asarray(energies)


def average_snr(op: MeasurementOperator, states: np.ndarray, support: np.ndarray,
                sigma2: float) -> float:
    """Average SNR (dB) of the active devices, mean taken on signal energy."""
    e = _active_signal_energies(op, states, support)
    return 10.0 * np.log10(e.mean() / (op.n_measurements * sigma2))


def calibrate_sigma2(op: MeasurementOperator, states: np.ndarray, support: np.ndarray,
                     snr_db: float) -> float:
    """Noise variance that puts the scene's average active-device SNR at snr_db."""
    if support.size == 0:
        raise ConfigError("cannot calibrate SNR on a scene with no active devices")
    e = _active_signal_energies(op, states, support)
    return float(e.mean() / (op.n_measurements * 10.0 ** (snr_db / 10.0)))


def opnorm_estimate(op: MeasurementOperator, rng: np.random.Generator,
                    iters: int = 60, tol: float = 1e-8) -> float:
    """Spectral norm of the measurement map by power iteration on A* A."""
    N, M1, D = op.shape_in
    X = rng.standard_normal((N, M1, D)) + 1j * rng.standard_normal((N, M1, D))
    X /= np.linalg.norm(X)
    lam = 0.0
    for _ in range(iters):
        W = adjoint(op, forward(op, X))
        lam_new = np.linalg.norm(W)
        if lam_new == 0.0:
            return 0.0
        X = W / lam_new
        if abs(lam_new - lam) <= tol * lam_new:
            lam = lam_new
            break
        lam = lam_new
    return float(np.sqrt(lam))


def operator_to_json(op: MeasurementOperator, cfg: SystemConfig) -> str:
    """Serialize pilots and sampling sets (with the config) for reproducibility."""
    payload = {
        "config": json.loads(cfg.to_json()),
        "antenna_set": op.antenna_set.tolist(),
        "subcarrier_set": op.subcarrier_set.tolist(),
        "pilots_re": op.pilots.real.tolist(),
        "pilots_im": op.pilots.imag.tolist(),
    }
    return json.dumps(payload)


def operator_from_json(text: str) -> tuple[MeasurementOperator, SystemConfig]:
    payload = json.loads(text)
    cfg = SystemConfig.from_json(json.dumps(payload["config"]))
    A_theta, A_tau = build_dictionaries(cfg)
    pilots = np.asarray(payload["pilots_re"]) + 1j * np.asarray(payload["pilots_im"])
    subsets = (np.asarray(payload["antenna_set"]), np.asarray(payload["subcarrier_set"]))
    return build_operator(A_theta, A_tau, pilots, subsets), cfg


def save_matrix_csv(Y: np.ndarray, path) -> None:
    """Write a complex matrix as CSV, row-major, each cell the text "re,im"."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, quoting=csv.QUOTE_ALL)
        for row in np.atleast_2d(Y):
            writer.writerow([f"{float(c.real)!r},{float(c.imag)!r}" for c in row])


def load_matrix_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = []
        for row in csv.reader(fh):
            rows.append([complex(float(c.split(",")[0]), float(c.split(",")[1])) for c in row])
    return np.asarray(rows)
