"""On-grid delay-angular channel generation for wideband multi-device access.

Each device's channel is a superposition of a few scattering clusters. A
cluster occupies a small window of adjacent angle-grid rows and delay-grid
columns (the "spread"), so the delay-angular state matrix of a device is
simultaneously sparse (few occupied rows/columns) and low rank (rank bounded
by the cluster count).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict

import numpy as np

C_LIGHT = 299_792_458.0  # m/s


class ConfigError(ValueError):
    """Raised when a scenario configuration violates its invariants."""


@dataclass
class SystemConfig:
    """Scenario dimensions and physical constants.

    Delay grid depth D is derived as floor(gamma * B) and exposed as a
    property; use :meth:`with_delay_depth` to pin D directly.
    """

    N: int = 16              # devices in the group
    K: int = 4               # active devices
    M: int = 32              # BS antennas
    Mp: int = 16             # sampled antennas
    M1: int = 32             # angle grid size (>= M)
    B: int = 512             # OFDM subcarriers
    Bp: int = 96             # sampled subcarriers (pilot length)
    gamma: float = 0.0625    # delay-spread fraction of the symbol, in (0, 1]
    Ts: float = 66.7e-6      # useful OFDM symbol duration (s)
    fc: float = 73e9         # carrier frequency (Hz)
    L_max: int = 2           # maximum clusters per device
    Ln: list[int] | None = None  # per-device cluster counts (default: L_max)
    p: int = 4               # angular/delay spread in grid samples
    Jn: int | None = None    # angle shifts per cluster (default: p)
    In: int | None = None    # delay shifts per cluster (default: p)
    sigma2: float | None = None   # noise variance; mutually exclusive with snr_db
    snr_db: float | None = 10.0   # target average SNR in dB
    d_range: tuple[float, float] = (20.0, 500.0)  # device-BS distance (m)
    seed: int = 0

    @property
    def D(self) -> int:
        # small epsilon guards against 15.999... from a gamma stored as D/B
        return int(math.floor(self.gamma * self.B + 1e-9))

    @classmethod
    def with_delay_depth(cls, D: int, **kwargs) -> "SystemConfig":
        """Build a config with an exact delay grid depth D (sets gamma = D/B)."""
        B = kwargs.get("B", cls.B)
        return cls(gamma=D / B, **kwargs)

    def cluster_counts(self) -> np.ndarray:
        if self.Ln is None:
            return np.full(self.N, self.L_max, dtype=int)
        return np.asarray(self.Ln, dtype=int)

    def n_angle_shifts(self) -> int:
        return self.p if self.Jn is None else self.Jn

    def n_delay_shifts(self) -> int:
        return self.p if self.In is None else self.In

    def validate(self) -> None:
        if not (self.Mp <= self.M <= self.M1):
            raise ConfigError(f"need Mp <= M <= M1, got {self.Mp}, {self.M}, {self.M1}")
        if not (1 <= self.Bp <= self.B):
            raise ConfigError(f"need 1 <= Bp <= B, got {self.Bp}, {self.B}")
        # K = 0 is a degenerate all-silent scene, allowed for testing
        if not (0 <= self.K <= self.N):
            raise ConfigError(f"need 0 <= K <= N, got K={self.K}, N={self.N}")
        if not (0.0 < self.gamma <= 1.0):
            raise ConfigError(f"gamma must lie in (0, 1], got {self.gamma}")
        counts = self.cluster_counts()
        if counts.shape != (self.N,):
            raise ConfigError("Ln must list one cluster count per device")
        if counts.min() < 1 or counts.max() > self.L_max:
            raise ConfigError("need 1 <= Ln <= L_max for every device")
        if self.p < 1:
            raise ConfigError("spread p must be >= 1")
        if self.p * self.L_max >= min(self.D, self.M1):
            raise ConfigError(
                f"sparsity premise violated: p*L_max = {self.p * self.L_max} "
                f"must be < min(D, M1) = {min(self.D, self.M1)}"
            )
        if self.n_angle_shifts() > self.p or self.n_delay_shifts() > self.p:
            raise ConfigError("shift counts Jn, In cannot exceed the spread p")
        if self.sigma2 is not None and self.sigma2 < 0:
            raise ConfigError("sigma2 must be nonnegative")
        if self.sigma2 is not None and self.snr_db is not None:
            raise ConfigError("set either sigma2 or snr_db, not both")
        if self.d_range[0] <= 0 or self.d_range[1] < self.d_range[0]:
            raise ConfigError("d_range must satisfy 0 < d_min <= d_max")

    def to_json(self) -> str:
        d = asdict(self)
        d["d_range"] = list(self.d_range)
        return json.dumps(d, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "SystemConfig":
        d = json.loads(text)
        if "d_range" in d:
            d["d_range"] = tuple(d["d_range"])
        return cls(**d)


@dataclass
class ClusterParams:
    """Per-device cluster geometry and gains.

    Arrays are indexed (cluster, shift). Offsets are integer grid shifts
    relative to each cluster's mean index, already clamped into the grid.
    """

    angle_centers: np.ndarray   # (L,) int, mean angle grid index
    delay_centers: np.ndarray   # (L,) int, mean delay grid index
    angle_offsets: np.ndarray   # (L, Jn) int
    delay_offsets: np.ndarray   # (L, In) int
    angle_gains: np.ndarray     # (L, Jn) complex, CN(0, 1/mu_bar)
    delay_gains: np.ndarray     # (L, In) complex, CN(0, 1/mu_bar)
    distance: float             # device-BS distance (m)
    mu_bar: float               # gain precision (4 pi d fc / c)^2


@dataclass
class ChannelRealization:
    """One drawn scene: activity flags and every device's state matrix."""

    activity: np.ndarray        # (N,) bool
    states: np.ndarray          # (N, M1, D) complex, ungated state matrices
    support: np.ndarray         # sorted indices of active devices
    clusters: list[ClusterParams]

    @property
    def gated_states(self) -> np.ndarray:
        """Device state matrices with inactive devices zeroed."""
        return self.states * self.activity[:, None, None]


def steering_vector(f: float, M: int) -> np.ndarray:
    """Array response at normalized spatial frequency f: entry m is exp(-i 2 pi f m)."""
    return np.exp(-2j * np.pi * f * np.arange(M))


def delay_vector(m: int, B: int, D: int | None = None) -> np.ndarray:
    """Subcarrier response of the m-th delay grid sample over B subcarriers.

    Entry b equals exp(-i 2 pi m b / B). The grid index must satisfy
    0 <= m < D (with D <= B); otherwise the delay sample is invalid.
    """
    depth = B if D is None else D
    if not (0 <= m < depth <= B):
        raise ValueError(f"invalid delay sample: m={m} outside grid [0, {depth}) with B={B}")
    return np.exp(-2j * np.pi * m * np.arange(B) / B)


def build_dictionaries(cfg: SystemConfig) -> tuple[np.ndarray, np.ndarray]:
    """Angle and delay dictionaries (A_theta: M x M1, A_tau: B x D).

    Column m of A_theta is the steering vector at frequency m/M1; column m of
    A_tau is the delay vector of grid sample m. All entries have unit modulus.
    """
    cfg.validate()
    m_ant = np.arange(cfg.M)[:, None]
    A_theta = np.exp(-2j * np.pi * m_ant * (np.arange(cfg.M1)[None, :] / cfg.M1))
    b_sub = np.arange(cfg.B)[:, None]
    A_tau = np.exp(-2j * np.pi * b_sub * (np.arange(cfg.D)[None, :] / cfg.B))
    return A_theta, A_tau


def _offset_window(p: int) -> np.ndarray:
    # integer shifts {-floor(p/2), ..., ceil(p/2)-1}, p values centered on 0
    return np.arange(p) - p // 2


def _complex_gains(rng: np.random.Generator, shape, variance: float) -> np.ndarray:
    scale = math.sqrt(variance / 2.0)
    return scale * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


def sample_clusters(cfg: SystemConfig, device_index: int, rng: np.random.Generator) -> ClusterParams:
    """Draw cluster centers, spread offsets, and gains for one device.

    Centers are uniform on the angle/delay grids. Offsets are distinct values
    from the width-p window centered on each mean; with the default Jn=In=p
    the whole window is occupied. Gains are i.i.d. CN(0, 1/mu_bar) with
    mu_bar = (4 pi d fc / c)^2 and d uniform over d_range.
    """
    if device_index >= cfg.N:
        raise ConfigError(f"device index {device_index} out of range for N={cfg.N}")
    L = int(cfg.cluster_counts()[device_index])
    Jn, In = cfg.n_angle_shifts(), cfg.n_delay_shifts()

    distance = rng.uniform(*cfg.d_range)
    mu_bar = (4.0 * np.pi * distance * cfg.fc / C_LIGHT) ** 2

    angle_centers = rng.integers(0, cfg.M1, size=L)
    delay_centers = rng.integers(0, cfg.D, size=L)
    window = _offset_window(cfg.p)
    angle_offsets = np.stack([rng.choice(window, size=Jn, replace=False) for _ in range(L)])
    delay_offsets = np.stack([rng.choice(window, size=In, replace=False) for _ in range(L)])

    return ClusterParams(
        angle_centers=angle_centers,
        delay_centers=delay_centers,
        angle_offsets=angle_offsets,
        delay_offsets=delay_offsets,
        angle_gains=_complex_gains(rng, (L, Jn), 1.0 / mu_bar),
        delay_gains=_complex_gains(rng, (L, In), 1.0 / mu_bar),
        distance=distance,
        mu_bar=mu_bar,
    )


def assemble_state_matrix(params: ClusterParams, cfg: SystemConfig) -> np.ndarray:
    """Sum of per-cluster outer products: X = sum_l varsigma_l xi_l^T.

    varsigma_l lives on the cluster's angle window (rows), xi_l on its delay
    window (columns), so X has rank <= L and at most p*L nonzero rows and
    columns. Window indices are clamped at the grid edges; collapsed indices
    accumulate their gains.
    """
    X = np.zeros((cfg.M1, cfg.D), dtype=complex)
    L = params.angle_centers.shape[0]
    for l in range(L):
        a_idx = np.clip(params.angle_centers[l] + params.angle_offsets[l], 0, cfg.M1 - 1)
        d_idx = np.clip(params.delay_centers[l] + params.delay_offsets[l], 0, cfg.D - 1)
        varsigma = np.zeros(cfg.M1, dtype=complex)
        np.add.at(varsigma, a_idx, params.angle_gains[l])
        xi = np.zeros(cfg.D, dtype=complex)
        np.add.at(xi, d_idx, params.delay_gains[l])
        X += np.outer(varsigma, xi)
    return X


def generate_scene(cfg: SystemConfig, rng: np.random.Generator) -> ChannelRealization:
    """Draw a full scene: a uniform K-subset of active devices plus every
    device's state matrix (inactive devices keep theirs for oracle use)."""
    cfg.validate()
    support = np.sort(rng.choice(cfg.N, size=cfg.K, replace=False)) if cfg.K > 0 \
        else np.array([], dtype=int)
    activity = np.zeros(cfg.N, dtype=bool)
    activity[support] = True

    clusters = []
    states = np.zeros((cfg.N, cfg.M1, cfg.D), dtype=complex)
    for n in range(cfg.N):
        params = sample_clusters(cfg, n, rng)
        clusters.append(params)
        states[n] = assemble_state_matrix(params, cfg)
    return ChannelRealization(activity=activity, states=states, support=support,
                              clusters=clusters)
