import numpy as np
import pytest

from mras.channel import SystemConfig, build_dictionaries, generate_scene
from mras.metrics import (aer, aligned_distance, default_v1, detect_activity,
                          estimate_channels, incoherence, incoherence_rows, nmse)


class TestDetectActivity:
    def test_single_nonzero_block(self):
        X = np.zeros((5, 4, 4), dtype=complex)
        X[2, 1, 1] = 3.0
        det = detect_activity(X, 0.5)
        assert det.support.tolist() == [2]

    def test_equal_energies_all_detected(self):
        X = np.ones((4, 3, 3), dtype=complex)
        det = detect_activity(X, 0.999)
        assert det.support.tolist() == [0, 1, 2, 3]

    def test_energy_thresholding(self):
        X = np.zeros((3, 2, 2), dtype=complex)
        X[0, 0, 0] = 1.0            # energy 1.0
        X[1, 0, 0] = np.sqrt(0.2)   # energy 0.2
        X[2, 0, 0] = np.sqrt(0.05)  # energy 0.05
        det = detect_activity(X, 0.1)
        assert det.support.tolist() == [0, 1]

    def test_all_zero_empty_support(self):
        det = detect_activity(np.zeros((4, 2, 2), dtype=complex), 0.3)
        assert det.support.size == 0

    def test_scale_invariance(self):
        rng = np.random.default_rng(0)
        X = rng.standard_normal((4, 3, 3)) + 1j * rng.standard_normal((4, 3, 3))
        a = detect_activity(X, 0.4).support
        b = detect_activity(1e6 * X, 0.4).support
        assert np.array_equal(a, b)

    def test_invalid_threshold(self):
        with pytest.raises(ValueError):
            detect_activity(np.ones((2, 2, 2)), 1.5)


class TestEstimateChannels:
    def test_zero_estimate(self):
        A = np.ones((4, 6), dtype=complex)
        B = np.ones((8, 3), dtype=complex)
        H = estimate_channels(np.zeros((2, 6, 3), dtype=complex), A, B, [0])
        assert np.all(H[0] == 0)

    def test_single_entry_rank_one(self):
        cfg = SystemConfig(N=2, K=1, M=6, Mp=6, M1=8, B=16, Bp=8, gamma=0.5,
                           p=2, L_max=2, snr_db=None, sigma2=0.0)
        A_theta, A_tau = build_dictionaries(cfg)
        X = np.zeros((2, cfg.M1, cfg.D), dtype=complex)
        X[0, 3, 5] = 2.0 - 1j
        H = estimate_channels(X, A_theta, A_tau, [0])[0]
        expected = (2.0 - 1j) * np.outer(A_theta[:, 3], A_tau[:, 5].conj())
        assert np.allclose(H, expected)
        assert np.linalg.matrix_rank(H) == 1

    def test_model_round_trip(self):
        cfg = SystemConfig(N=3, K=2, M=6, Mp=4, M1=8, B=16, Bp=6, gamma=0.5,
                           p=2, L_max=2, snr_db=None, sigma2=0.0)
        rng = np.random.default_rng(1)
        scene = generate_scene(cfg, rng)
        A_theta, A_tau = build_dictionaries(cfg)
        H_from_states = estimate_channels(scene.gated_states, A_theta, A_tau,
                                          scene.support)
        for k in scene.support:
            expected = A_theta @ scene.states[k] @ A_tau.conj().T
            assert np.allclose(H_from_states[int(k)], expected)


class TestAer:
    def test_perfect(self):
        assert aer([1, 2], [1, 2], 4) == 0.0

    def test_total_failure_is_two(self):
        assert aer([0, 1], [2, 3], 4) == 2.0

    def test_half_and_half(self):
        assert aer([1, 2], [1, 3], 4) == pytest.approx(1.0)

    def test_empty_truth_convention(self):
        assert aer([], [1], 4) == pytest.approx(1.0 / 4)
        assert aer([], [], 4) == 0.0

    def test_all_active_convention(self):
        assert aer(range(4), range(3), 4) == pytest.approx(1.0 / 4)


class TestNmse:
    def test_exact(self):
        H = {0: np.ones((3, 3), dtype=complex)}
        assert nmse(H, {0: np.ones((3, 3), dtype=complex)}) == 0.0

    def test_double_scale(self):
        H = {0: np.ones((2, 2), dtype=complex)}
        est = {0: 2 * np.ones((2, 2), dtype=complex)}
        assert nmse(H, est) == pytest.approx(0.5)

    def test_matches_direct_formula(self):
        rng = np.random.default_rng(2)
        H = {k: rng.standard_normal((4, 5)) + 1j * rng.standard_normal((4, 5))
             for k in (0, 2, 3)}
        est = {k: rng.standard_normal((4, 5)) + 1j * rng.standard_normal((4, 5))
               for k in (0, 2)}  # device 3 missed
        num = sum(np.linalg.norm(H[k] - est.get(k, np.zeros((4, 5)))) ** 2 for k in H)
        den = sum(np.linalg.norm(est.get(k, np.zeros((4, 5)))) ** 2 for k in H)
        assert nmse(H, est) == pytest.approx(np.sqrt(num) / np.sqrt(den), rel=1e-12)

    def test_vanishing_denominator(self):
        H = {0: np.ones((2, 2), dtype=complex)}
        assert nmse(H, {}) == np.inf


def stack_factors(J, R):
    return np.concatenate([J, R], axis=0)


def alignment_oracle(J, R, J_star, R_star):
    """Brute-force grid over magnitude and phase of the alignment scalar,
    refined by a local polish around the best cell."""
    best = np.inf
    mags = np.logspace(-1, 1, 120)
    phases = np.linspace(0, 2 * np.pi, 256, endpoint=False)
    for t in mags:
        for ph in phases:
            theta = t * np.exp(1j * ph)
            v = (np.linalg.norm(J / np.conj(theta) - J_star) ** 2
                 + np.linalg.norm(theta * R - R_star) ** 2)
            best = min(best, v)
    # local polish with a fine grid around the best magnitude
    t_best = None
    for t in mags:
        for ph in phases:
            theta = t * np.exp(1j * ph)
            v = (np.linalg.norm(J / np.conj(theta) - J_star) ** 2
                 + np.linalg.norm(theta * R - R_star) ** 2)
            if v == best:
                t_best, ph_best = t, ph
    for t in np.linspace(t_best * 0.9, t_best * 1.1, 200):
        for ph in np.linspace(ph_best - 0.1, ph_best + 0.1, 200):
            theta = t * np.exp(1j * ph)
            v = (np.linalg.norm(J / np.conj(theta) - J_star) ** 2
                 + np.linalg.norm(theta * R - R_star) ** 2)
            best = min(best, v)
    return best


class TestAlignedDistance:
    def test_identical_factors(self):
        rng = np.random.default_rng(3)
        J = rng.standard_normal((6, 2)) + 1j * rng.standard_normal((6, 2))
        R = rng.standard_normal((4, 2)) + 1j * rng.standard_normal((4, 2))
        S = stack_factors(J, R)
        assert aligned_distance(S, S.copy(), m1=6) < 1e-10

    def test_reciprocal_scaling_absorbed(self):
        rng = np.random.default_rng(4)
        J = rng.standard_normal((6, 2)) + 1j * rng.standard_normal((6, 2))
        R = rng.standard_normal((4, 2)) + 1j * rng.standard_normal((4, 2))
        S_star = stack_factors(J, R)
        S = stack_factors(2.0 * J, 0.5 * R)
        assert aligned_distance(S, S_star, m1=6) < 1e-7

    def test_complex_gauge_absorbed(self):
        rng = np.random.default_rng(5)
        J = rng.standard_normal((6, 2)) + 1j * rng.standard_normal((6, 2))
        R = rng.standard_normal((4, 2)) + 1j * rng.standard_normal((4, 2))
        c = 1.7 * np.exp(1j * 0.9)
        S_star = stack_factors(J, R)
        S = stack_factors(J / np.conj(c), c * R)
        assert aligned_distance(S, S_star, m1=6) < 1e-7

    def test_matches_grid_oracle(self):
        rng = np.random.default_rng(6)
        for _ in range(3):
            J = rng.standard_normal((4, 2)) + 1j * rng.standard_normal((4, 2))
            R = rng.standard_normal((4, 2)) + 1j * rng.standard_normal((4, 2))
            J_star = rng.standard_normal((4, 2)) + 1j * rng.standard_normal((4, 2))
            R_star = rng.standard_normal((4, 2)) + 1j * rng.standard_normal((4, 2))
            ref = np.linalg.norm(J_star) ** 2 + np.linalg.norm(R_star) ** 2
            oracle = np.sqrt(alignment_oracle(J, R, J_star, R_star) / ref)
            got = aligned_distance(stack_factors(J, R), stack_factors(J_star, R_star),
                                   m1=4)
            assert got <= oracle + 1e-6
            assert abs(got - oracle) < 1e-3 * max(oracle, 1.0)

    def test_zero_reference_rejected(self):
        rng = np.random.default_rng(7)
        S = rng.standard_normal((8, 2)) + 1j * rng.standard_normal((8, 2))
        with pytest.raises(ValueError):
            aligned_distance(S, np.zeros_like(S), m1=4)


class TestIncoherence:
    def test_scaling_invariance(self):
        rng = np.random.default_rng(8)
        J = rng.standard_normal((3, 8, 2)) + 1j * rng.standard_normal((3, 8, 2))
        rows = rng.standard_normal((6, 8)) + 1j * rng.standard_normal((6, 8))
        a = incoherence(J, rows)
        b = incoherence(7.3 * J, rows)
        assert a == pytest.approx(b, rel=1e-12)

    def test_spike_attains_maximum(self):
        # factor aligned with one measurement row versus spread factors
        rng = np.random.default_rng(9)
        rows = np.linalg.qr(rng.standard_normal((8, 8))
                            + 1j * rng.standard_normal((8, 8)))[0]
        spike = rows[3][:, None].copy()  # b_3^H spike = 1, other rows see 0
        beta_spike = incoherence(spike, rows)
        # spike achieves sqrt(Q) * 1, the largest possible for unit rows
        assert beta_spike == pytest.approx(np.sqrt(8), rel=1e-10)
        betas_flat = []
        for _ in range(50):
            z = rng.standard_normal((8, 1)) + 1j * rng.standard_normal((8, 1))
            betas_flat.append(incoherence(z, rows))
        assert np.median(betas_flat) < beta_spike

    def test_flat_factor_near_minimum(self):
        # unitary rows: sum over rows of |b_q^H J|^2 = ||J||^2, so the max row
        # is at least ||J|| / sqrt(Q), with equality exactly when flat
        rng = np.random.default_rng(10)
        rows = np.linalg.qr(rng.standard_normal((8, 8))
                            + 1j * rng.standard_normal((8, 8)))[0]
        w = np.ones((8, 1), dtype=complex) / np.sqrt(8)
        J_flat = rows.T @ w  # makes every |b_q^H J| equal to 1/sqrt(8)
        beta = incoherence(J_flat, rows)
        assert beta == pytest.approx(1.0, rel=1e-9)
        # any other factor scores at least as high
        for _ in range(20):
            z = rng.standard_normal((8, 1)) + 1j * rng.standard_normal((8, 1))
            assert incoherence(z, rows) >= beta - 1e-9

    def test_zero_factor_rejected(self):
        rows = np.eye(4, dtype=complex)
        with pytest.raises(ValueError):
            incoherence(np.zeros((4, 2), dtype=complex), rows)

    def test_rows_helper_normalization(self):
        from mras.measurement import operator_from_config
        cfg = SystemConfig(N=2, K=1, M=6, Mp=4, M1=8, B=16, Bp=6, gamma=0.5,
                           p=2, L_max=2, snr_db=None, sigma2=0.0)
        op = operator_from_config(cfg, np.random.default_rng(0))
        rows, total = incoherence_rows(op)
        assert total == op.n_measurements
        assert np.mean(np.sum(np.abs(rows) ** 2, axis=1)) == pytest.approx(1.0)


class TestDefaultV1:
    def test_empty_support_fallback(self):
        cfg = SystemConfig(N=3, K=0, M=6, Mp=4, M1=8, B=16, Bp=6, gamma=0.5,
                           p=2, L_max=2, snr_db=None, sigma2=0.0)
        scene = generate_scene(cfg, np.random.default_rng(0))
        assert default_v1(scene) == 0.05

    def test_ratio_with_margin(self):
        cfg = SystemConfig(N=4, K=2, M=6, Mp=4, M1=8, B=16, Bp=6, gamma=0.5,
                           p=2, L_max=2, snr_db=None, sigma2=0.0)
        scene = generate_scene(cfg, np.random.default_rng(1))
        amps = np.linalg.norm(scene.states[scene.support], axis=(1, 2))
        expected = 0.25 * (amps.min() / amps.max()) ** 2
        assert default_v1(scene) == pytest.approx(expected)
