"""
Engine state machine: training, per-frame steps, detection and projection-PCA,
and the theorem parameter formulas.
"""

import math

import numpy as np
import pytest

from conftest import random_basis
from reprocs.core.engine import (
    Phase,
    ReProCS,
    ReProCSState,
    detect_or_ppca,
    theorem_params,
    train_init,
    zeta_bound,
)
from reprocs.core.errors import (
    ConfigError,
    DimensionMismatchError,
    InfeasibleConfigError,
    SingularSystemError,
    TrainingDataError,
    ZetaRangeError,
)
from reprocs.core.linalg import BasisMatrix, dif, orthonormality_error
from reprocs.models.schemas import EngineParams, ScenarioConstants


def constants(**overrides) -> ScenarioConstants:
    values = dict(
        n=256, r0=1, r_new=2, J=1, lambda_train_minus=1.0, lambda_plus=1.0, gamma=1.0, gamma_new=1.0
    )
    values.update(overrides)
    return ScenarioConstants(**values)


def coordinate_basis(n: int, columns) -> BasisMatrix:
    return BasisMatrix(np.eye(n)[:, list(columns)])


def detect_state(n=6, alpha=4, frame=4, t_train=10) -> ReProCSState:
    return ReProCSState(
        P_star=coordinate_basis(n, [0]),
        P_new=BasisMatrix.empty(n),
        lambda_train_minus=1.0,
        alpha=alpha,
        t_train=t_train,
        frame=frame,
    )


def new_direction_buffer(rng, n, alpha, index, amplitude) -> np.ndarray:
    buffer = np.zeros((n, alpha))
    buffer[index] = amplitude * rng.choice([-1.0, 1.0], size=alpha)
    return buffer


class TestTrainInit:
    def test_repeated_unit_vector(self, rng):
        v = rng.standard_normal(5)
        v /= np.linalg.norm(v)
        basis, lam = train_init(np.tile(v[:, None], (1, 7)))
        assert basis.r == 1
        assert dif(basis, BasisMatrix(v)) == pytest.approx(0.0, abs=1e-12)
        assert lam == pytest.approx(1.0)

    def test_noiseless_low_rank_is_exact(self, rng):
        P0 = random_basis(rng, 30, 4)
        M = P0.data @ rng.uniform(-5, 5, size=(4, 50))
        basis, _ = train_init(M)
        assert basis.r == 4
        assert dif(basis, P0) <= 1e-8

    def test_fixed_rank_eigenvalue(self, rng):
        M = np.diag([3.0, 2.0, 1.0, 0.5]) @ rng.standard_normal((4, 200))
        basis, lam = train_init(M, "fixed_rank", r0=2)
        assert basis.r == 2
        eig = np.sort(np.linalg.eigvalsh(M @ M.T / M.shape[1]))[::-1]
        assert lam == pytest.approx(eig[1], rel=1e-10)

    @pytest.mark.parametrize("energy, rank", [(0.9, 1), (0.95, 2)])
    def test_energy_fraction(self, energy, rank):
        M = np.zeros((3, 2))
        M[0, 0], M[1, 1] = math.sqrt(18), math.sqrt(2)
        basis, lam = train_init(M, "energy_fraction", energy=energy)
        assert basis.r == rank
        assert lam == pytest.approx([9.0, 1.0][rank - 1])

    def test_all_zero(self):
        with pytest.raises(TrainingDataError):
            train_init(np.zeros((4, 3)))

    def test_fixed_rank_out_of_range(self, rng):
        with pytest.raises(TrainingDataError):
            train_init(rng.standard_normal((4, 3)), "fixed_rank", r0=5)

    def test_no_frames(self):
        with pytest.raises(DimensionMismatchError):
            train_init(np.zeros((4, 0)))


class TestTheoremParams:
    def test_k_for_two_new_directions(self):
        params = theorem_params(constants(), 1e-6)
        assert params.engine.K == 81
        assert params.engine.K == math.ceil(math.log(3.2e-7) / math.log(0.83))

    def test_xi_limit(self):
        c = constants(gamma_new=1.5)
        params = theorem_params(c, 1e-30)
        assert params.engine.xi == pytest.approx(math.sqrt(2) * 1.5, rel=1e-12)

    @pytest.mark.parametrize("zeta", [1e-6, 1e-7, 1e-9])
    def test_omega_is_seven_xi(self, zeta):
        engine = theorem_params(constants(), zeta).engine
        assert engine.omega == pytest.approx(7 * engine.xi)
        assert engine.thresh == pytest.approx(0.5)

    def test_alpha_formula(self):
        params = theorem_params(constants(), 1e-6)
        K = params.engine.K
        expected = params.c_add * (math.log(6 * (K + 1)) + 11 * math.log(256))
        assert params.alpha_real == pytest.approx(expected)
        assert params.engine.alpha == math.ceil(params.alpha_real)

    def test_zeta_bound(self):
        c = constants()
        assert zeta_bound(c) == pytest.approx(1e-4 / 9)
        with pytest.raises(ZetaRangeError):
            theorem_params(c, 2e-5)

    def test_non_positive_zeta(self):
        with pytest.raises(ZetaRangeError):
            theorem_params(constants(), 0.0)

    def test_needs_a_change(self):
        with pytest.raises(InfeasibleConfigError):
            theorem_params(constants(J=0), 1e-6)


class TestDetectOrPpca:
    def test_zero_energy_no_detection(self):
        state = detect_state()
        params = EngineParams(alpha=4, K=2)
        assert detect_or_ppca(state, params, np.zeros((6, 4))) is state

    def test_detection_fires(self, rng):
        state = detect_state()
        params = EngineParams(alpha=4, K=2)
        buffer = new_direction_buffer(rng, 6, 4, 3, math.sqrt(2.0))
        after = detect_or_ppca(state, params, buffer)
        assert after.phase == Phase.PPCA
        assert after.j_hat == 1 and after.k == 0
        assert after.t_hats == [14]
        assert state.phase == Phase.DETECT and state.t_hats == []

    def test_star_directions_are_ignored(self, rng):
        state = detect_state()
        params = EngineParams(alpha=4, K=2)
        buffer = new_direction_buffer(rng, 6, 4, 0, 10.0)
        assert detect_or_ppca(state, params, buffer).phase == Phase.DETECT

    def test_below_threshold(self, rng):
        state = detect_state()
        buffer = new_direction_buffer(rng, 6, 4, 3, 0.5)
        assert detect_or_ppca(state, EngineParams(alpha=4, K=2), buffer) is state

    def test_ppca_rounds_grow_star(self, rng):
        params = EngineParams(alpha=4, K=2)
        buffer = new_direction_buffer(rng, 6, 4, 3, math.sqrt(2.0))
        state = detect_or_ppca(detect_state(), params, buffer)

        state = detect_or_ppca(state, params, buffer)
        assert state.phase == Phase.PPCA and state.k == 1
        assert state.P_new.r == 1
        assert np.max(np.abs(state.P_star.data.T @ state.P_new.data)) <= 1e-8

        state = detect_or_ppca(state, params, buffer)
        assert state.phase == Phase.DETECT
        assert state.P_star.r == 2 and state.P_new.is_empty
        assert orthonormality_error(state.P_star.data) <= 1e-8
        assert dif(state.P_star, coordinate_basis(6, [0, 3])) <= 1e-10
        assert state.ranks == [[1, 1]]

    def test_empty_ppca_round_is_counted(self):
        params = EngineParams(alpha=4, K=1)
        state = ReProCSState(
            P_star=coordinate_basis(6, [0]),
            P_new=BasisMatrix.empty(6),
            lambda_train_minus=1.0,
            alpha=4,
            phase=Phase.PPCA,
            j_hat=1,
            t_hats=[4],
            ranks=[[]],
        )
        after = detect_or_ppca(state, params, np.zeros((6, 4)))
        assert after.phase == Phase.DETECT
        assert after.ranks == [[0]]
        assert after.P_star.r == 1

    def test_explicit_threshold(self, rng):
        buffer = new_direction_buffer(rng, 6, 4, 3, math.sqrt(2.0))
        params = EngineParams(alpha=4, K=2, thresh=3.0)
        state = detect_state()
        assert detect_or_ppca(state, params, buffer) is state

    def test_buffer_shape(self):
        with pytest.raises(DimensionMismatchError):
            detect_or_ppca(detect_state(), EngineParams(alpha=4, K=2), np.zeros((6, 3)))


def change_stream(rng, n=10, r0=3, t_max=120, t_change=40, new_index=5):
    P0 = coordinate_basis(n, range(r0))
    L = P0.data @ rng.uniform(-1, 1, size=(r0, t_max))
    L[new_index, t_change:] = 2.0 * rng.choice([-1.0, 1.0], size=t_max - t_change)
    return P0, L


class TestEngineStep:
    def test_static_noiseless_rpca(self, rng):
        P = random_basis(rng, 20, 3)
        engine = ReProCS(EngineParams(alpha=10, K=2, xi=0.1, omega=0.7), P, 1.0)
        for _ in range(50):
            ell = P.data @ rng.uniform(-5, 5, size=3)
            record = engine.step(ell)
            np.testing.assert_allclose(record.l_hat, ell, atol=1e-12)
            np.testing.assert_array_equal(record.x_hat, np.zeros(20))
            np.testing.assert_array_equal(record.l_hat + record.x_hat, ell)
            assert record.phase == "detect" and not record.failed
        assert engine.detections() == []

    def test_mc_empty_support(self, rng):
        P = random_basis(rng, 8, 2)
        engine = ReProCS(EngineParams(alpha=5, K=1), P, 1.0)
        m = rng.standard_normal(8)
        record = engine.step(m, known_support=[])
        np.testing.assert_array_equal(record.l_hat, m)
        assert record.l1_report is None and record.l1_converged is None

    def test_mc_fills_erased_entries(self, rng):
        P = random_basis(rng, 16, 2)
        engine = ReProCS(EngineParams(alpha=5, K=1), P, 1.0)
        ell = P.data @ rng.standard_normal(2)
        m = ell.copy()
        m[[1, 7]] = 0.0
        record = engine.step(m, known_support=[1, 7])
        np.testing.assert_allclose(record.l_hat, ell, atol=1e-10)

    def test_rpca_needs_xi(self, rng):
        engine = ReProCS(EngineParams(alpha=5, K=1), random_basis(rng, 8, 2), 1.0)
        with pytest.raises(ConfigError):
            engine.step(np.ones(8))

    def test_recovery_failure_falls_back(self):
        P = coordinate_basis(4, [0])
        engine = ReProCS(EngineParams(alpha=3, K=1), P, 1.0)
        m = np.array([2.0, 1.0, 0.0, 3.0])
        record = engine.step(m, known_support=[0])
        assert record.failed and "SingularSystemError" in record.error
        np.testing.assert_allclose(record.l_hat, [2.0, 0.0, 0.0, 0.0])
        np.testing.assert_allclose(record.l_hat + record.x_hat, m)

    def test_halt_on_error(self):
        engine = ReProCS(EngineParams(alpha=3, K=1, halt_on_error=True), coordinate_basis(4, [0]), 1.0)
        with pytest.raises(SingularSystemError):
            engine.step(np.ones(4), known_support=[0])

    def test_halt_on_error_leaves_frame_counter(self):
        engine = ReProCS(EngineParams(alpha=3, K=1, halt_on_error=True), coordinate_basis(4, [0]), 1.0)
        t_before = engine.state.t
        with pytest.raises(SingularSystemError):
            engine.step(np.ones(4), known_support=[0])
        assert engine.state.frame == 0 and engine.state.t == t_before
        record = engine.step(np.ones(4), known_support=[1])
        assert record.t == t_before + 1 and engine.state.frame == 1

    def test_frame_length(self, rng):
        engine = ReProCS(EngineParams(alpha=3, K=1), random_basis(rng, 5, 1), 1.0)
        with pytest.raises(DimensionMismatchError):
            engine.step(np.ones(6), known_support=[])

    def test_rejects_non_positive_lambda(self, rng):
        with pytest.raises(ValueError):
            ReProCS(EngineParams(alpha=3, K=1), random_basis(rng, 5, 1), 0.0)

    def test_detects_and_absorbs_change(self, rng):
        P0, L = change_stream(rng)
        engine = ReProCS(EngineParams(alpha=20, K=2), P0, 1.0)
        version = engine.basis_version
        records = [engine.step(L[:, t], known_support=[]) for t in range(L.shape[1])]

        detections = engine.detections()
        assert len(detections) == 1
        assert detections[0].t_hat == 60 and detections[0].ranks == [1, 1]
        assert records[60].phase == "ppca" and records[60].j_hat == 1
        assert records[100].phase == "detect"
        assert engine.basis.r == 4
        assert dif(engine.basis, coordinate_basis(10, [0, 1, 2, 5])) <= 1e-10
        assert engine.basis_version > version

    def test_no_false_detection_without_change(self, rng):
        P = random_basis(rng, 12, 2)
        engine = ReProCS(EngineParams(alpha=25, K=3), P, 1.0)
        for _ in range(10_000):
            engine.step(P.data @ rng.uniform(-5, 5, size=2), known_support=[])
        assert engine.detections() == []
        assert engine.state.frame == 10_000

    def test_t_counts_from_training(self, rng):
        P = random_basis(rng, 6, 1)
        engine = ReProCS(EngineParams(alpha=4, K=1), P, 1.0, t_train=50)
        assert engine.step(np.zeros(6), known_support=[]).t == 51


class TestSnapshots:
    def test_snapshot_is_independent(self, rng):
        P0, L = change_stream(rng)
        engine = ReProCS(EngineParams(alpha=20, K=2), P0, 1.0)
        for t in range(30):
            engine.step(L[:, t], known_support=[])
        snap = engine.snapshot()
        buffer = snap.buffer.copy()
        for t in range(30, 70):
            engine.step(L[:, t], known_support=[])
        np.testing.assert_array_equal(snap.buffer, buffer)
        assert snap.frame == 30 and snap.t_hats == []

    def test_resume_matches_uninterrupted(self, rng):
        P0, L = change_stream(rng)
        params = EngineParams(alpha=20, K=2)
        full = ReProCS(params, P0, 1.0)
        first = ReProCS(params, P0, 1.0)
        for t in range(70):
            full.step(L[:, t], known_support=[])
            first.step(L[:, t], known_support=[])
        resumed = ReProCS.from_state(params, first.snapshot())
        for t in range(70, L.shape[1]):
            a = full.step(L[:, t], known_support=[])
            b = resumed.step(L[:, t], known_support=[])
            np.testing.assert_array_equal(a.l_hat, b.l_hat)
        assert resumed.detections() == full.detections()

    def test_alpha_mismatch(self, rng):
        state = detect_state(alpha=4)
        with pytest.raises(DimensionMismatchError):
            ReProCS.from_state(EngineParams(alpha=5, K=1), state)
