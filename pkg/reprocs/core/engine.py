"""
ReProCS engine - the online state machine.
Per-frame recovery against the current subspace estimate, alpha-periodic
detection of subspace changes and K rounds of projection-PCA per change.
"""

import copy
import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterable, List, Literal, Optional, Tuple

import numpy as np

from ..models.schemas import DetectionEvent, EngineParams, ScenarioConstants, TheoremParams
from .errors import (
    ConfigError,
    DimensionMismatchError,
    InfeasibleConfigError,
    ReprocsError,
    TrainingDataError,
    ZetaRangeError,
)
from .linalg import BasisMatrix, eigensplit_from_data, thin_svd
from .settings import get_tolerances
from .sparse import FrameEstimate, L1SolveReport, ProjectedOperator, recover_frame, recover_frame_mc

logger = logging.getLogger(__name__)

RankRule = Literal["nonzero_eig", "fixed_rank", "energy_fraction"]


class Phase(str, Enum):
    DETECT = "detect"
    PPCA = "ppca"


# ==================== STATE ====================


@dataclass(eq=False)
class ReProCSState:
    """
    Everything the engine carries between frames.
    frame counts processed frames after t_train; t = t_train + frame.
    """

    P_star: BasisMatrix
    P_new: BasisMatrix
    lambda_train_minus: float
    alpha: int
    t_train: int = 0
    phase: Phase = Phase.DETECT
    j_hat: int = 0
    k: int = 0
    frame: int = 0
    t_hats: List[int] = field(default_factory=list)
    ranks: List[List[int]] = field(default_factory=list)
    buffer: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.P_new.n != self.P_star.n:
            raise DimensionMismatchError("P_star and P_new disagree on n")
        if self.buffer is None:
            self.buffer = np.zeros((self.P_star.n, self.alpha))
        if self.buffer.shape != (self.P_star.n, self.alpha):
            raise DimensionMismatchError(f"buffer must be {self.P_star.n} x {self.alpha}")

    @property
    def n(self) -> int:
        return self.P_star.n

    @property
    def t(self) -> int:
        return self.t_train + self.frame

    @property
    def basis(self) -> BasisMatrix:
        """[P_star P_new]"""
        if self.P_new.is_empty:
            return self.P_star
        return self.P_star.hstack(self.P_new)

    def copy(self) -> "ReProCSState":
        return replace(
            self,
            t_hats=list(self.t_hats),
            ranks=copy.deepcopy(self.ranks),
            buffer=self.buffer.copy(),
        )


@dataclass(eq=False)
class RecoveryRecord:
    """Per-frame engine output"""

    t: int
    l_hat: np.ndarray
    x_hat: np.ndarray
    support: np.ndarray
    phase: str
    j_hat: int
    k: int
    l1_report: Optional[L1SolveReport] = None
    error: Optional[str] = None

    @property
    def failed(self) -> bool:
        return self.error is not None

    @property
    def l1_converged(self) -> Optional[bool]:
        return None if self.l1_report is None else self.l1_report.converged


# ==================== TRAINING ====================


def train_init(
    M_train: np.ndarray,
    rank_rule: RankRule = "nonzero_eig",
    r0: Optional[int] = None,
    energy: float = 0.99,
) -> Tuple[BasisMatrix, float]:
    """
    Initial subspace estimate from the training frames.

    Args:
        M_train: n x t_train matrix of clean training frames
        rank_rule: nonzero_eig keeps eigenvalues above rank_cutoff * lambda_max,
                   fixed_rank keeps the top r0, energy_fraction the fewest capturing `energy`
        r0: Rank for fixed_rank
        energy: Fraction for energy_fraction

    Returns:
        (P_train, lambda_train_minus), the latter being the smallest kept eigenvalue
        of (1/t_train) sum m_t m_t^T
    """
    M = np.asarray(M_train, dtype=float)
    if M.ndim != 2 or M.shape[1] < 1:
        raise DimensionMismatchError(f"training data must be n x t_train with t_train >= 1, got {M.shape}")
    if not np.any(M):
        raise TrainingDataError("training data is all zero")
    U, sv, _ = thin_svd(M)
    eig = sv**2 / M.shape[1]

    if rank_rule == "nonzero_eig":
        keep = int(np.count_nonzero(eig > get_tolerances().rank_cutoff * eig[0]))
    elif rank_rule == "fixed_rank":
        if r0 is None or not 1 <= r0 <= eig.size:
            raise TrainingDataError(f"fixed_rank needs 1 <= r0 <= {eig.size}, got {r0}")
        if eig[r0 - 1] <= 0:
            raise TrainingDataError(f"training data has rank below r0={r0}")
        keep = r0
    elif rank_rule == "energy_fraction":
        if not 0 < energy <= 1:
            raise ValueError(f"energy fraction must be in (0, 1], got {energy}")
        captured = np.cumsum(eig) / np.sum(eig)
        keep = int(np.searchsorted(captured, energy - 1e-12)) + 1
    else:
        raise ValueError(f"unknown rank rule {rank_rule!r}")

    basis = BasisMatrix(U[:, :keep])
    return basis, float(eig[keep - 1])


# ==================== THEOREM PARAMETERS ====================


def zeta_bound(c: ScenarioConstants) -> float:
    """Largest zeta the theorem allows for these constants"""
    r = c.r
    return min(
        1e-4 / r**2,
        0.03 * c.lambda_train_minus / (r**2 * c.lambda_plus),
        1 / (r**3 * c.gamma**2),
        c.lambda_train_minus / (r**3 * c.gamma**2),
    )


def theorem_params(constants: ScenarioConstants, zeta: float) -> TheoremParams:
    """
    K, alpha, xi, omega and thresh exactly as the correctness theorem prescribes.

    K = ceil(log(0.16 r_new zeta) / log 0.83), alpha = ceil(C_add (log(6(K+1)J) + 11 log n)),
    xi = sqrt(r_new) gamma_new + (sqrt(r) + sqrt(r_new)) sqrt(zeta), omega = 7 xi.
    """
    c = constants
    if c.J < 1 or c.r_new < 1:
        raise InfeasibleConfigError("theorem parameters need at least one subspace change")
    if zeta <= 0:
        raise ZetaRangeError(f"zeta must be positive, got {zeta}")
    bound = zeta_bound(c)
    if zeta > bound:
        raise ZetaRangeError(f"zeta={zeta:.3e} exceeds the allowed bound {bound:.3e}")

    K = max(1, math.ceil(math.log(0.16 * c.r_new * zeta) / math.log(0.83)))
    growth = 1.2 * (math.sqrt(zeta) + math.sqrt(c.r_new) * c.gamma_new) ** 4
    c_add = 32 * 100**2 * max(16.0, growth) / (c.r_new * zeta * c.lambda_train_minus) ** 2
    alpha_real = c_add * (math.log(6 * (K + 1) * c.J) + 11 * math.log(c.n))
    xi = math.sqrt(c.r_new) * c.gamma_new + (math.sqrt(c.r) + math.sqrt(c.r_new)) * math.sqrt(zeta)
    engine = EngineParams(
        alpha=math.ceil(alpha_real),
        K=K,
        xi=xi,
        omega=7 * xi,
        thresh=c.lambda_train_minus / 2,
    )
    return TheoremParams(engine=engine, zeta=zeta, zeta_bound=bound, c_add=c_add, alpha_real=alpha_real)


# ==================== DETECTION / PROJECTION-PCA ====================


def detect_or_ppca(state: ReProCSState, params: EngineParams, buffer: Optional[np.ndarray] = None) -> ReProCSState:
    """
    Window-boundary update.

    D_u = (I - P_star P_star^T) [buffered l_hat]. In detect phase a change is
    declared when lambda_max((1/alpha) D_u D_u^T) >= thresh. In ppca phase the
    new-direction estimate is replaced by the eigenvectors at or above thresh;
    after the K-th round they are appended to P_star.

    Returns:
        A new state; the input state is not modified
    """
    buffer = state.buffer if buffer is None else buffer
    if buffer.shape != (state.n, params.alpha):
        raise DimensionMismatchError(f"buffer must hold exactly alpha={params.alpha} frames of length {state.n}")
    thresh = params.thresh if params.thresh is not None else state.lambda_train_minus / 2
    D = state.P_star.project_out(buffer)
    split = eigensplit_from_data(D, params.alpha, thresh)
    logger.debug(f"t={state.t}: projected window lambda_max={split.lambda_max:.4g} (thresh {thresh:.4g})")

    if state.phase == Phase.DETECT:
        if split.rank == 0:
            return state
        t_hats = state.t_hats + [state.t]
        ranks = copy.deepcopy(state.ranks) + [[]]
        logger.info(f"t={state.t}: subspace change {state.j_hat + 1} detected (lambda_max={split.lambda_max:.4g})")
        return replace(state, phase=Phase.PPCA, j_hat=state.j_hat + 1, k=0, t_hats=t_hats, ranks=ranks)

    P_new = split.basis
    if not P_new.is_empty:
        # re-orthogonalize against P_star so [P_star P_new] stays a basis
        P_new = BasisMatrix.orthonormalize(P_new.data, against=state.P_star)
    k = state.k + 1
    ranks = copy.deepcopy(state.ranks)
    ranks[-1].append(P_new.r)
    if P_new.is_empty:
        logger.warning(f"t={state.t}: projection-PCA round {k} of change {state.j_hat} found no direction")
    if k < params.K:
        return replace(state, P_new=P_new, k=k, ranks=ranks)

    P_star = state.P_star.hstack(P_new) if not P_new.is_empty else state.P_star
    logger.info(f"t={state.t}: change {state.j_hat} absorbed, subspace rank now {P_star.r}")
    return replace(
        state,
        P_star=P_star,
        P_new=BasisMatrix.empty(state.n),
        phase=Phase.DETECT,
        k=k,
        ranks=ranks,
    )


# ==================== ENGINE ====================


class ReProCS:
    """
    Streaming ReProCS engine.
    One instance per stream; call step() once per frame, in order.
    """

    def __init__(
        self,
        params: EngineParams,
        P_init: BasisMatrix,
        lambda_train_minus: float,
        t_train: int = 0,
        state: Optional[ReProCSState] = None,
    ):
        """
        Initialize the engine.

        Args:
            params: Resolved engine parameters
            P_init: Initial subspace estimate
            lambda_train_minus: Training eigenvalue scale (sets the default detection threshold)
            t_train: Index of the last training frame
            state: Resume from this state instead of a fresh one
        """
        if lambda_train_minus <= 0:
            raise ValueError(f"lambda_train_minus must be positive, got {lambda_train_minus}")
        if state is not None and state.alpha != params.alpha:
            raise DimensionMismatchError(f"state buffer holds {state.alpha} frames, params say alpha={params.alpha}")
        self.params = params
        self.state = state or ReProCSState(
            P_star=P_init,
            P_new=BasisMatrix.empty(P_init.n),
            lambda_train_minus=lambda_train_minus,
            alpha=params.alpha,
            t_train=t_train,
        )
        self.basis_version = 0
        self._refresh_operator()

    @classmethod
    def from_state(cls, params: EngineParams, state: ReProCSState) -> "ReProCS":
        return cls(params, state.P_star, state.lambda_train_minus, state.t_train, state=state)

    @property
    def n(self) -> int:
        return self.state.n

    @property
    def thresh(self) -> float:
        if self.params.thresh is not None:
            return self.params.thresh
        return self.state.lambda_train_minus / 2

    @property
    def basis(self) -> BasisMatrix:
        """Current estimate [P_star P_new]"""
        return self._operator.basis

    def _refresh_operator(self):
        self._operator = ProjectedOperator(self.state.basis)
        self.basis_version += 1

    def snapshot(self) -> ReProCSState:
        """Independent copy of the current state"""
        return self.state.copy()

    def detections(self) -> List[DetectionEvent]:
        return [
            DetectionEvent(j=j + 1, t_hat=t_hat, ranks=list(self.state.ranks[j]))
            for j, t_hat in enumerate(self.state.t_hats)
        ]

    def _estimate(self, m: np.ndarray, known_support: Optional[Iterable[int]]) -> FrameEstimate:
        if known_support is not None:
            return recover_frame_mc(self._operator, m, known_support)
        if self.params.xi is None or self.params.omega is None:
            raise ConfigError("robust-PCA frames need xi and omega")
        return recover_frame(self._operator, m, self.params.xi, self.params.omega, self.params.l1)

    def step(self, m: np.ndarray, known_support: Optional[Iterable[int]] = None) -> RecoveryRecord:
        """
        Process one frame.

        Args:
            m: Observation m_t
            known_support: Erased entries (matrix completion); None for robust PCA

        Returns:
            RecoveryRecord for frame t
        """
        m = np.asarray(m, dtype=float).ravel()
        if m.size != self.n:
            raise DimensionMismatchError(f"frame has length {m.size}, expected {self.n}")
        state = self.state
        frame = state.frame + 1
        t = state.t + 1
        phase, j_hat, k = state.phase.value, state.j_hat, state.k

        error = None
        try:
            estimate = self._estimate(m, known_support)
        except ConfigError:
            raise
        except ReprocsError as e:
            if self.params.halt_on_error:
                raise
            error = f"{type(e).__name__}: {e}"
            logger.warning(f"t={t}: recovery failed, falling back to projection ({error})")
            l_hat = self.basis.project(m)
            estimate = FrameEstimate(x_hat=m - l_hat, l_hat=l_hat, support=np.zeros(0, dtype=np.intp))

        # the frame counter only advances once the frame is committed
        state.frame = frame
        state.buffer[:, (frame - 1) % self.params.alpha] = estimate.l_hat
        record = RecoveryRecord(
            t=t,
            l_hat=estimate.l_hat,
            x_hat=estimate.x_hat,
            support=estimate.support,
            phase=phase,
            j_hat=j_hat,
            k=k,
            l1_report=estimate.report,
            error=error,
        )

        if state.frame % self.params.alpha == 0:
            updated = detect_or_ppca(state, self.params)
            if updated is not state:
                changed = updated.P_star is not state.P_star or updated.P_new is not state.P_new
                self.state = updated
                if changed:
                    self._refresh_operator()
        return record
