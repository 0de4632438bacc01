"""
Synthetic scenario generators.
Low-rank signals with slowly changing subspaces, moving outlier supports,
outlier magnitudes and the observation streams built from them.
Frames are numbered t = 1..t_max and stored as column t - 1; support indices are 0-based.
"""

import logging
import math
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from ..core.errors import DimensionMismatchError, InfeasibleConfigError
from ..core.linalg import BasisMatrix
from ..models.schemas import OutlierConfig, ScenarioConstants, SignalModelConfig, SupportModelConfig

logger = logging.getLogger(__name__)

# Independent RNG streams per scenario component
STREAM_SIGNAL = 0
STREAM_SUPPORT = 1
STREAM_OUTLIERS = 2
STREAM_INIT = 3

Supports = List[np.ndarray]


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Philox counter-based generator keyed by (seed, stream)"""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, stream])))


def _block(top: int, s: int, n: int) -> np.ndarray:
    block = np.arange(top, min(top + s, n), dtype=np.intp)
    block.setflags(write=False)
    return block


# ==================== SIGNAL MODEL ====================


@dataclass(frozen=True, eq=False)
class SubspaceSegment:
    """P_t = basis for start <= t < next segment's start"""

    start: int
    basis: BasisMatrix


@dataclass(eq=False)
class SignalTruth:
    """Output of gen_signal"""

    L: np.ndarray
    segments: List[SubspaceSegment]
    variances: np.ndarray  # t_max x r_J, row t - 1 holds diag(Lambda_t)
    coefficients: np.ndarray  # r_J x t_max, column t - 1 holds a_t
    basis_full: BasisMatrix


def signal_violations(cfg: SignalModelConfig, alpha: Optional[int] = None, K: Optional[int] = None) -> List[str]:
    """Slow-change and spacing conditions the config breaks"""
    problems = []
    spacing = cfg.spacing()
    d = cfg.d or spacing
    if cfg.change_times:
        if alpha is not None and K is not None and d < (K + 2) * alpha:
            problems.append(f"d={d} < (K+2)alpha={(K + 2) * alpha}")
        if spacing < d:
            problems.append(f"change spacing {spacing} < d={d}")
        for i, (q, v) in enumerate(zip(cfg.q, cfg.v)):
            if q * v**d > 3:
                problems.append(f"new direction {i}: q v^d = {q * v**d:.4g} > 3")
    if cfg.rank_total >= spacing:
        problems.append(f"total rank {cfg.rank_total} >= change spacing {spacing}")
    return problems


def signal_variances(cfg: SignalModelConfig) -> np.ndarray:
    """diag(Lambda_t) for t = 1..t_max as a t_max x r_J array"""
    t = np.arange(1, cfg.t_max + 1)
    variances = np.zeros((cfg.t_max, cfg.rank_total))
    variances[:, : cfg.r0] = cfg.gamma_star**2 / 3
    for column, start, end in cfg.dropout_windows():
        variances[(t >= start) & (t <= end), column] = 0.0
    col = cfg.r0
    for t_j, r_j in zip(cfg.change_times, cfg.r_new):
        after = t >= t_j
        for _ in range(r_j):
            i = col - cfg.r0
            variances[after, col] = cfg.v[i] ** (t[after] - t_j) * cfg.q[i] * cfg.lambda_train_minus
            col += 1
    return variances


def gen_signal(
    cfg: SignalModelConfig, seed: int, alpha: Optional[int] = None, K: Optional[int] = None
) -> SignalTruth:
    """
    Low-rank signal l_t = P_t a_t with subspace changes at the configured times.

    Args:
        cfg: Signal model config
        seed: RNG seed
        alpha, K: Engine window and iteration count, for the d >= (K+2) alpha check

    Returns:
        SignalTruth with L, subspace segments, variances and coefficients
    """
    n, r_total = cfg.n, cfg.rank_total
    if r_total >= n:
        raise InfeasibleConfigError(f"total rank {r_total} must be below n={n}")
    problems = signal_violations(cfg, alpha, K)
    if problems:
        if cfg.compliance:
            raise InfeasibleConfigError("signal config is not compliant: " + "; ".join(problems))
        logger.warning("signal config outside the slow-change model: " + "; ".join(problems))

    rng = make_rng(seed, STREAM_SIGNAL)
    basis_full = BasisMatrix.orthonormalize(rng.standard_normal((n, r_total)))
    if basis_full.r != r_total:
        raise InfeasibleConfigError("random basis came out rank deficient")

    variances = signal_variances(cfg)
    half_widths = np.sqrt(3 * variances)
    half_widths[:, : cfg.r0] = np.where(variances[:, : cfg.r0] > 0, cfg.gamma_star, 0.0)
    coefficients = rng.uniform(-1.0, 1.0, size=(r_total, cfg.t_max)) * half_widths.T
    L = basis_full.data @ coefficients

    segments = [SubspaceSegment(1, BasisMatrix(basis_full.data[:, : cfg.r0]))]
    rank = cfg.r0
    for t_j, r_j in zip(cfg.change_times, cfg.r_new):
        rank += r_j
        segments.append(SubspaceSegment(t_j, BasisMatrix(basis_full.data[:, :rank])))
    return SignalTruth(L=L, segments=segments, variances=variances, coefficients=coefficients, basis_full=basis_full)


def perturbed_basis(P: BasisMatrix, noise: float, rng: np.random.Generator) -> BasisMatrix:
    """orth(P + noise * G) with G standard Gaussian"""
    if noise == 0 or P.is_empty:
        return P
    return BasisMatrix.orthonormalize(P.data + noise * rng.standard_normal(P.data.shape))


# ==================== SUPPORT MODELS ====================


def support_violations(cfg: SupportModelConfig, n: int) -> List[str]:
    """Budget inequalities of the configured support model that fail"""
    problems = []
    alpha = cfg.alpha
    if cfg.variant == "model3":
        if cfg.min_motion > cfg.max_motion:
            problems.append(f"motion bounds empty: ceil(s/rho)={cfg.min_motion} > floor(s/rho2)={cfg.max_motion}")
        if cfg.dwell is not None and cfg.dwell > cfg.beta:
            problems.append(f"dwell {cfg.dwell} > beta={cfg.beta}")
        if alpha is not None:
            if cfg.rho**2 * cfg.beta > 0.01 * alpha:
                problems.append(f"rho^2 beta = {cfg.rho**2 * cfg.beta} > 0.01 alpha = {0.01 * alpha:g}")
            if cfg.max_motion * alpha > n:
                problems.append(f"(s/rho2) alpha = {cfg.max_motion * alpha} > n={n}")
    elif cfg.variant == "bernoulli_gaussian":
        if cfg.q <= 0:
            problems.append("q = 0 keeps the support static")
        if alpha is not None and cfg.s > 1.2 * cfg.rho * n / alpha:
            problems.append(f"s={cfg.s} > 1.2 rho n / alpha = {1.2 * cfg.rho * n / alpha:.4g}")
        limit = cfg.s**2 / (4000 * cfg.rho**2 * math.log(n))
        if cfg.sigma**2 > limit:
            problems.append(f"sigma^2={cfg.sigma**2:.4g} > s^2/(4000 rho^2 log n) = {limit:.4g}")
    elif cfg.variant == "everyframe":
        if alpha is not None:
            if cfg.s > 0.0025 * alpha:
                problems.append(f"s={cfg.s} > 0.0025 alpha = {0.0025 * alpha:g}")
            if cfg.m > (n - cfg.s) / alpha:
                problems.append(f"m={cfg.m} > (n - s)/alpha = {(n - cfg.s) / alpha:.4g}")
    return problems


def _validate_support(cfg: SupportModelConfig, n: int):
    if cfg.s > n:
        raise DimensionMismatchError(f"support size {cfg.s} exceeds n={n}")
    problems = support_violations(cfg, n)
    if problems:
        if cfg.compliance:
            raise InfeasibleConfigError(f"{cfg.variant} support config is not compliant: " + "; ".join(problems))
        logger.warning(f"{cfg.variant} support config outside its model budget: " + "; ".join(problems))


def gen_support_model3(cfg: SupportModelConfig, n: int, t_max: int, seed: int) -> Supports:
    """
    Contiguous block of at most s indices moving down in steps of
    ceil(s/rho)..floor(s/rho2), holding each position for `dwell` frames and
    restarting at the top once it leaves the bottom.
    """
    lo, hi = cfg.min_motion, cfg.max_motion
    if lo > hi:
        raise InfeasibleConfigError(f"motion bounds empty: ceil(s/rho)={lo} > floor(s/rho2)={hi}")
    step = cfg.step or lo
    if not cfg.random_motion and not lo <= step <= hi:
        raise InfeasibleConfigError(f"step {step} outside motion bounds [{lo}, {hi}]")
    _validate_support(cfg, n)

    rng = make_rng(seed, STREAM_SUPPORT)
    dwell = cfg.dwell or cfg.beta
    top = cfg.start % n
    supports: Supports = []
    while len(supports) < t_max:
        stay = int(rng.integers(1, dwell + 1)) if cfg.dwell_jitter else dwell
        supports.extend([_block(top, cfg.s, n)] * stay)
        top += int(rng.integers(lo, hi + 1)) if cfg.random_motion else step
        if top >= n:
            top = 0
    return supports[:t_max]


def gen_support_bernoulli_gaussian(cfg: SupportModelConfig, n: int, t_max: int, seed: int) -> Supports:
    """
    Top index o_t = o_{t-1} + theta_t ceil(1.1 s/rho + w_t), theta_t ~ Bernoulli(q),
    w_t ~ N(0, sigma^2), taken mod n. Negative moves are clipped to zero.
    """
    _validate_support(cfg, n)
    rng = make_rng(seed, STREAM_SUPPORT)
    moves = rng.random(t_max) < cfg.q
    noise = rng.normal(0.0, cfg.sigma, size=t_max) if cfg.sigma > 0 else np.zeros(t_max)
    base = 1.1 * cfg.s / cfg.rho
    o = cfg.start
    supports: Supports = []
    for t in range(t_max):
        if t > 0 and moves[t]:
            o += max(0, math.ceil(base + noise[t]))
        supports.append(_block(o % n, cfg.s, n))
    return supports


def gen_support_everyframe(cfg: SupportModelConfig, n: int, t_max: int, seed: int) -> Supports:
    """Contiguous block moving down by a uniform 1..m indices every frame, wrapping mod n"""
    _validate_support(cfg, n)
    rng = make_rng(seed, STREAM_SUPPORT)
    shifts = rng.integers(1, cfg.m + 1, size=t_max)
    top = cfg.start % n
    supports: Supports = []
    for t in range(t_max):
        supports.append(_block(top, cfg.s, n))
        top = (top + int(shifts[t])) % n
    return supports


SUPPORT_GENERATORS: Dict[str, Callable[[SupportModelConfig, int, int, int], Supports]] = {
    "model3": gen_support_model3,
    "bernoulli_gaussian": gen_support_bernoulli_gaussian,
    "everyframe": gen_support_everyframe,
}


def implied_dwell_bound(q: float, n: int, t_max: int) -> float:
    """Smallest beta with q >= 1 - (n^-10 / (2 t_max))^(1/beta)"""
    if q >= 1:
        return 1.0
    if q <= 0:
        return math.inf
    log_target = -10 * math.log(n) - math.log(2 * t_max)
    return float(math.ceil(log_target / math.log(1 - q)))


def longest_dwell(supports: Sequence[np.ndarray]) -> int:
    """Longest run of consecutive frames sharing one support"""
    best = run = 0
    previous = None
    for T in supports:
        run = run + 1 if previous is not None and np.array_equal(T, previous) else 1
        best = max(best, run)
        previous = T
    return best


# ==================== OUTLIERS / OBSERVATIONS ====================


def gen_outliers(
    supports: Sequence[np.ndarray],
    n: int,
    x_lo: float,
    x_hi: float,
    seed: int,
    random_sign: bool = False,
) -> np.ndarray:
    """
    n x t_max outlier matrix, magnitudes uniform on [x_lo, x_hi] on each support.

    Args:
        supports: Per-frame index arrays
        n: Ambient dimension
        x_lo, x_hi: Magnitude range, 0 < x_lo <= x_hi
        seed: RNG seed
        random_sign: Give each entry an independent random sign
    """
    if x_lo <= 0:
        raise ValueError(f"x_lo must be positive, got {x_lo}")
    if x_hi < x_lo:
        raise ValueError(f"x_hi={x_hi} is below x_lo={x_lo}")
    rng = make_rng(seed, STREAM_OUTLIERS)
    X = np.zeros((n, len(supports)))
    for t, T in enumerate(supports):
        if len(T) == 0:
            continue
        values = rng.uniform(x_lo, x_hi, size=len(T))
        if random_sign:
            values *= rng.choice([-1.0, 1.0], size=len(T))
        X[T, t] = values
    return X


def assemble(L: np.ndarray, supports: Sequence[np.ndarray], mode: str, X: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Observation matrix.
    mc: l_t with the entries in T_t erased (set to zero); rpca: l_t + x_t.
    """
    if L.shape[1] != len(supports):
        raise DimensionMismatchError(f"{len(supports)} supports for {L.shape[1]} frames")
    if mode == "mc":
        M = L.copy()
        for t, T in enumerate(supports):
            M[T, t] = 0.0
        return M
    if mode == "rpca":
        if X is None or X.shape != L.shape:
            raise DimensionMismatchError("rpca observations need an outlier matrix shaped like L")
        return L + X
    raise ValueError(f"unknown mode {mode!r}")


# ==================== SCENARIOS ====================


@dataclass(eq=False)
class ScenarioTruth:
    """Generated ground truth with the configs that produced it"""

    signal_config: SignalModelConfig
    support_config: SupportModelConfig
    outlier_config: OutlierConfig
    mode: str
    seed: int
    L: np.ndarray
    M: np.ndarray
    X: Optional[np.ndarray]
    supports: Supports
    segments: List[SubspaceSegment]
    variances: np.ndarray
    coefficients: Optional[np.ndarray] = None

    @property
    def n(self) -> int:
        return self.L.shape[0]

    @property
    def t_max(self) -> int:
        return self.L.shape[1]

    @property
    def change_times(self) -> List[int]:
        return list(self.signal_config.change_times)

    @property
    def P0(self) -> BasisMatrix:
        return self.segments[0].basis

    @property
    def basis_full(self) -> BasisMatrix:
        return self.segments[-1].basis

    def new_bases(self) -> List[BasisMatrix]:
        """P_{(j),new} for every change j"""
        return [
            BasisMatrix(after.basis.data[:, before.basis.r :])
            for before, after in zip(self.segments, self.segments[1:])
        ]

    def segment_index(self, t: int) -> int:
        index = 0
        for i, segment in enumerate(self.segments):
            if segment.start <= t:
                index = i
        return index

    def basis_at(self, t: int) -> BasisMatrix:
        """P_t"""
        return self.segments[self.segment_index(t)].basis


def generate_scenario(
    signal: SignalModelConfig,
    support: SupportModelConfig,
    outliers: OutlierConfig,
    mode: str,
    seed: int,
    alpha: Optional[int] = None,
    K: Optional[int] = None,
) -> ScenarioTruth:
    """
    Full scenario: signal, supports after the clean training frames, outliers (rpca) and observations.
    """
    if mode not in ("mc", "rpca"):
        raise ValueError(f"unknown mode {mode!r}")
    truth = gen_signal(signal, seed, alpha, K)
    n = signal.n
    generator = SUPPORT_GENERATORS[support.variant]
    tail = generator(support, n, signal.t_max - signal.t_train, seed)
    empty = np.zeros(0, dtype=np.intp)
    empty.setflags(write=False)
    supports = [empty] * signal.t_train + tail

    X = None
    if mode == "rpca":
        X = gen_outliers(supports, n, outliers.x_lo, outliers.x_hi, seed, outliers.random_sign)
    M = assemble(truth.L, supports, mode, X)
    return ScenarioTruth(
        signal_config=signal,
        support_config=support,
        outlier_config=outliers,
        mode=mode,
        seed=seed,
        L=truth.L,
        M=M,
        X=X,
        supports=supports,
        segments=truth.segments,
        variances=truth.variances,
        coefficients=truth.coefficients,
    )


def scenario_constants(truth: ScenarioTruth, d: Optional[int] = None) -> ScenarioConstants:
    """Scalar constants of a scenario for parameter formulas and checks"""
    cfg = truth.signal_config
    d = d or cfg.d or cfg.spacing()
    coefficients = truth.coefficients
    if coefficients is None:
        coefficients = truth.basis_full.data.T @ truth.L
    gamma = float(np.max(np.abs(coefficients))) if coefficients.size else 0.0

    gamma_new = 0.0
    col = cfg.r0
    for t_j, r_j in zip(cfg.change_times, cfg.r_new):
        window = coefficients[col : col + r_j, t_j - 1 : min(t_j - 1 + d, truth.t_max)]
        if window.size:
            gamma_new = max(gamma_new, float(np.max(np.abs(window))))
        col += r_j

    x_min = None
    if truth.X is not None and np.any(truth.X):
        x_min = float(np.min(np.abs(truth.X[truth.X != 0])))
    return ScenarioConstants(
        n=truth.n,
        r0=cfg.r0,
        r_new=max(cfg.r_new, default=0),
        J=len(cfg.change_times),
        lambda_train_minus=cfg.lambda_train_minus,
        lambda_plus=float(np.max(truth.variances)) if truth.variances.size else 0.0,
        gamma=gamma,
        gamma_new=gamma_new,
        s=max((len(T) for T in truth.supports), default=0),
        x_min=x_min,
    )
