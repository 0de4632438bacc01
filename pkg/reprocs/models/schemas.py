"""
Pydantic schemas for reprocs configs, reports and metric rows
"""

import math
from typing import Annotated, Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, BeforeValidator, ConfigDict, Field, computed_field, model_validator


def _split_commas(value):
    """Accept "1, 2, 3" from config files as well as real lists"""
    if isinstance(value, str):
        return [item.strip() for item in value.split(",") if item.strip()]
    if isinstance(value, (int, float)):
        return [value]
    return value


IntList = Annotated[List[int], BeforeValidator(_split_commas)]
FloatList = Annotated[List[float], BeforeValidator(_split_commas)]
StrList = Annotated[List[str], BeforeValidator(_split_commas)]


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


# ==================== SOLVER / ENGINE MODELS ====================


class L1SolveOptions(_Strict):
    """Schema for the constrained l1 solver options"""

    method: Literal["homotopy", "proximal"] = Field(
        "homotopy", description="homotopy: exact lasso path; proximal: FISTA with root finding on the penalty"
    )
    max_iters: int = Field(10_000, ge=1, description="Path steps (homotopy) or total inner iterations (proximal)")
    feas_tol: float = Field(1e-6, gt=0, description="Relative slack on the residual constraint")
    opt_tol: float = Field(1e-6, gt=0, description="Relative l1 suboptimality certified by the dual bound")


class EngineParams(_Strict):
    """Schema for the resolved engine parameters"""

    alpha: int = Field(..., ge=1, description="Window length in frames")
    K: int = Field(..., ge=1, description="Projection-PCA iterations per detected change")
    xi: Optional[float] = Field(None, ge=0, description="l1 residual bound (RPCA only)")
    omega: Optional[float] = Field(None, gt=0, description="Support threshold (RPCA only)")
    thresh: Optional[float] = Field(None, gt=0, description="Detection threshold; lambda_train_minus / 2 when unset")
    l1: L1SolveOptions = Field(default_factory=L1SolveOptions)
    halt_on_error: bool = Field(False, description="Raise recovery errors instead of recording them")


class TheoremParams(_Strict):
    """Schema for theorem-prescribed parameters and the constants behind them"""

    engine: EngineParams
    zeta: float
    zeta_bound: float
    c_add: float
    alpha_real: float = Field(..., description="Unrounded C_add * (log(6(K+1)J) + 11 log n)")


# ==================== SCENARIO MODELS ====================


class SignalModelConfig(_Strict):
    """Schema for the low-rank signal model"""

    n: int = Field(..., ge=2, description="Ambient dimension")
    t_max: int = Field(..., ge=1, description="Last frame index")
    t_train: int = Field(0, ge=0, description="Number of clean training frames")
    r0: int = Field(..., ge=0, description="Initial subspace rank")
    change_times: IntList = Field(default_factory=list, description="Ascending subspace change frames t_j")
    r_new: IntList = Field(default_factory=list, description="New directions per change (one value is broadcast)")
    q: FloatList = Field(default_factory=lambda: [1.0], description="Initial variance factors q_i >= 1")
    v: FloatList = Field(default_factory=lambda: [1.00017], description="Variance growth rates v_i >= 1")
    lambda_train_minus: float = Field(1.0, gt=0, description="Minimum training eigenvalue scale")
    gamma_star: float = Field(5.0, gt=0, description="Existing-direction coefficients are uniform on [-gamma, gamma]")
    star_dropout: StrList = Field(
        default_factory=list, description="column:start:end triples zeroing an existing direction over frames"
    )
    compliance: bool = Field(False, description="Turn slow-change violations into errors")
    d: Optional[int] = Field(None, ge=1, description="Slow-change horizon; defaults to the smallest change spacing")

    @model_validator(mode="after")
    def _broadcast(self):
        J = len(self.change_times)
        if any(b <= a for a, b in zip(self.change_times, self.change_times[1:])):
            raise ValueError("change_times must be strictly ascending")
        if J and (self.change_times[0] <= self.t_train or self.change_times[-1] > self.t_max):
            raise ValueError("change_times must lie in (t_train, t_max]")
        if self.t_train > self.t_max:
            raise ValueError("t_train exceeds t_max")
        if len(self.r_new) == 1 and J > 1:
            self.r_new = self.r_new * J
        if J == 0:
            self.r_new = []
        if len(self.r_new) != J:
            raise ValueError(f"r_new has {len(self.r_new)} entries for {J} change times")
        if any(r < 1 for r in self.r_new):
            raise ValueError("every change must add at least one direction")
        total = sum(self.r_new)
        for name in ("q", "v"):
            values = getattr(self, name)
            if len(values) == 1:
                setattr(self, name, values * total)
            elif len(values) != total:
                raise ValueError(f"{name} needs 1 or {total} entries, got {len(values)}")
        if any(q < 1 for q in self.q):
            raise ValueError("q_i must be >= 1")
        if any(v < 1 for v in self.v):
            raise ValueError("v_i must be >= 1")
        self.dropout_windows()
        return self

    @property
    def rank_total(self) -> int:
        return self.r0 + sum(self.r_new)

    def dropout_windows(self) -> List[Tuple[int, int, int]]:
        """Parsed star_dropout triples (column, first frame, last frame)"""
        windows = []
        for item in self.star_dropout:
            parts = item.split(":")
            if len(parts) != 3:
                raise ValueError(f"star_dropout entry {item!r} is not column:start:end")
            column, start, end = (int(p) for p in parts)
            if not 0 <= column < self.r0 or start > end:
                raise ValueError(f"star_dropout entry {item!r} is out of range")
            windows.append((column, start, end))
        return windows

    def spacing(self) -> int:
        """min_j (t_{j+1} - t_j) with t_{J+1} = t_max + 1"""
        times = list(self.change_times) + [self.t_max + 1]
        if not self.change_times:
            return self.t_max + 1 - self.t_train
        return min(b - a for a, b in zip(times, times[1:]))


class SupportModelConfig(_Strict):
    """Schema for the outlier / erasure support model"""

    variant: Literal["model3", "bernoulli_gaussian", "everyframe"] = "model3"
    s: int = Field(..., ge=1, description="Maximum support size")
    rho: int = Field(2, ge=1, description="Displacement divisor")
    rho2: Optional[float] = Field(None, gt=0, description="Maximum-motion divisor; motion capped at ceil(s/rho) when unset")
    beta: int = Field(18, ge=1, description="Maximum dwell")
    alpha: Optional[int] = Field(None, ge=1, description="Window length; taken from the engine when unset")
    dwell: Optional[int] = Field(None, ge=1, description="Frames per support position (model3); beta when unset")
    dwell_jitter: bool = Field(False, description="Draw each dwell uniformly in [1, dwell]")
    step: Optional[int] = Field(None, ge=1, description="Motion per change (model3); ceil(s/rho) when unset")
    random_motion: bool = Field(False, description="Draw each motion uniformly between the motion bounds")
    start: int = Field(0, ge=0, description="Initial top index")
    q: float = Field(1.0, ge=0, le=1, description="Move probability (bernoulli_gaussian)")
    sigma: float = Field(0.0, ge=0, description="Motion noise std (bernoulli_gaussian)")
    m: int = Field(1, ge=1, description="Maximum per-frame shift (everyframe)")
    compliance: bool = Field(False, description="Turn model-budget violations into errors")

    @property
    def min_motion(self) -> int:
        return math.ceil(self.s / self.rho)

    @property
    def max_motion(self) -> int:
        if self.rho2 is None:
            return self.min_motion
        return math.floor(self.s / self.rho2)


class OutlierConfig(_Strict):
    """Schema for outlier magnitudes"""

    x_lo: float = Field(2.0, gt=0, description="Smallest outlier magnitude")
    x_hi: float = Field(6.0, gt=0, description="Largest outlier magnitude")
    random_sign: bool = Field(False, description="Give every outlier an independent random sign")

    @model_validator(mode="after")
    def _ordered(self):
        if self.x_hi < self.x_lo:
            raise ValueError("x_hi must be >= x_lo")
        return self


class InitConfig(_Strict):
    """Schema for engine initialization"""

    mode: Literal["perturbed", "train"] = Field(
        "perturbed", description="perturbed: P0 plus Gaussian noise; train: estimate from the training frames"
    )
    noise: float = Field(1e-4, ge=0, description="Entry std of the perturbation added to P0")
    rank_rule: Literal["nonzero_eig", "fixed_rank", "energy_fraction"] = "nonzero_eig"
    r0: Optional[int] = Field(None, ge=1, description="Rank kept by the fixed_rank rule")
    energy: float = Field(0.99, gt=0, le=1, description="Energy fraction kept by the energy_fraction rule")


class EngineConfig(_Strict):
    """Schema for the [engine] section; unset values are derived from zeta"""

    alpha: Optional[int] = Field(None, ge=1)
    K: Optional[int] = Field(None, ge=1)
    xi: Optional[float] = Field(None, ge=0)
    omega: Optional[float] = Field(None, gt=0)
    thresh: Optional[float] = Field(None, gt=0)
    zeta: Optional[float] = Field(None, gt=0, description="Accuracy level for theorem-derived parameters")
    halt_on_error: bool = False


class ExperimentConfig(_Strict):
    """Schema for a complete experiment"""

    mode: Literal["mc", "rpca"] = "rpca"
    trials: int = Field(1, ge=1)
    base_seed: int = Field(0, ge=0, description="Trial i uses seed base_seed + i")
    output_dir: str = "results"
    cadence: int = Field(1, ge=1, description="Metrics are written for frames with t % cadence == 0")
    jobs: int = Field(1, ge=1, description="Parallel trial workers")
    strict_assumptions: bool = False
    plot: bool = Field(False, description="Write errors.svg after an ensemble")
    oracle: bool = Field(False, description="Compute the batch-SVD reference curve")
    signal: SignalModelConfig
    support: SupportModelConfig
    outliers: OutlierConfig = Field(default_factory=OutlierConfig)
    engine: EngineConfig = Field(default_factory=EngineConfig)
    l1: L1SolveOptions = Field(default_factory=L1SolveOptions)
    init: InitConfig = Field(default_factory=InitConfig)
    tolerances: Dict[str, float] = Field(default_factory=dict)

    @model_validator(mode="after")
    def _consistent(self):
        if self.support.alpha is None and self.engine.alpha is not None:
            self.support.alpha = self.engine.alpha
        if self.support.s > self.signal.n:
            raise ValueError("support size s exceeds n")
        if self.engine.alpha is None or self.engine.K is None:
            if self.engine.zeta is None:
                raise ValueError("engine alpha and K must be set, or zeta given to derive them")
        if self.mode == "rpca" and (self.engine.xi is None or self.engine.omega is None):
            if self.engine.zeta is None:
                raise ValueError("rpca mode needs engine xi and omega, or zeta to derive them")
        if self.init.mode == "train" and self.signal.t_train < 1:
            raise ValueError("train initialization needs t_train >= 1")
        return self


# ==================== REPORT MODELS ====================


class AssumptionCheck(BaseModel):
    """Schema for one assumption check"""

    name: str
    passed: Optional[bool] = None
    measured: float
    bound: float
    condition: str
    details: Dict[str, float] = Field(default_factory=dict)


class AssumptionReport(BaseModel):
    """Schema for the full assumption report"""

    mode: Literal["strict", "advisory"] = "strict"
    checks: List[AssumptionCheck] = Field(default_factory=list)

    @computed_field
    @property
    def overall_pass(self) -> Optional[bool]:
        if self.mode == "advisory":
            return None
        return all(bool(check.passed) for check in self.checks)

    def get(self, name: str) -> Optional[AssumptionCheck]:
        for check in self.checks:
            if check.name == name:
                return check
        return None


class BlockBandedCheck(BaseModel):
    """Schema for the block-banded norm bound comparison"""

    measured: float
    bound: float
    passed: bool


# ==================== METRIC MODELS ====================


class MetricsFrame(BaseModel):
    """Schema for one row of per-frame metrics"""

    t: int
    rel_error: float = Field(..., ge=0)
    se: float = Field(..., ge=0, le=1)
    precision: Optional[float] = None
    recall: Optional[float] = None
    phase: str
    j_hat: int
    k: int
    l1_converged: Optional[bool] = None
    failed: bool = False


class OracleFrame(BaseModel):
    """Schema for one row of the batch-SVD reference curve"""

    t: int
    rel_error: float = Field(..., ge=0)
    se: float = Field(..., ge=0, le=1)


class DetectionEvent(BaseModel):
    """Schema for one detected subspace change"""

    j: int
    t_hat: int
    ranks: List[int] = Field(default_factory=list)


class TrialSummary(BaseModel):
    """Schema for per-trial statistics"""

    trial: int
    seed: int
    alpha: Optional[int] = Field(None, description="Window length the engine ran with")
    failed: bool = False
    error: Optional[str] = None
    frames: int = 0
    l1_failures: int = 0
    recovery_errors: int = 0
    exact_support: Optional[bool] = None
    detections: List[DetectionEvent] = Field(default_factory=list)
    detection_delays: List[Optional[int]] = Field(default_factory=list)
    false_detections: int = 0
    ranks_correct: Optional[bool] = None
    se_window_means: List[List[float]] = Field(default_factory=list)
    se_monotone: Optional[bool] = None
    settled_errors: List[Optional[float]] = Field(default_factory=list)
    assumptions_passed: Optional[bool] = None
    runtime_seconds: float = 0.0


class EnsembleSummary(BaseModel):
    """Schema for aggregate ensemble statistics"""

    trials: int
    failed_trials: int
    exact_support_rate: Optional[float] = None
    detection_in_bound_rate: Optional[float] = None
    rank_correct_rate: Optional[float] = None
    se_monotone_rate: Optional[float] = None
    false_detections: int = 0
    delay_histogram: Dict[str, int] = Field(default_factory=dict)
    settled_error_mean: List[Optional[float]] = Field(default_factory=list)


# ==================== SCENARIO CONSTANTS ====================


class ScenarioConstants(BaseModel):
    """Schema for the scalar constants of a scenario that parameter formulas need"""

    n: int
    r0: int
    r_new: int = Field(..., description="Largest number of directions added by one change")
    J: int
    lambda_train_minus: float
    lambda_plus: float = Field(..., description="Largest coefficient variance over all frames")
    gamma: float = Field(..., description="Largest |a_t| entry over all frames")
    gamma_new: float = Field(..., description="Largest new-direction |a_t| entry within d frames of a change")
    s: int = 0
    x_min: Optional[float] = None

    @property
    def r(self) -> int:
        return self.r0 + self.J * self.r_new
