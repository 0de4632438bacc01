"""
Assumption checker.
Measures a scenario against the conditions of the correctness guarantee and
reports measured value, required bound and pass/fail per condition.
Supports passed to the support checks start after the training frames.
"""

import logging
import math
from dataclasses import dataclass
from typing import Dict, FrozenSet, List, Optional, Sequence

import numpy as np
from scipy import linalg as sla

from ..core.engine import zeta_bound
from ..core.errors import DimensionMismatchError, SupportModelViolation
from ..core.linalg import BasisMatrix, KappaMode, dif, incoherence, kappa_s
from ..models.schemas import (
    AssumptionCheck,
    AssumptionReport,
    BlockBandedCheck,
    EngineParams,
    ScenarioConstants,
    SupportModelConfig,
)
from .generators import ScenarioTruth, scenario_constants, support_violations

logger = logging.getLogger(__name__)


# ==================== SUPPORT RUNS ====================


@dataclass(frozen=True)
class SupportRun:
    """Frames start..stop-1 (0-based) share one support set"""

    start: int
    stop: int
    indices: FrozenSet[int]

    @property
    def dwell(self) -> int:
        return self.stop - self.start


def support_runs(supports: Sequence[np.ndarray]) -> List[SupportRun]:
    """Split a support sequence into its maximal constant runs"""
    runs: List[SupportRun] = []
    start = 0
    current: Optional[FrozenSet[int]] = None
    for t, T in enumerate(supports):
        indices = frozenset(int(i) for i in T)
        if current is not None and indices != current:
            runs.append(SupportRun(start, t, current))
            start = t
        current = indices
    if current is not None:
        runs.append(SupportRun(start, len(supports), current))
    return runs


def _leaving_sets(runs: Sequence[SupportRun]) -> List[FrozenSet[int]]:
    """T^[k] minus T^[k+1] for every k with a successor"""
    return [a.indices - b.indices for a, b in zip(runs, runs[1:])]


# ==================== SUPPORT MODEL ====================


def check_support_model(
    supports: Sequence[np.ndarray],
    s: int,
    rho: int,
    beta: int,
    alpha: Optional[int] = None,
    n: Optional[int] = None,
    strict_dwell: bool = True,
) -> AssumptionCheck:
    """
    Structural conditions of the moving-support model.

    1. every support holds for fewer than beta frames (at most beta with
       strict_dwell=False) and has at most s indices. With beta = 1 a dwell of
       one frame passes, since the support then changes every frame;
    2. T^[k] and T^[k+rho] are disjoint;
    3. (needs alpha and n) the leaving sets T^[i] minus T^[i+1] over any alpha
       consecutive changes sum to at most n, and the leaving set of change k
       is disjoint from those of the next alpha changes.
    """
    runs = support_runs(supports)
    max_dwell = max((run.dwell for run in runs), default=0)
    max_size = max((len(run.indices) for run in runs), default=0)
    if strict_dwell:
        dwell_ok = max_dwell < beta or max_dwell == beta == 1
    else:
        dwell_ok = max_dwell <= beta

    overlaps = sum(1 for a, b in zip(runs, runs[rho:]) if a.indices & b.indices)

    details: Dict[str, float] = {
        "max_size": float(max_size),
        "s": float(s),
        "changes": float(max(len(runs) - 1, 0)),
        "rho_overlaps": float(overlaps),
    }
    passed = dwell_ok and max_size <= s and overlaps == 0

    if alpha is not None and n is not None:
        leaving = _leaving_sets(runs)
        sizes = np.array([len(D) for D in leaving], dtype=float)
        window_max = 0.0
        if sizes.size:
            cumulative = np.concatenate([[0.0], np.cumsum(sizes)])
            width = min(alpha, sizes.size)
            window_max = float(np.max(cumulative[width:] - cumulative[:-width]))
        # an index leaving twice within alpha changes breaks pairwise disjointness
        last_left: Dict[int, int] = {}
        repeats = 0
        for k, D in enumerate(leaving):
            for index in D:
                previous = last_left.get(index)
                if previous is not None and k - previous <= alpha:
                    repeats += 1
                last_left[index] = k
        details.update({"window_leaving_max": window_max, "n": float(n), "leaving_repeats": float(repeats)})
        passed = passed and window_max <= n and repeats == 0

    return AssumptionCheck(
        name="support_model",
        passed=passed,
        measured=float(max_dwell),
        bound=float(beta),
        condition="max dwell < beta" if strict_dwell else "max dwell <= beta",
        details=details,
    )


def check_support_budget(cfg: SupportModelConfig, n: int, alpha: Optional[int] = None) -> AssumptionCheck:
    """Budget inequalities of the configured support model against the window length"""
    alpha = alpha if alpha is not None else cfg.alpha
    if alpha is None:
        raise ValueError("support budget needs the window length alpha")
    budgeted = cfg.model_copy(update={"alpha": alpha})
    problems = support_violations(budgeted, n)
    if cfg.variant == "model3":
        measured, bound = cfg.rho**2 * cfg.beta / alpha, 0.01
        condition = "rho^2 beta / alpha <= 0.01 and (s/rho2) alpha <= n"
        details = {"max_motion_alpha": float(cfg.max_motion * alpha), "n": float(n)}
    elif cfg.variant == "bernoulli_gaussian":
        measured, bound = float(cfg.s), 1.2 * cfg.rho * n / alpha
        condition = "s <= 1.2 rho n / alpha and sigma^2 <= s^2 / (4000 rho^2 log n)"
        details = {"sigma_sq": cfg.sigma**2, "sigma_sq_bound": cfg.s**2 / (4000 * cfg.rho**2 * math.log(n))}
    else:
        measured, bound = float(cfg.s), 0.0025 * alpha
        condition = "s <= 0.0025 alpha and m <= (n - s) / alpha"
        details = {"m": float(cfg.m), "m_bound": (n - cfg.s) / alpha}
    return AssumptionCheck(
        name="support_budget",
        passed=not problems,
        measured=float(measured),
        bound=float(bound),
        condition=condition,
        details=details,
    )


def _windows(t_max: int, alpha: int):
    for start in range(0, t_max, alpha):
        yield start, min(start + alpha, t_max)


def h_star_upper(supports: Sequence[np.ndarray], alpha: int, rho: int) -> List[int]:
    """
    Constructive upper bound on h_u*(alpha) for every alpha-frame window u.

    Within a window the areas are the leaving sets T^[k] minus T^[k+1] of the
    runs it meets (the last run keeps its whole set) and the time partition
    is the runs themselves, clipped to the window. Each run's support must lie
    in the union of its own area and the next rho - 1 areas.

    Returns:
        max_i |J_(i),u| per window

    Raises:
        SupportModelViolation: areas overlap or a support escapes its rho areas
    """
    runs = support_runs(supports)
    bounds: List[int] = []
    first = 0
    for start, stop in _windows(len(supports), alpha):
        while first < len(runs) and runs[first].stop <= start:
            first += 1
        last = first
        while last + 1 < len(runs) and runs[last + 1].start < stop:
            last += 1
        window_runs = runs[first : last + 1]

        areas = [a.indices - b.indices for a, b in zip(window_runs, window_runs[1:])]
        areas.append(window_runs[-1].indices)
        seen: set = set()
        for i, area in enumerate(areas):
            if seen & area:
                raise SupportModelViolation(f"window starting at frame {start + 1}: area {i + 1} overlaps an earlier one")
            seen |= area
        for i, run in enumerate(window_runs):
            cover = frozenset().union(*areas[i : i + rho])
            if not run.indices <= cover:
                raise SupportModelViolation(
                    f"window starting at frame {start + 1}: support at frame {max(run.start, start) + 1} "
                    f"is not inside {rho} consecutive areas"
                )
        bounds.append(max(min(run.stop, stop) - max(run.start, start) for run in window_runs))
    return bounds


def everyframe_partition_bound(supports: Sequence[np.ndarray], alpha: int, s: int, n: int) -> List[int]:
    """
    Per-window max |J_(i),u| of the fixed-block partition for a support that
    moves down every frame: areas are consecutive s-blocks counted from the
    window's first top index, and J_(i),u collects the frames whose top index
    falls in block i.

    Raises:
        SupportModelViolation: the support moves up or wraps inside a window
    """
    bounds: List[int] = []
    for start, stop in _windows(len(supports), alpha):
        tops = [int(T[0]) for T in supports[start:stop] if len(T)]
        if not tops:
            bounds.append(0)
            continue
        offsets = (np.array(tops) - tops[0]) % n
        if np.any(np.diff(offsets) < 0):
            raise SupportModelViolation(f"window starting at frame {start + 1}: support wraps or moves up")
        counts = np.bincount(offsets // s)
        bounds.append(int(np.max(counts)))
    return bounds


def blockbanded_bound_check(
    A_list: Sequence[np.ndarray],
    supports: Sequence[np.ndarray],
    n: int,
    rho: int,
    h_plus: float,
    alpha: int,
    sigma_plus: Optional[float] = None,
) -> BlockBandedCheck:
    """
    Compare ||sum_t I_T A_t I_T^T||_2 with rho^2 h_plus alpha sigma_plus.

    Args:
        A_list: |T_t| x |T_t| symmetric PSD matrices, one per frame of the window
        supports: T_t for the same frames
        n: Ambient dimension
        rho, h_plus: Support model parameters
        alpha: Window length
        sigma_plus: Bound on ||A_t||_2; the largest measured norm when None
    """
    if len(A_list) != len(supports):
        raise DimensionMismatchError(f"{len(A_list)} matrices for {len(supports)} supports")
    norms = []
    M = np.zeros((n, n))
    for A, T in zip(A_list, supports):
        A = np.asarray(A, dtype=float)
        T = np.asarray(T, dtype=np.intp)
        if A.shape != (len(T), len(T)):
            raise DimensionMismatchError(f"block of shape {A.shape} for a support of size {len(T)}")
        if len(T) == 0:
            norms.append(0.0)
            continue
        if not np.allclose(A, A.T, atol=1e-10):
            raise SupportModelViolation("every A_t must be symmetric")
        eig = sla.eigvalsh(A)
        if eig[0] < -1e-10 * max(1.0, abs(eig[-1])):
            raise SupportModelViolation(f"A_t is not positive semidefinite (eigenvalue {eig[0]:.3e})")
        norms.append(float(eig[-1]))
        M[np.ix_(T, T)] += A

    if sigma_plus is None:
        sigma_plus = max(norms, default=0.0)
    elif max(norms, default=0.0) > sigma_plus * (1 + 1e-12):
        raise SupportModelViolation(f"||A_t||_2 = {max(norms):.6g} exceeds sigma_plus = {sigma_plus:.6g}")

    measured = float(sla.eigvalsh(M)[-1]) if n else 0.0
    bound = rho**2 * h_plus * alpha * sigma_plus
    return BlockBandedCheck(measured=measured, bound=bound, passed=measured <= bound * (1 + 1e-10) + 1e-12)


# ==================== SIGNAL / BASIS CONDITIONS ====================


def check_denseness(
    P0: BasisMatrix, new_bases: Sequence[BasisMatrix], s: int, n: int, kappa_mode: KappaMode = "auto"
) -> AssumptionCheck:
    """
    Incoherence mu shared by P0 and every new basis, then
    2 s (r0 + J r_new) mu <= 0.09 n and 2 s r_new mu <= 0.0004 n.
    kappa_2s of the bases is reported against 0.3 (existing) and 0.02 (new).
    """
    mu = max([incoherence(P0)] + [incoherence(P) for P in new_bases])
    r0, J = P0.r, len(new_bases)
    r_new = max((P.r for P in new_bases), default=0)
    total = 2 * s * (r0 + J * r_new) * mu
    new_only = 2 * s * r_new * mu
    details = {
        "mu": mu,
        "new_product": new_only,
        "new_bound": 0.0004 * n,
        "kappa_2s_star": kappa_s(P0, min(2 * s, n), kappa_mode) if not P0.is_empty else 0.0,
        "kappa_2s_new": max((kappa_s(P, min(2 * s, n), kappa_mode) for P in new_bases), default=0.0),
    }
    return AssumptionCheck(
        name="denseness",
        passed=total <= 0.09 * n and new_only <= 0.0004 * n,
        measured=total,
        bound=0.09 * n,
        condition="2 s (r0 + J r_new) mu <= 0.09 n and 2 s r_new mu <= 0.0004 n",
        details=details,
    )


def check_slow_change(
    variances: np.ndarray,
    change_times: Sequence[int],
    r0: int,
    r_new: Sequence[int],
    d: int,
    lambda_train_minus: float,
    q: Optional[Sequence[float]] = None,
    v: Optional[Sequence[float]] = None,
) -> AssumptionCheck:
    """
    New-direction variances over [t_j, t_j + d] must stay inside
    [lambda_train_minus, 3 lambda_train_minus]; also q_i v_i^d <= 3 and
    change spacing >= d.

    Args:
        variances: t_max x r_J array, row t - 1 holds diag(Lambda_t)
    """
    t_max = variances.shape[0]
    lam_minus, lam_plus = math.inf, 0.0
    col = r0
    for t_j, r_j in zip(change_times, r_new):
        window = variances[t_j - 1 : min(t_j + d, t_max), col : col + r_j]
        if window.size:
            lam_minus = min(lam_minus, float(np.min(window)))
            lam_plus = max(lam_plus, float(np.max(window)))
        col += r_j
    if not change_times:
        lam_minus = lam_plus = lambda_train_minus

    growth = max((qi * vi**d for qi, vi in zip(q or [], v or [])), default=0.0)
    spacing = min((b - a for a, b in zip(change_times, change_times[1:])), default=math.inf)
    tol = 1e-12 * lambda_train_minus
    passed = (
        lam_minus >= lambda_train_minus - tol
        and lam_plus <= 3 * lambda_train_minus + tol
        and growth <= 3 + 1e-12
        and spacing >= d
    )
    return AssumptionCheck(
        name="slow_change",
        passed=passed,
        measured=lam_plus / lambda_train_minus,
        bound=3.0,
        condition="lambda_train_minus <= lambda_new_minus <= lambda_new_plus <= 3 lambda_train_minus",
        details={
            "lambda_new_minus": lam_minus,
            "lambda_new_plus": lam_plus,
            "max_q_v_pow_d": growth,
            "min_spacing": float(spacing),
            "d": float(d),
        },
    )


def check_xmin(X: np.ndarray, xi: float) -> AssumptionCheck:
    """x_min > 14 xi"""
    if X is None:
        raise ValueError("x_min is only defined for robust PCA scenarios")
    nonzero = np.abs(X[X != 0])
    x_min = float(np.min(nonzero)) if nonzero.size else math.inf
    return AssumptionCheck(
        name="xmin_margin",
        passed=x_min > 14 * xi,
        measured=x_min,
        bound=14 * xi,
        condition="x_min > 14 xi",
        details={"margin": x_min - 14 * xi},
    )


def check_init(P_hat: BasisMatrix, P_true: BasisMatrix, r0: int, zeta: float) -> AssumptionCheck:
    """dif(P_hat, P_true) <= r0 zeta"""
    measured = dif(P_hat, P_true)
    return AssumptionCheck(
        name="init_accuracy",
        passed=measured <= r0 * zeta,
        measured=measured,
        bound=r0 * zeta,
        condition="dif(P_init, P_0) <= r0 zeta",
    )


def check_zeta(constants: ScenarioConstants, zeta: float) -> AssumptionCheck:
    bound = zeta_bound(constants)
    return AssumptionCheck(
        name="zeta_range",
        passed=0 < zeta <= bound,
        measured=zeta,
        bound=bound,
        condition="zeta <= min(1e-4/r^2, 0.03 lambda_train_minus/(r^2 lambda_plus), 1/(r^3 gamma^2), lambda_train_minus/(r^3 gamma^2))",
    )


def check_spacing(change_times: Sequence[int], t_max: int, d: int, alpha: int, K: int) -> AssumptionCheck:
    """d >= (K+2) alpha and every change spacing (last one up to t_max + 1) >= d"""
    times = list(change_times) + [t_max + 1]
    spacing = min((b - a for a, b in zip(times, times[1:])), default=math.inf)
    required = (K + 2) * alpha
    return AssumptionCheck(
        name="spacing_d",
        passed=not change_times or (d >= required and spacing >= d),
        measured=float(spacing),
        bound=float(d),
        condition="min spacing >= d >= (K+2) alpha",
        details={"required_d": float(required)},
    )


def _unavailable(name: str, condition: str) -> AssumptionCheck:
    return AssumptionCheck(name=name, passed=False, measured=math.nan, bound=math.nan, condition=condition + " (zeta not given)")


# ==================== AGGREGATE ====================


def assess_scenario(
    truth: ScenarioTruth,
    params: EngineParams,
    zeta: Optional[float] = None,
    P_init: Optional[BasisMatrix] = None,
    mode: str = "strict",
    strict_dwell: bool = False,
    kappa_mode: KappaMode = "auto",
) -> AssumptionReport:
    """
    Run every check on a scenario.

    Args:
        truth: Generated scenario
        params: Engine parameters in use
        zeta: Accuracy level; the zeta-dependent checks fail when None
        P_init: Initial estimate for the init check; P0 itself when None
        mode: strict (pass/fail per check) or advisory (measured values only)
        strict_dwell: Require dwell < beta. Generated model3 scenarios hold each
            support for exactly beta frames, which only dwell <= beta accepts

    Returns:
        AssumptionReport
    """
    signal, support = truth.signal_config, truth.support_config
    constants = scenario_constants(truth)
    d = signal.d or signal.spacing()
    online = truth.supports[signal.t_train :]
    checks: List[AssumptionCheck] = []

    if zeta is not None:
        checks.append(check_init(P_init or truth.P0, truth.P0, signal.r0, zeta))
    else:
        checks.append(_unavailable("init_accuracy", "dif(P_init, P_0) <= r0 zeta"))

    checks.append(
        check_slow_change(
            truth.variances, signal.change_times, signal.r0, signal.r_new, d, signal.lambda_train_minus, signal.q, signal.v
        )
    )

    if support.variant == "everyframe":
        rho_sq = support.rho**2
        condition = f"rho^2 h_plus <= 0.01 with rho = {support.rho} (block partition)"
        try:
            h = max(everyframe_partition_bound(online, params.alpha, support.s, truth.n), default=0)
        except SupportModelViolation as e:
            logger.debug(f"everyframe partition unavailable: {e}")
            checks.append(
                AssumptionCheck(
                    name="support_model",
                    passed=False,
                    measured=math.nan,
                    bound=0.01,
                    condition=condition,
                    details={"h_upper": math.nan},
                )
            )
        else:
            h_plus = h / params.alpha
            checks.append(
                AssumptionCheck(
                    name="support_model",
                    passed=rho_sq * h_plus <= 0.01,
                    measured=rho_sq * h_plus,
                    bound=0.01,
                    condition=condition,
                    details={"h_upper": float(h)},
                )
            )
    else:
        check = check_support_model(online, support.s, support.rho, support.beta, params.alpha, truth.n, strict_dwell)
        try:
            h = max(h_star_upper(online, params.alpha, support.rho), default=0)
            check.details["h_star_upper"] = float(h)
            check.details["rho_sq_h_plus"] = support.rho**2 * h / params.alpha
        except SupportModelViolation as e:
            logger.debug(f"h_star_upper unavailable: {e}")
            check.details["h_star_upper"] = math.nan
        checks.append(check)
    checks.append(check_support_budget(support, truth.n, params.alpha))

    checks.append(check_denseness(truth.P0, truth.new_bases(), support.s, truth.n, kappa_mode))
    if truth.mode == "rpca" and params.xi is not None:
        checks.append(check_xmin(truth.X, params.xi))
    checks.append(check_spacing(signal.change_times, signal.t_max, d, params.alpha, params.K))

    if zeta is not None:
        checks.append(check_zeta(constants, zeta))
    else:
        checks.append(_unavailable("zeta_range", "zeta <= zeta bound"))

    if mode == "advisory":
        for check in checks:
            if not check.passed:
                logger.warning(f"assumption {check.name}: measured {check.measured:.6g} vs bound {check.bound:.6g}")
        checks = [check.model_copy(update={"passed": None}) for check in checks]
    return AssumptionReport(mode=mode, checks=checks)
