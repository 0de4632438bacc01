"""
Sparse recovery against the projected operator Phi = I - P P^T.
Constrained l1 minimization (basis pursuit denoising), support thresholding
and least-squares debiasing on the estimated support.
"""

import logging
import math
from dataclasses import dataclass
from typing import Iterable, Optional, Tuple

import numpy as np
import scipy.linalg

from ..models.schemas import L1SolveOptions
from .errors import DimensionMismatchError
from .linalg import BasisMatrix, as_index_set, projected_ls, restricted_columns
from .settings import get_tolerances

logger = logging.getLogger(__name__)

# Absolute slack on the residual constraint, relative to max(1, ||y||)
RESIDUAL_FLOOR = 1e-12


@dataclass(frozen=True, eq=False)
class ProjectedOperator:
    """Phi = I - P P^T, applied through matrix-vector products only"""

    basis: BasisMatrix

    @property
    def n(self) -> int:
        return self.basis.n

    def matvec(self, v: np.ndarray) -> np.ndarray:
        """Phi v for a vector or a matrix of columns"""
        return self.basis.project_out(v)

    # Phi is symmetric
    rmatvec = matvec

    def columns(self, T: np.ndarray) -> np.ndarray:
        """Phi applied to the coordinate vectors e_j, j in T"""
        return restricted_columns(self.basis, T)


@dataclass(eq=False)
class L1SolveReport:
    """Result of one constrained l1 solve"""

    solution: np.ndarray
    residual_norm: float
    l1_value: float
    iterations: int
    converged: bool
    duality_gap: float
    method: str
    message: str = ""


@dataclass(eq=False)
class FrameEstimate:
    """Per-frame sparse + low-rank split"""

    x_hat: np.ndarray
    l_hat: np.ndarray
    support: np.ndarray
    report: Optional[L1SolveReport] = None


# ==================== DUAL CERTIFICATE ====================


def dual_value(op: ProjectedOperator, y: np.ndarray, xi: float, z: np.ndarray) -> float:
    """
    Lower bound y^T z - xi ||z||_2 on the optimal l1 value.
    z is rescaled onto ||Phi z||_inf = 1 first, which makes it dual feasible.
    """
    scale = float(np.max(np.abs(op.rmatvec(z)))) if z.size else 0.0
    if scale <= 0 or not np.isfinite(scale):
        return 0.0
    z = z / scale
    return float(y @ z - xi * np.linalg.norm(z))


def _floor(y_norm: float) -> float:
    return RESIDUAL_FLOOR * max(1.0, y_norm)


def _feasible(residual_norm: float, xi: float, y_norm: float, feas_tol: float) -> bool:
    return residual_norm <= xi * (1 + feas_tol) + _floor(y_norm)


def _target(xi: float, y_norm: float) -> float:
    """Residual norm the solvers aim for; xi below rounding level is lifted to half the floor"""
    return max(xi, 0.5 * _floor(y_norm))


def _residual_roots(r: np.ndarray, direction: np.ndarray, target: float) -> Optional[Tuple[float, float]]:
    """
    Both gamma with ||r - gamma direction||_2 = target, or None when the line
    stays above target. Uses the component of r orthogonal to direction, so a
    target far below ||r|| does not cancel out.
    """
    aa = float(direction @ direction)
    if aa <= 0:
        return None
    t0 = float(r @ direction) / aa
    perp = float(np.linalg.norm(r - t0 * direction))
    if perp > target:
        return None
    half = math.sqrt((target * target - perp * perp) / aa)
    return t0 - half, t0 + half


def _finish(op, y, xi, x, opts, iterations, method, candidates, lower=0.0, message="") -> L1SolveReport:
    residual = y - op.matvec(x)
    residual_norm = float(np.linalg.norm(residual))
    l1_value = float(np.sum(np.abs(x)))
    for z in candidates:
        if z is not None:
            lower = max(lower, dual_value(op, y, xi, z))
    lower = max(lower, dual_value(op, y, xi, residual))
    gap = max(0.0, l1_value - lower)
    feasible = _feasible(residual_norm, xi, float(np.linalg.norm(y)), opts.feas_tol)
    certified = gap <= opts.opt_tol * max(l1_value, RESIDUAL_FLOOR)
    converged = feasible and certified
    if converged:
        message = ""
    elif not message:
        message = "residual above xi" if not feasible else f"duality gap {gap:.3e} not certified"
    return L1SolveReport(
        solution=x,
        residual_norm=residual_norm,
        l1_value=l1_value,
        iterations=iterations,
        converged=converged,
        duality_gap=gap,
        method=method,
        message=message,
    )


# ==================== HOMOTOPY ====================


def _homotopy(op: ProjectedOperator, y: np.ndarray, xi: float, opts: L1SolveOptions) -> L1SolveReport:
    """Follow the lasso path from lambda = ||Phi y||_inf down until ||y - Phi x|| = xi"""
    n = op.n
    target = _target(xi, float(np.linalg.norm(y)))
    rcond = get_tolerances().rank_cutoff
    x = np.zeros(n)
    r = y.copy()
    c = op.rmatvec(r)
    lam = float(np.max(np.abs(c)))
    if lam <= 0:
        return _finish(op, y, xi, x, opts, 0, "homotopy", [], message="y is orthogonal to range(Phi)")

    first = int(np.argmax(np.abs(c)))
    active = [first]
    signs = [float(np.sign(c[first]))]
    # columns in the span of the active set, and the one just dropped, may not enter
    dependent = set()
    last_dropped = -1
    direction = None
    message = ""
    iterations = 0

    for iterations in range(1, opts.max_iters + 1):
        if float(np.linalg.norm(r)) <= target:
            break
        if not active:
            message = "active set emptied before the residual bound"
            break
        A = np.array(active, dtype=np.intp)
        cols = op.columns(A)
        d, _, rank, _ = scipy.linalg.lstsq(cols[A], np.array(signs), cond=rcond)
        if rank < A.size:
            dependent.add(active.pop())
            signs.pop()
            continue
        direction = cols @ d

        roots = _residual_roots(r, direction, target)
        gamma_res = math.inf if roots is None or roots[1] < 0 else max(0.0, roots[0])

        tiny = 1e-12 * lam
        free = np.ones(n, dtype=bool)
        free[A] = False
        for j in dependent:
            free[j] = False
        if last_dropped >= 0:
            free[last_dropped] = False
        with np.errstate(divide="ignore", invalid="ignore"):
            up = (lam - c) / (1 - direction)
            down = (lam + c) / (1 + direction)
            out = -x[A] / d
        # ties at the boundary enter with a zero step, but only when moving outward
        up = np.where(free & (direction < 1) & (up > -tiny), np.maximum(up, 0.0), math.inf)
        down = np.where(free & (direction > -1) & (down > -tiny), np.maximum(down, 0.0), math.inf)
        enter_steps = np.minimum(up, down)
        j_in = int(np.argmin(enter_steps))
        gamma_in = float(enter_steps[j_in])
        out = np.where(out > tiny, out, math.inf)
        i_out = int(np.argmin(out)) if out.size else 0
        gamma_out = float(out[i_out]) if out.size else math.inf

        steps = (gamma_res, gamma_in, gamma_out, lam)
        event = int(np.argmin(steps))
        gamma = steps[event]

        x[A] += gamma * d
        lam -= gamma
        r = y - op.matvec(x)
        c = op.rmatvec(r)

        if event == 0:
            break
        if event == 3:
            if float(np.linalg.norm(r)) > target:
                message = "lasso path ended above the residual bound (infeasible xi)"
            break
        if event == 2:
            j_out = active.pop(i_out)
            signs.pop(i_out)
            x[j_out] = 0.0
            last_dropped = j_out
            dependent.clear()
        else:
            active.append(j_in)
            signs.append(float(np.sign(c[j_in])) or 1.0)
            last_dropped = -1
    else:
        message = f"no convergence within {opts.max_iters} path steps"

    return _finish(op, y, xi, x, opts, iterations, "homotopy", [direction], message=message)


# ==================== PROXIMAL ====================


def _soft(v: np.ndarray, lam: float) -> np.ndarray:
    return np.sign(v) * np.maximum(np.abs(v) - lam, 0.0)


def _fista(op, Phi_y, lam, x0, max_iter, tol=1e-12):
    """Accelerated proximal gradient on 0.5 ||y - Phi x||^2 + lam ||x||_1 with unit step"""
    x = x0.copy()
    z = x.copy()
    t = 1.0
    for k in range(1, max_iter + 1):
        # gradient Phi^T (Phi z - y) = Phi z - Phi y for the projector
        x_new = _soft(z - (op.matvec(z) - Phi_y), lam)
        t_new = (1 + math.sqrt(1 + 4 * t * t)) / 2
        z = x_new + ((t - 1) / t_new) * (x_new - x)
        step = float(np.linalg.norm(x_new - x))
        x, t = x_new, t_new
        if step <= tol * max(1.0, float(np.linalg.norm(x))):
            return x, k
    return x, max_iter


def _support_solution(
    op: ProjectedOperator, y: np.ndarray, x: np.ndarray, target: float, floor: float, rcond: float
) -> Optional[Tuple[np.ndarray, np.ndarray]]:
    """
    Exact lasso solution on the support and signs of x, at the penalty where the
    residual norm equals target.

    On a fixed sign pattern s the solution is x_A = u - lam v with
    G u = Phi_A^T y and G v = s, so the residual moves along a line in lam.

    Returns:
        (solution, dual direction Phi_A v), or None when the optimality
        conditions fail at that penalty
    """
    scale = float(np.max(np.abs(x))) if x.size else 0.0
    if scale <= 0:
        return None
    A = np.flatnonzero(np.abs(x) > 1e-9 * scale)
    s = np.sign(x[A])
    cols = op.columns(A)
    G = cols[A]
    u, *_ = scipy.linalg.lstsq(G, cols.T @ y, cond=rcond)
    v, *_ = scipy.linalg.lstsq(G, s, cond=rcond)
    r0 = y - cols @ u
    direction = cols @ v
    roots = _residual_roots(r0, -direction, target)
    if roots is None or roots[1] <= 0:
        return None
    lam = roots[1]
    x_A = u - lam * v
    if np.any(x_A * s < -1e-9 * max(1.0, float(np.max(np.abs(u))))):
        return None
    solution = np.zeros_like(x)
    solution[A] = x_A
    c = op.rmatvec(y - op.matvec(solution))
    if float(np.max(np.abs(c))) > lam * (1 + 1e-8) + floor:
        return None
    return solution, direction


def _proximal(op: ProjectedOperator, y: np.ndarray, xi: float, opts: L1SolveOptions) -> L1SolveReport:
    """
    FISTA on the penalized form, walking lambda down towards the residual bound.
    After every run the support FISTA found is solved exactly; the first exact
    solution that satisfies the optimality conditions is returned.
    """
    Phi_y = op.matvec(y)
    lam_hi = float(np.max(np.abs(Phi_y)))
    n = op.n
    if lam_hi <= 0:
        return _finish(op, y, xi, np.zeros(n), opts, 0, "proximal", [], message="y is orthogonal to range(Phi)")
    y_norm = float(np.linalg.norm(y))
    floor = _floor(y_norm)
    target = _target(xi, y_norm)
    rcond = get_tolerances().rank_cutoff
    # each penalty value gets a slice of the iteration budget before it is revisited
    chunk = max(100, opts.max_iters // 50)
    lam_lo = 0.0
    lam = lam_hi / 2
    x = np.zeros(n)
    direction = None
    iterations = 0
    message = f"no convergence within {opts.max_iters} iterations"

    while iterations < opts.max_iters:
        budget = min(chunk, opts.max_iters - iterations)
        x, k = _fista(op, Phi_y, lam, x, budget)
        iterations += k
        exact = _support_solution(op, y, x, target, floor, rcond)
        if exact is not None:
            x, direction = exact
            message = ""
            break
        settled = k < budget
        res = float(np.linalg.norm(y - op.matvec(x)))
        # only a settled run may narrow the bracket
        if settled and res > target:
            lam_hi = lam
        elif settled:
            lam_lo = lam
        # residual grows roughly linearly with lambda; never drop more than tenfold at once
        guess = max(lam * target / res, lam / 10) if res > 0 else lam / 2
        if not lam_lo < guess < lam_hi:
            guess = math.sqrt(lam_lo * lam_hi) if lam_lo > 0 else lam_hi / 2
        if abs(guess - lam) <= 1e-15 * lam:
            if settled:
                message = "penalty search stalled"
                break
            continue
        lam = guess

    return _finish(op, y, xi, x, opts, iterations, "proximal", [direction], message=message)


# ==================== PUBLIC API ====================


def bpdn_solve(
    op: ProjectedOperator, y: np.ndarray, xi: float, opts: Optional[L1SolveOptions] = None
) -> L1SolveReport:
    """
    Solve min ||x||_1 subject to ||y - Phi x||_2 <= xi.

    Args:
        op: Projected operator Phi
        y: Measurement vector
        xi: Residual bound, >= 0
        opts: Solver options (method, iteration cap, tolerances)

    Returns:
        L1SolveReport; converged is False when feasibility or the dual certificate fails
    """
    opts = opts or L1SolveOptions()
    y = np.asarray(y, dtype=float).ravel()
    if y.size != op.n:
        raise DimensionMismatchError(f"y has length {y.size}, expected {op.n}")
    if xi < 0:
        raise ValueError(f"xi must be non-negative, got {xi}")
    if np.linalg.norm(y) <= xi:
        return _finish(op, y, xi, np.zeros(op.n), opts, 0, opts.method, [])

    if opts.method == "homotopy":
        report = _homotopy(op, y, xi, opts)
    else:
        report = _proximal(op, y, xi, opts)
    if not report.converged:
        logger.debug(f"l1 solve did not converge ({report.method}): {report.message}")
    return report


def threshold_support(x_cs: np.ndarray, omega: float) -> np.ndarray:
    """Ascending indices with |x_i| > omega"""
    if omega <= 0:
        raise ValueError(f"omega must be positive, got {omega}")
    return np.flatnonzero(np.abs(np.asarray(x_cs)) > omega)


def recover_frame(
    op: ProjectedOperator,
    m: np.ndarray,
    xi: float,
    omega: float,
    opts: Optional[L1SolveOptions] = None,
) -> FrameEstimate:
    """
    Robust-PCA frame recovery: project, solve the l1 program, threshold, debias.
    l_hat is m - x_hat.
    """
    m = np.asarray(m, dtype=float).ravel()
    y = op.matvec(m)
    report = bpdn_solve(op, y, xi, opts)
    support = threshold_support(report.solution, omega)
    x_hat = projected_ls(op.basis, support, y)
    return FrameEstimate(x_hat=x_hat, l_hat=m - x_hat, support=support, report=report)


def recover_frame_mc(op: ProjectedOperator, m: np.ndarray, support: Iterable[int]) -> FrameEstimate:
    """Matrix-completion frame recovery on a known support: least squares only"""
    m = np.asarray(m, dtype=float).ravel()
    if m.size != op.n:
        raise DimensionMismatchError(f"m has length {m.size}, expected {op.n}")
    T = as_index_set(support, op.n)
    y = op.matvec(m)
    x_hat = projected_ls(op.basis, T, y)
    return FrameEstimate(x_hat=x_hat, l_hat=m - x_hat, support=T)
