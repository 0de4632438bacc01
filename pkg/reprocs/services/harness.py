"""
Experiment harness.
Runs seeded trials of the engine against generated scenarios, computes
per-frame metrics against the truth, aggregates Monte-Carlo ensembles and
writes the CSV / JSON artifacts.
"""

import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg as sla

from ..core.engine import ReProCS, train_init, theorem_params
from ..core.errors import ConfigError, ReprocsError
from ..core.linalg import BasisMatrix, dif
from ..models.schemas import (
    AssumptionReport,
    DetectionEvent,
    EngineParams,
    EnsembleSummary,
    ExperimentConfig,
    MetricsFrame,
    OracleFrame,
    TheoremParams,
    TrialSummary,
)
from .assumptions import assess_scenario
from .config import apply_tolerances
from .generators import STREAM_INIT, ScenarioTruth, generate_scenario, make_rng, perturbed_basis, scenario_constants
from .storage import write_detections, write_json, write_metrics, write_report, write_rows

logger = logging.getLogger(__name__)

SUMMARY_COLUMNS = [
    "t",
    "trials",
    "rel_error_mean",
    "rel_error_median",
    "rel_error_max",
    "se_mean",
    "se_median",
    "se_max",
]


@dataclass(eq=False)
class TrialResult:
    """Everything one trial produced"""

    summary: TrialSummary
    metrics: List[MetricsFrame] = field(default_factory=list)
    report: Optional[AssumptionReport] = None
    detections: List[DetectionEvent] = field(default_factory=list)


# ==================== SETUP ====================


def trial_seed(cfg: ExperimentConfig, trial: int) -> int:
    return cfg.base_seed + trial


def make_scenario(cfg: ExperimentConfig, seed: int) -> ScenarioTruth:
    return generate_scenario(cfg.signal, cfg.support, cfg.outliers, cfg.mode, seed, cfg.engine.alpha, cfg.engine.K)


def resolve_engine_params(cfg: ExperimentConfig, truth: ScenarioTruth) -> Tuple[EngineParams, Optional[TheoremParams]]:
    """
    Engine parameters for a scenario: explicit [engine] values win, the
    rest come from the theorem formulas at the configured zeta.
    """
    e = cfg.engine
    needed = [e.alpha, e.K] + ([e.xi, e.omega] if cfg.mode == "rpca" else [])
    theorem = None
    if any(value is None for value in needed):
        if e.zeta is None:
            raise ConfigError("engine parameters are incomplete and no zeta is given")
        theorem = theorem_params(scenario_constants(truth), e.zeta)
        derived = theorem.engine
        logger.info(
            f"Theorem parameters at zeta={e.zeta:g}: alpha={derived.alpha}, K={derived.K}, xi={derived.xi:.4g}"
        )
    else:
        derived = None

    def pick(name):
        value = getattr(e, name)
        if value is None and derived is not None:
            value = getattr(derived, name)
        return value

    params = EngineParams(
        alpha=pick("alpha"),
        K=pick("K"),
        xi=pick("xi") if cfg.mode == "rpca" else None,
        omega=pick("omega") if cfg.mode == "rpca" else None,
        thresh=e.thresh,
        l1=cfg.l1,
        halt_on_error=e.halt_on_error,
    )
    return params, theorem


def initial_estimate(cfg: ExperimentConfig, truth: ScenarioTruth, seed: int) -> Tuple[BasisMatrix, float]:
    """(P_init, lambda_train_minus) per the [init] section"""
    init = cfg.init
    if init.mode == "train":
        return train_init(truth.M[:, : cfg.signal.t_train], init.rank_rule, init.r0, init.energy)
    rng = make_rng(seed, STREAM_INIT)
    return perturbed_basis(truth.P0, init.noise, rng), cfg.signal.lambda_train_minus


# ==================== METRICS ====================


def relative_error(l: np.ndarray, l_hat: np.ndarray) -> float:
    """||l - l_hat|| / ||l||; the absolute error when l = 0"""
    err = float(np.linalg.norm(l - l_hat))
    norm = float(np.linalg.norm(l))
    return err / norm if norm > 0 else err


def support_scores(estimated: np.ndarray, true: np.ndarray) -> Tuple[float, float]:
    """(precision, recall); an empty set scores 1 for its own side"""
    hits = np.intersect1d(estimated, true).size
    precision = hits / len(estimated) if len(estimated) else 1.0
    recall = hits / len(true) if len(true) else 1.0
    return precision, recall


def match_detections(
    detections: Sequence[DetectionEvent], change_times: Sequence[int], alpha: int
) -> Tuple[List[Optional[DetectionEvent]], int]:
    """
    Pair every true change t_j with the first detection in [t_j, t_j + 2 alpha].

    Returns:
        (matched detection or None per change, number of unmatched detections)
    """
    matched: List[Optional[DetectionEvent]] = []
    used = set()
    for t_j in change_times:
        hit = next(
            (event for event in detections if event.j not in used and t_j <= event.t_hat <= t_j + 2 * alpha), None
        )
        if hit is not None:
            used.add(hit.j)
        matched.append(hit)
    return matched, len(detections) - len(used)


# ==================== TRIAL ====================


def run_trial(cfg: ExperimentConfig, trial: int, out_dir: Optional[Path] = None) -> TrialResult:
    """
    One seeded trial: generate, check assumptions, run the engine, score.

    Args:
        cfg: Experiment config
        trial: Trial index; the seed is base_seed + trial
        out_dir: Where per-trial files go; nothing is written when None

    Returns:
        TrialResult (summary.failed is set when generation or the engine raised)
    """
    seed = trial_seed(cfg, trial)
    summary = TrialSummary(trial=trial, seed=seed)
    result = TrialResult(summary=summary)
    started = time.perf_counter()
    logger.info(f"Trial {trial} (seed {seed}) started")
    try:
        truth = make_scenario(cfg, seed)
        params, _ = resolve_engine_params(cfg, truth)
        summary.alpha = params.alpha
        P_init, lam = initial_estimate(cfg, truth, seed)
        report = assess_scenario(
            truth, params, cfg.engine.zeta, P_init, mode="strict" if cfg.strict_assumptions else "advisory"
        )
        result.report = report
        summary.assumptions_passed = report.overall_pass
        if cfg.strict_assumptions and not report.overall_pass:
            failing = [check.name for check in report.checks if not check.passed]
            raise ReprocsError(f"assumptions failed: {', '.join(failing)}")
        _run_engine(cfg, truth, params, P_init, lam, result)
    except ConfigError:
        raise
    except (ReprocsError, ValueError) as e:
        summary.failed = True
        summary.error = f"{type(e).__name__}: {e}"
        logger.warning(f"Trial {trial} failed: {summary.error}")

    summary.runtime_seconds = time.perf_counter() - started
    logger.info(f"Trial {trial} finished in {summary.runtime_seconds:.1f}s")
    if out_dir is not None:
        write_trial_outputs(result, Path(out_dir))
    return result


def _run_engine(
    cfg: ExperimentConfig,
    truth: ScenarioTruth,
    params: EngineParams,
    P_init: BasisMatrix,
    lam: float,
    result: TrialResult,
) -> None:
    summary = result.summary
    t_train = cfg.signal.t_train
    engine = ReProCS(params, P_init, lam, t_train=t_train)
    frames = truth.t_max - t_train
    errors = np.zeros(frames)
    se_windows: Dict[Tuple[int, int], List[float]] = {}
    exact = True

    se_key, se_value = None, 0.0
    for t in range(t_train + 1, truth.t_max + 1):
        T = truth.supports[t - 1]
        record = engine.step(truth.M[:, t - 1], T if cfg.mode == "mc" else None)
        l = truth.L[:, t - 1]
        rel = relative_error(l, record.l_hat)
        errors[t - t_train - 1] = rel

        key = (engine.basis_version, truth.segment_index(t))
        if key != se_key:
            se_key, se_value = key, dif(engine.basis, truth.basis_at(t))

        precision = recall = None
        if cfg.mode == "rpca":
            precision, recall = support_scores(record.support, T)
            if record.l1_converged is False or not np.array_equal(np.sort(record.support), np.sort(T)):
                exact = False
        if record.l1_converged is False:
            summary.l1_failures += 1
        if record.failed:
            summary.recovery_errors += 1
        if record.phase == "ppca":
            se_windows.setdefault((record.j_hat, record.k + 1), []).append(se_value)

        if t % cfg.cadence == 0:
            result.metrics.append(
                MetricsFrame(
                    t=t,
                    rel_error=rel,
                    se=se_value,
                    precision=precision,
                    recall=recall,
                    phase=record.phase,
                    j_hat=record.j_hat,
                    k=record.k,
                    l1_converged=record.l1_converged,
                    failed=record.failed,
                )
            )

    summary.frames = frames
    summary.exact_support = exact if cfg.mode == "rpca" else None
    result.detections = engine.detections()
    summary.detections = result.detections
    _score_detections(cfg, truth, params, summary, errors, se_windows)


def _score_detections(
    cfg: ExperimentConfig,
    truth: ScenarioTruth,
    params: EngineParams,
    summary: TrialSummary,
    errors: np.ndarray,
    se_windows: Dict[Tuple[int, int], List[float]],
) -> None:
    changes = truth.change_times
    t_train = cfg.signal.t_train
    matched, summary.false_detections = match_detections(summary.detections, changes, params.alpha)
    summary.detection_delays = [None if event is None else event.t_hat - t_j for event, t_j in zip(matched, changes)]

    if changes:
        summary.ranks_correct = all(
            event is not None and len(event.ranks) == params.K and all(r == r_j for r in event.ranks)
            for event, r_j in zip(matched, cfg.signal.r_new)
        )

    window_means = []
    for event in summary.detections:
        means = [float(np.mean(se_windows[(event.j, k)])) for k in range(1, params.K + 1) if (event.j, k) in se_windows]
        window_means.append(means)
    summary.se_window_means = window_means
    if window_means:
        summary.se_monotone = all(
            all(b <= a + 1e-12 for a, b in zip(means, means[1:])) for means in window_means if means
        )

    bounds = list(changes[1:]) + [truth.t_max + 1]
    settled = []
    for t_j, t_next in zip(changes, bounds):
        lo = max(t_j + params.K * params.alpha, t_train + 1)
        segment = errors[lo - t_train - 1 : t_next - t_train - 1]
        settled.append(float(np.mean(segment)) if segment.size else None)
    summary.settled_errors = settled


def write_trial_outputs(result: TrialResult, out_dir: Path) -> None:
    i = result.summary.trial
    out_dir.mkdir(parents=True, exist_ok=True)
    write_metrics(result.metrics, out_dir / f"metrics_{i}.csv")
    write_detections(result.detections, out_dir / f"detections_{i}.csv")
    if result.report is not None:
        write_report(result.report, out_dir, stem=f"assumptions_{i}")
    write_json(result.summary.model_dump(mode="json"), out_dir / f"trial_{i}.json")


# ==================== ENSEMBLE ====================


def _trial_worker(args: Tuple[ExperimentConfig, int, Optional[str]]) -> TrialResult:
    cfg, trial, out_dir = args
    apply_tolerances(cfg)
    return run_trial(cfg, trial, Path(out_dir) if out_dir else None)


def aggregate_metrics(per_trial: Sequence[Sequence[MetricsFrame]]) -> List[List[float]]:
    """
    Per-frame mean / median / max of relative error and SE across trials.
    Rows follow SUMMARY_COLUMNS; frames missing from a trial are skipped for it.
    """
    by_t: Dict[int, List[MetricsFrame]] = {}
    for rows in per_trial:
        for row in rows:
            by_t.setdefault(row.t, []).append(row)
    table = []
    for t in sorted(by_t):
        rel = np.array([row.rel_error for row in by_t[t]])
        se = np.array([row.se for row in by_t[t]])
        table.append(
            [
                t,
                len(by_t[t]),
                float(np.mean(rel)),
                float(np.median(rel)),
                float(np.max(rel)),
                float(np.mean(se)),
                float(np.median(se)),
                float(np.max(se)),
            ]
        )
    return table


def _rate(values: Sequence[Optional[bool]]) -> Optional[float]:
    known = [v for v in values if v is not None]
    return sum(known) / len(known) if known else None


def summarize_trials(summaries: Sequence[TrialSummary], alpha: int) -> EnsembleSummary:
    """Aggregate rates over per-trial summaries"""
    ok = [s for s in summaries if not s.failed]
    width = max(1, alpha // 4)
    histogram: Dict[str, int] = {}
    for s in ok:
        for delay in s.detection_delays:
            if delay is None:
                label = "missed"
            else:
                lo = delay // width * width
                label = f"{lo}-{lo + width - 1}"
            histogram[label] = histogram.get(label, 0) + 1

    in_bound = [
        None if not s.detection_delays else all(d is not None for d in s.detection_delays) and s.false_detections == 0
        for s in ok
    ]
    changes = max((len(s.settled_errors) for s in ok), default=0)
    settled = []
    for j in range(changes):
        values = [s.settled_errors[j] for s in ok if j < len(s.settled_errors) and s.settled_errors[j] is not None]
        settled.append(float(np.mean(values)) if values else None)

    return EnsembleSummary(
        trials=len(summaries),
        failed_trials=len(summaries) - len(ok),
        exact_support_rate=_rate([s.exact_support for s in ok]),
        detection_in_bound_rate=_rate(in_bound),
        rank_correct_rate=_rate([s.ranks_correct for s in ok]),
        se_monotone_rate=_rate([s.se_monotone for s in ok]),
        false_detections=sum(s.false_detections for s in ok),
        delay_histogram=dict(sorted(histogram.items(), key=lambda item: _bin_order(item[0]))),
        settled_error_mean=settled,
    )


def _bin_order(label: str) -> float:
    return math.inf if label == "missed" else float(label.split("-")[0])


def run_ensemble(cfg: ExperimentConfig, out_dir: Optional[Path] = None) -> Tuple[EnsembleSummary, List[TrialResult]]:
    """
    Run cfg.trials trials (up to cfg.jobs in parallel), then merge
    single-threaded into summary.csv and summary.json.
    """
    out_dir = Path(out_dir or cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tasks = [(cfg, i, str(out_dir)) for i in range(cfg.trials)]
    if cfg.jobs > 1 and cfg.trials > 1:
        with ProcessPoolExecutor(max_workers=min(cfg.jobs, cfg.trials)) as pool:
            results = list(pool.map(_trial_worker, tasks))
    else:
        results = [run_trial(cfg, i, out_dir) for i in range(cfg.trials)]

    table = aggregate_metrics([r.metrics for r in results if not r.summary.failed])
    write_rows(out_dir / "summary.csv", SUMMARY_COLUMNS, table)

    alpha = cfg.engine.alpha or next((r.summary.alpha for r in results if r.summary.alpha), 1)
    summary = summarize_trials([r.summary for r in results], alpha)
    write_json(summary.model_dump(mode="json"), out_dir / "summary.json")
    logger.info(
        f"Ensemble of {summary.trials} trials done ({summary.failed_trials} failed), results in {out_dir}"
    )

    oracle_rows = None
    if cfg.oracle:
        oracle_rows = run_oracle(cfg, 0, out_dir)
    if cfg.plot:
        plot_errors(table, oracle_rows, out_dir / "errors.svg")
    return summary, results


# ==================== ORACLE ====================


def baseline_oracle(
    L: np.ndarray,
    M: np.ndarray,
    supports: Sequence[np.ndarray],
    mode: str,
    rank: int,
    alpha: int,
    P_true: Optional[Sequence[BasisMatrix]] = None,
) -> List[OracleFrame]:
    """
    Non-causal batch reference: at the end of every alpha-frame window take
    the top-rank eigenvectors of the observed-so-far Gram matrix and estimate
    each frame of that window from them. Matrix completion fits the observed
    entries by least squares; robust PCA projects the whole frame.

    Args:
        L: True low-rank matrix
        M: Observations
        supports: T_t per frame
        mode: mc or rpca
        rank: Subspace dimension of the oracle
        alpha: Window length
        P_true: True basis per frame for the SE column; SE is 0 when None
    """
    n, t_max = M.shape
    if not 1 <= rank <= n:
        raise ValueError(f"oracle rank must be in [1, {n}], got {rank}")
    gram = np.zeros((n, n))
    rows: List[OracleFrame] = []
    for start in range(0, t_max, alpha):
        stop = min(start + alpha, t_max)
        block = M[:, start:stop]
        gram += block @ block.T
        _, vectors = sla.eigh(gram, subset_by_index=[n - rank, n - 1])
        U = vectors[:, ::-1]
        basis = BasisMatrix.orthonormalize(U)
        for col in range(start, stop):
            m = M[:, col]
            if mode == "mc" and len(supports[col]):
                observed = np.setdiff1d(np.arange(n), supports[col])
                if observed.size >= basis.r:
                    coef, *_ = np.linalg.lstsq(basis.data[observed], m[observed], rcond=None)
                    l_hat = basis.data @ coef
                else:
                    l_hat = basis.project(m)
            else:
                l_hat = basis.project(m)
            se = dif(basis, P_true[col]) if P_true is not None else 0.0
            rows.append(OracleFrame(t=col + 1, rel_error=relative_error(L[:, col], l_hat), se=se))
    return rows


def run_oracle(cfg: ExperimentConfig, trial: int, out_dir: Path, rank: Optional[int] = None) -> List[OracleFrame]:
    """Oracle curve for one trial's scenario, written to oracle.csv at the metric cadence"""
    truth = make_scenario(cfg, trial_seed(cfg, trial))
    params, _ = resolve_engine_params(cfg, truth)
    rank = rank or cfg.signal.rank_total
    P_true = [truth.basis_at(t) for t in range(1, truth.t_max + 1)]
    rows = baseline_oracle(truth.L, truth.M, truth.supports, cfg.mode, rank, params.alpha, P_true)
    rows = [row for row in rows if row.t % cfg.cadence == 0]
    write_rows(Path(out_dir) / "oracle.csv", ["t", "rel_error", "se"], [(r.t, r.rel_error, r.se) for r in rows])
    return rows


# ==================== PLOT ====================


def plot_errors(table: Sequence[Sequence[float]], oracle: Optional[Sequence[OracleFrame]], path: Path) -> Path:
    """Mean relative error against t on a log axis, with the oracle curve when given"""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(8, 4))
    if table:
        ax.semilogy([row[0] for row in table], [max(row[2], 1e-16) for row in table], label="ReProCS mean")
    if oracle:
        ax.semilogy([row.t for row in oracle], [max(row.rel_error, 1e-16) for row in oracle], "--", label="batch oracle")
    ax.set_xlabel("t")
    ax.set_ylabel("relative error")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    logger.info(f"Plot written to {path}")
    return path
