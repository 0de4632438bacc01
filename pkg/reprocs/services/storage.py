"""
On-disk formats for reprocs.
Matrix text files, scenario directories, engine checkpoints, assumption
reports and metric CSVs.
"""

import csv
import json
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, List, Sequence, Union

import numpy as np

from ..core.engine import Phase, ReProCSState
from ..core.errors import DimensionMismatchError
from ..core.linalg import BasisMatrix
from ..models.schemas import (
    AssumptionReport,
    DetectionEvent,
    MetricsFrame,
    OutlierConfig,
    SignalModelConfig,
    SupportModelConfig,
)
from .generators import ScenarioTruth, SubspaceSegment, signal_variances

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

METRICS_COLUMNS = ["t", "rel_error", "se", "precision", "recall", "phase", "j_hat", "k", "l1_converged", "failed"]


def format_value(value: Any) -> str:
    """CSV cell text; floats keep 17 significant digits so runs compare byte for byte"""
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return f"{value:.17g}"
    return str(value)


def _parse_value(text: str) -> Any:
    if text == "":
        return None
    if text in ("true", "false"):
        return text == "true"
    return text


def write_json(data: Dict[str, Any], path: PathLike) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, indent=2, ensure_ascii=False)


def read_json(path: PathLike) -> Dict[str, Any]:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


# ==================== MATRIX TEXT FORMAT ====================


def write_matrix(path: PathLike, A: np.ndarray) -> None:
    """
    Write a real matrix as text: a `rows cols` header, then one row per line
    with %.17g values so the round trip is exact.
    """
    A = np.asarray(A, dtype=float)
    if A.ndim == 1:
        A = A.reshape(-1, 1)
    if A.ndim != 2:
        raise DimensionMismatchError(f"only 2-D matrices can be written, got shape {A.shape}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"{A.shape[0]} {A.shape[1]}\n")
        if A.shape[1] == 0:
            f.write("\n" * A.shape[0])
        else:
            np.savetxt(f, A, fmt="%.17g")


def read_matrix(path: PathLike) -> np.ndarray:
    """Read a matrix written by write_matrix (any whitespace layout is accepted)"""
    with open(path, "r", encoding="utf-8") as f:
        tokens = f.read().split()
    if len(tokens) < 2:
        raise DimensionMismatchError(f"{path}: missing `rows cols` header")
    rows, cols = int(tokens[0]), int(tokens[1])
    values = np.array(tokens[2:], dtype=float)
    if values.size != rows * cols:
        raise DimensionMismatchError(f"{path}: header says {rows}x{cols} but found {values.size} values")
    return values.reshape(rows, cols)


# ==================== SCENARIOS ====================


def write_supports(path: PathLike, supports: Sequence[np.ndarray]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["t", "indices"])
        for t, T in enumerate(supports, start=1):
            writer.writerow([t, ",".join(str(int(i)) for i in T)])


def read_supports(path: PathLike) -> List[np.ndarray]:
    supports = []
    with open(path, "r", encoding="utf-8", newline="") as f:
        for row in csv.DictReader(f):
            text = row["indices"]
            indices = [int(i) for i in text.split(",")] if text else []
            supports.append(np.array(indices, dtype=np.intp))
    return supports


def save_scenario(truth: ScenarioTruth, directory: PathLike) -> Path:
    """
    Write a scenario to a directory: L.mat, M.mat, X.mat (rpca), P.mat,
    supports.csv and meta.json with the configs and seed.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_matrix(directory / "L.mat", truth.L)
    write_matrix(directory / "M.mat", truth.M)
    if truth.X is not None:
        write_matrix(directory / "X.mat", truth.X)
    write_matrix(directory / "P.mat", truth.basis_full.data)
    write_supports(directory / "supports.csv", truth.supports)
    meta = {
        "seed": truth.seed,
        "mode": truth.mode,
        "signal": truth.signal_config.model_dump(mode="json"),
        "support": truth.support_config.model_dump(mode="json"),
        "outliers": truth.outlier_config.model_dump(mode="json"),
    }
    write_json(meta, directory / "meta.json")
    logger.info(f"Scenario written to {directory}")
    return directory


def load_scenario(directory: PathLike) -> ScenarioTruth:
    """Read a scenario directory written by save_scenario"""
    directory = Path(directory)
    meta = read_json(directory / "meta.json")
    signal = SignalModelConfig.model_validate(meta["signal"])
    L = read_matrix(directory / "L.mat")
    P = BasisMatrix(read_matrix(directory / "P.mat"))
    x_path = directory / "X.mat"
    X = read_matrix(x_path) if x_path.exists() else None

    segments = [SubspaceSegment(1, BasisMatrix(P.data[:, : signal.r0]))]
    rank = signal.r0
    for t_j, r_j in zip(signal.change_times, signal.r_new):
        rank += r_j
        segments.append(SubspaceSegment(t_j, BasisMatrix(P.data[:, :rank])))

    return ScenarioTruth(
        signal_config=signal,
        support_config=SupportModelConfig.model_validate(meta["support"]),
        outlier_config=OutlierConfig.model_validate(meta["outliers"]),
        mode=meta["mode"],
        seed=int(meta["seed"]),
        L=L,
        M=read_matrix(directory / "M.mat"),
        X=X,
        supports=read_supports(directory / "supports.csv"),
        segments=segments,
        variances=signal_variances(signal),
        coefficients=P.data.T @ L,
    )


# ==================== CHECKPOINTS ====================


def save_checkpoint(state: ReProCSState, directory: PathLike) -> Path:
    """Bases and buffer as matrix files, scalars as JSON"""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_matrix(directory / "P_star.mat", state.P_star.data)
    write_matrix(directory / "P_new.mat", state.P_new.data)
    write_matrix(directory / "buffer.mat", state.buffer)
    scalars = {
        "lambda_train_minus": state.lambda_train_minus,
        "alpha": state.alpha,
        "t_train": state.t_train,
        "phase": state.phase.value,
        "j_hat": state.j_hat,
        "k": state.k,
        "frame": state.frame,
        "t_hats": list(state.t_hats),
        "ranks": [list(r) for r in state.ranks],
    }
    write_json(scalars, directory / "state.json")
    return directory


def load_checkpoint(directory: PathLike) -> ReProCSState:
    directory = Path(directory)
    scalars = read_json(directory / "state.json")
    return ReProCSState(
        P_star=BasisMatrix(read_matrix(directory / "P_star.mat")),
        P_new=BasisMatrix(read_matrix(directory / "P_new.mat")),
        lambda_train_minus=float(scalars["lambda_train_minus"]),
        alpha=int(scalars["alpha"]),
        t_train=int(scalars["t_train"]),
        phase=Phase(scalars["phase"]),
        j_hat=int(scalars["j_hat"]),
        k=int(scalars["k"]),
        frame=int(scalars["frame"]),
        t_hats=[int(t) for t in scalars["t_hats"]],
        ranks=[[int(r) for r in ranks] for ranks in scalars["ranks"]],
        buffer=read_matrix(directory / "buffer.mat"),
    )


# ==================== REPORTS AND METRICS ====================


def write_report(report: AssumptionReport, directory: PathLike, stem: str = "assumptions") -> Path:
    """<stem>.json with the whole report and <stem>.csv with (check, measured, bound, pass)"""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_json(report.model_dump(mode="json"), directory / f"{stem}.json")
    path = directory / f"{stem}.csv"
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["check", "measured", "bound", "pass"])
        for check in report.checks:
            writer.writerow([check.name, format_value(check.measured), format_value(check.bound), format_value(check.passed)])
    return path


def write_metrics(rows: Iterable[MetricsFrame], path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(METRICS_COLUMNS)
        for row in rows:
            data = row.model_dump()
            writer.writerow([format_value(data[column]) for column in METRICS_COLUMNS])
    return path


def read_metrics(path: PathLike) -> List[MetricsFrame]:
    with open(path, "r", encoding="utf-8", newline="") as f:
        return [
            MetricsFrame.model_validate({key: _parse_value(value) for key, value in row.items()})
            for row in csv.DictReader(f)
        ]


def write_detections(events: Iterable[DetectionEvent], path: PathLike) -> Path:
    """One row per projection-PCA round: j, t_hat, k, rank"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["j", "t_hat", "k", "rank"])
        for event in events:
            if not event.ranks:
                writer.writerow([event.j, event.t_hat, "", ""])
            for k, rank in enumerate(event.ranks, start=1):
                writer.writerow([event.j, event.t_hat, k, rank])
    return path


def write_rows(path: PathLike, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(list(header))
        for row in rows:
            writer.writerow([format_value(value) for value in row])
    return path
