"""
Experiment harness: seeded trials, scoring, ensemble aggregation and the batch oracle.
"""

import csv
import json
from pathlib import Path

import numpy as np
import pytest

from conftest import random_basis
from reprocs.core.errors import ConfigError
from reprocs.models.schemas import DetectionEvent, MetricsFrame, TrialSummary
from reprocs.services.config import build_config, load_experiment_config, parse_config_text
from reprocs.services.harness import (
    SUMMARY_COLUMNS,
    aggregate_metrics,
    baseline_oracle,
    make_scenario,
    match_detections,
    plot_errors,
    relative_error,
    resolve_engine_params,
    run_ensemble,
    run_oracle,
    run_trial,
    summarize_trials,
    support_scores,
)
from reprocs.services.storage import read_metrics

STATIC_MC = """
[experiment]
mode = mc
trials = 2
base_seed = 11
cadence = 10

[signal]
n = 40
t_max = 200
t_train = 20
r0 = 2

[support]
s = 2
rho = 1
beta = 2

[engine]
alpha = 20
K = 2

[init]
mode = perturbed
noise = 0
"""

ONE_CHANGE_RPCA = """
[experiment]
mode = rpca
base_seed = 3

[signal]
n = 40
t_max = 400
t_train = 20
r0 = 2
change_times = 200
r_new = 1
v = 1.0005
d = 200

[support]
s = 2
rho = 1
beta = 2

[engine]
alpha = 20
xi = 2.0
omega = 1.0
zeta = 1e-6
"""


def config(text, **overrides):
    return build_config(parse_config_text(text), overrides)


def read_csv(path):
    with open(path, newline="") as f:
        return list(csv.reader(f))


class TestScoring:
    def test_relative_error(self):
        assert relative_error(np.array([3.0, 4.0]), np.array([3.0, 4.0])) == 0.0
        assert relative_error(np.array([3.0, 4.0]), np.zeros(2)) == pytest.approx(1.0)

    def test_relative_error_zero_truth_is_absolute(self):
        assert relative_error(np.zeros(2), np.array([3.0, 4.0])) == pytest.approx(5.0)

    def test_support_scores(self):
        assert support_scores(np.array([1, 2, 3, 4]), np.array([2, 4])) == (0.5, 1.0)
        assert support_scores(np.array([], dtype=int), np.array([2])) == (1.0, 0.0)
        assert support_scores(np.array([], dtype=int), np.array([], dtype=int)) == (1.0, 1.0)

    def test_match_detections(self):
        events = [DetectionEvent(j=1, t_hat=90), DetectionEvent(j=2, t_hat=130), DetectionEvent(j=3, t_hat=900)]
        matched, unmatched = match_detections(events, [100, 600], alpha=50)
        assert matched[0].j == 2 and matched[1] is None
        assert unmatched == 2

    def test_match_window_is_inclusive(self):
        matched, unmatched = match_detections([DetectionEvent(j=1, t_hat=200)], [100], alpha=50)
        assert matched[0].t_hat == 200 and unmatched == 0


class TestResolveEngineParams:
    def test_explicit_values_win(self):
        cfg = config(STATIC_MC)
        params, theorem = resolve_engine_params(cfg, make_scenario(cfg, 11))
        assert (params.alpha, params.K) == (20, 2)
        assert params.xi is None and params.omega is None
        assert theorem is None

    def test_missing_k_derived_from_zeta(self):
        cfg = config(ONE_CHANGE_RPCA)
        params, theorem = resolve_engine_params(cfg, make_scenario(cfg, 3))
        assert params.K == 84
        assert (params.alpha, params.xi, params.omega) == (20, 2.0, 1.0)
        assert theorem.engine.K == 84 and theorem.zeta == 1e-6

    def test_missing_values_without_zeta(self):
        cfg = config(STATIC_MC)
        cfg = cfg.model_copy(update={"engine": cfg.engine.model_copy(update={"K": None})})
        with pytest.raises(ConfigError):
            resolve_engine_params(cfg, make_scenario(cfg, 11))

    def test_validator_rejects_incomplete_engine(self):
        with pytest.raises(ConfigError):
            config(STATIC_MC.replace("K = 2\n", ""))


class TestRunTrial:
    def test_static_noiseless_mc_is_exact(self):
        result = run_trial(config(STATIC_MC), 0)
        summary = result.summary
        assert not summary.failed, summary.error
        assert summary.seed == 11 and summary.alpha == 20
        assert summary.frames == 180
        assert [row.t for row in result.metrics] == list(range(30, 201, 10))
        assert all(row.rel_error <= 1e-8 for row in result.metrics)
        assert all(row.se <= 1e-8 for row in result.metrics)
        assert all(row.phase == "detect" and row.precision is None for row in result.metrics)
        assert result.detections == [] and summary.detection_delays == []
        assert summary.exact_support is None
        assert summary.settled_errors == []
        assert summary.assumptions_passed is None

    def test_cadence_over_long_run(self):
        text = STATIC_MC.replace("t_max = 200", "t_max = 15000").replace("cadence = 10", "cadence = 300")
        result = run_trial(config(text), 0)
        assert not result.summary.failed, result.summary.error
        assert len(result.metrics) == 50
        assert [row.t for row in result.metrics] == list(range(300, 15001, 300))

    def test_outputs_written(self, tmp_path):
        run_trial(config(STATIC_MC), 1, tmp_path)
        for name in ("metrics_1.csv", "detections_1.csv", "assumptions_1.csv", "assumptions_1.json", "trial_1.json"):
            assert (tmp_path / name).exists(), name
        data = json.loads((tmp_path / "trial_1.json").read_text())
        assert data["trial"] == 1 and data["seed"] == 12 and data["failed"] is False
        assert read_csv(tmp_path / "detections_1.csv") == [["j", "t_hat", "k", "rank"]]

    def test_byte_identical_reruns(self, tmp_path):
        cfg = config(STATIC_MC)
        first, second = run_trial(cfg, 0, tmp_path / "a"), run_trial(cfg, 0, tmp_path / "b")
        assert first.metrics == second.metrics
        for name in ("metrics_0.csv", "detections_0.csv", "assumptions_0.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_strict_assumption_failure_fails_trial(self):
        result = run_trial(config(STATIC_MC, strict_assumptions=True), 0)
        assert result.summary.failed
        assert result.summary.assumptions_passed is False
        assert "assumptions failed" in result.summary.error
        assert result.metrics == []

    def test_config_error_propagates(self):
        cfg = config(STATIC_MC)
        cfg = cfg.model_copy(update={"engine": cfg.engine.model_copy(update={"alpha": None})})
        with pytest.raises(ConfigError):
            run_trial(cfg, 0)


class TestAggregation:
    def test_summary_csv_recomputes_from_trial_files(self, tmp_path):
        cfg = config(STATIC_MC)
        summary, results = run_ensemble(cfg, tmp_path)
        assert summary.trials == 2 and summary.failed_trials == 0
        per_trial = [read_metrics(tmp_path / f"metrics_{i}.csv") for i in range(2)]
        assert per_trial == [r.metrics for r in results]

        rows = read_csv(tmp_path / "summary.csv")
        assert rows[0] == SUMMARY_COLUMNS
        expected = aggregate_metrics(per_trial)
        assert len(rows) - 1 == len(expected)
        for row, want in zip(rows[1:], expected):
            assert [float(cell) for cell in row] == [float(value) for value in want]

        data = json.loads((tmp_path / "summary.json").read_text())
        assert data["trials"] == 2 and data["exact_support_rate"] is None

    def test_aggregate_skips_missing_frames(self):
        a = [MetricsFrame(t=10, rel_error=0.1, se=0.2, phase="detect", j_hat=0, k=0)]
        b = [
            MetricsFrame(t=10, rel_error=0.3, se=0.4, phase="detect", j_hat=0, k=0),
            MetricsFrame(t=20, rel_error=0.5, se=0.0, phase="detect", j_hat=0, k=0),
        ]
        table = aggregate_metrics([a, b])
        assert table[0][:3] == [10, 2, pytest.approx(0.2)]
        assert table[0][4] == 0.3 and table[0][7] == 0.4
        assert table[1] == [20, 1, 0.5, 0.5, 0.5, 0.0, 0.0, 0.0]

    def test_summarize_trials(self):
        summaries = [
            TrialSummary(
                trial=0,
                seed=0,
                exact_support=True,
                detection_delays=[10, 60],
                ranks_correct=True,
                se_monotone=True,
                settled_errors=[1e-3, 2e-3],
            ),
            TrialSummary(
                trial=1,
                seed=1,
                exact_support=False,
                detection_delays=[20, None],
                false_detections=1,
                ranks_correct=False,
                se_monotone=True,
                settled_errors=[3e-3, None],
            ),
            TrialSummary(trial=2, seed=2, failed=True, error="SingularSystemError: x"),
        ]
        summary = summarize_trials(summaries, alpha=100)
        assert summary.trials == 3 and summary.failed_trials == 1
        assert summary.delay_histogram == {"0-24": 2, "50-74": 1, "missed": 1}
        assert list(summary.delay_histogram) == ["0-24", "50-74", "missed"]
        assert summary.exact_support_rate == 0.5
        assert summary.detection_in_bound_rate == 0.5
        assert summary.rank_correct_rate == 0.5
        assert summary.se_monotone_rate == 1.0
        assert summary.false_detections == 1
        assert summary.settled_error_mean == [pytest.approx(2e-3), 2e-3]

    def test_single_trial_summary_is_the_trial(self):
        trial = TrialSummary(
            trial=0,
            seed=5,
            exact_support=True,
            detection_delays=[30],
            false_detections=2,
            ranks_correct=False,
            se_monotone=True,
            settled_errors=[4e-3],
        )
        summary = summarize_trials([trial], alpha=100)
        assert summary.trials == 1 and summary.failed_trials == 0
        assert summary.exact_support_rate == 1.0
        assert summary.rank_correct_rate == 0.0
        assert summary.se_monotone_rate == 1.0
        assert summary.detection_in_bound_rate == 0.0
        assert summary.false_detections == 2
        assert summary.delay_histogram == {"25-49": 1}
        assert summary.settled_error_mean == [4e-3]

    def test_single_trial_ensemble_matches_trial_files(self, tmp_path):
        summary, results = run_ensemble(config(STATIC_MC, trials=1), tmp_path)
        (result,) = results
        trial = result.summary
        assert summary.trials == 1 and summary.failed_trials == 0
        assert summary.false_detections == trial.false_detections
        assert summary.settled_error_mean == trial.settled_errors
        for field, value in (
            ("exact_support_rate", trial.exact_support),
            ("rank_correct_rate", trial.ranks_correct),
            ("se_monotone_rate", trial.se_monotone),
        ):
            assert getattr(summary, field) == (None if value is None else float(value))

        rows = read_csv(tmp_path / "summary.csv")[1:]
        assert len(rows) == len(result.metrics)
        for row, metric in zip(rows, result.metrics):
            values = [float(cell) for cell in row]
            assert values[:2] == [metric.t, 1.0]
            assert values[2:5] == [metric.rel_error] * 3
            assert values[5:8] == [metric.se] * 3

    def test_plot_and_oracle_outputs(self, tmp_path):
        cfg = config(STATIC_MC, plot=True, oracle=True, trials=1)
        run_ensemble(cfg, tmp_path)
        rows = read_csv(tmp_path / "oracle.csv")
        assert rows[0] == ["t", "rel_error", "se"]
        assert [int(row[0]) for row in rows[1:]] == list(range(10, 201, 10))
        svg = (tmp_path / "errors.svg").read_text()
        assert "<svg" in svg

    def test_plot_without_oracle(self, tmp_path):
        table = [[10, 1, 0.5, 0.5, 0.5, 0.1, 0.1, 0.1], [20, 1, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]]
        path = plot_errors(table, None, tmp_path / "errors.svg")
        assert path.read_text().lstrip().startswith("<?xml")


class TestOracle:
    def test_noiseless_full_observations(self, rng):
        P = random_basis(rng, 16, 2)
        L = P.data @ rng.standard_normal((2, 60))
        rows = baseline_oracle(L, L, [np.array([], dtype=int)] * 60, "rpca", 2, 10, [P] * 60)
        assert [row.t for row in rows] == list(range(1, 61))
        assert max(row.rel_error for row in rows) <= 1e-10
        assert max(row.se for row in rows) <= 1e-8

    def test_mc_beats_zero_fill(self):
        rng = np.random.default_rng(77)
        n, t_max = 32, 200
        P = random_basis(rng, n, 2)
        L = P.data @ (5.0 * rng.standard_normal((2, t_max)))
        supports = [np.sort(rng.choice(n, size=n // 2, replace=False)) for _ in range(t_max)]
        M = L.copy()
        for t, T in enumerate(supports):
            M[T, t] = 0.0
        rows = baseline_oracle(L, M, supports, "mc", 2, 20)
        oracle = np.mean([row.rel_error for row in rows])
        zero_fill = np.mean([relative_error(L[:, t], M[:, t]) for t in range(t_max)])
        assert oracle < zero_fill

    def test_final_window_se_is_smallest(self):
        rng = np.random.default_rng(5)
        P = random_basis(rng, 24, 2)
        L = P.data @ rng.standard_normal((2, 100))
        M = L + 0.3 * rng.standard_normal(L.shape)
        rows = baseline_oracle(L, M, [np.array([], dtype=int)] * 100, "rpca", 2, 20, [P] * 100)
        window_se = [rows[end - 1].se for end in range(20, 101, 20)]
        assert window_se[-1] <= min(window_se)

    @pytest.mark.parametrize("rank", [0, 17])
    def test_rank_range(self, rank):
        with pytest.raises(ValueError):
            baseline_oracle(np.zeros((16, 4)), np.zeros((16, 4)), [[]] * 4, "rpca", rank, 2)

    def test_run_oracle_file(self, tmp_path):
        rows = run_oracle(config(STATIC_MC), 0, tmp_path)
        assert all(row.t % 10 == 0 for row in rows)
        assert len(read_csv(tmp_path / "oracle.csv")) == len(rows) + 1


class TestShippedConfigs:
    CONFIGS = Path(__file__).parent.parent / "configs"

    def test_moving_object_settings(self):
        cfg = load_experiment_config(self.CONFIGS / "moving_object.ini")
        assert (cfg.signal.n, cfg.signal.t_max, cfg.signal.t_train, cfg.signal.r0) == (256, 15000, 200, 10)
        assert cfg.signal.change_times == [600, 8000]
        assert (cfg.support.s, cfg.support.rho, cfg.support.beta) == (20, 2, 18)
        assert (cfg.engine.alpha, cfg.engine.K) == (800, 6)
        assert cfg.cadence == 300 and cfg.trials == 20
        assert 15000 // cfg.cadence == 50

    def test_smoke_loads(self):
        assert load_experiment_config(self.CONFIGS / "smoke.ini").trials >= 1


@pytest.mark.slow
class TestMovingObjectAcceptance:
    """The n = 256 moving-object simulation; each trial takes about a minute"""

    @pytest.fixture(scope="class")
    def moving_object(self):
        return load_experiment_config(Path(__file__).parent.parent / "configs" / "moving_object.ini")

    def check(self, cfg, out_dir):
        summary, results = run_ensemble(cfg.model_copy(update={"plot": False}), out_dir)
        assert summary.failed_trials == 0
        for result in results:
            assert all(delay is not None and 0 <= delay <= 1600 for delay in result.summary.detection_delays)
            assert result.summary.false_detections == 0
            assert all(err is not None and err <= 1e-2 for err in result.summary.settled_errors)
            assert result.summary.runtime_seconds <= 120
        assert summary.rank_correct_rate >= 0.95
        assert summary.se_monotone_rate >= 0.9
        return summary

    def test_rpca(self, moving_object, tmp_path):
        summary = self.check(moving_object, tmp_path)
        assert summary.exact_support_rate >= 0.95

    def test_mc_parity(self, moving_object, tmp_path):
        self.check(moving_object.model_copy(update={"mode": "mc"}), tmp_path)
