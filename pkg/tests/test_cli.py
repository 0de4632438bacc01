"""
Command line: verbs, flag overrides and exit codes.
"""

import json

import pytest

from reprocs.api.cli import EXIT_ASSUMPTIONS, EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, build_parser, main

CONFIG = """
[experiment]
mode = mc
trials = 2
cadence = 20

[signal]
n = 30
t_max = 120
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
noise = 0
"""


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "exp.ini"
    path.write_text(CONFIG)
    return path


def cli(config_file, out, *args):
    return main([args[0], "--config", str(config_file), "--out", str(out), *args[1:]])


class TestParser:
    def test_verbs(self):
        args = build_parser().parse_args(["ensemble", "--config", "x.ini", "--jobs", "3", "--mode", "rpca"])
        assert (args.verb, args.jobs, args.mode, args.strict_assumptions) == ("ensemble", 3, "rpca", False)

    def test_config_is_required(self):
        with pytest.raises(SystemExit):
            build_parser().parse_args(["run"])

    def test_unknown_mode(self):
        with pytest.raises(SystemExit):
            build_parser().parse_args(["run", "--config", "x.ini", "--mode", "batch"])


class TestConfigErrors:
    def test_missing_file(self, tmp_path):
        assert main(["run", "--config", str(tmp_path / "nope.ini")]) == EXIT_CONFIG

    def test_unknown_section(self, tmp_path):
        path = tmp_path / "bad.ini"
        path.write_text(CONFIG + "\n[video]\nfps = 30\n")
        assert main(["check", "--config", str(path)]) == EXIT_CONFIG

    def test_unknown_key(self, tmp_path):
        path = tmp_path / "bad.ini"
        path.write_text(CONFIG.replace("K = 2", "K = 2\nlearning_rate = 0.1"))
        assert main(["check", "--config", str(path)]) == EXIT_CONFIG

    def test_bad_value(self, tmp_path):
        path = tmp_path / "bad.ini"
        path.write_text(CONFIG.replace("n = 30", "n = thirty"))
        assert main(["run", "--config", str(path)]) == EXIT_CONFIG

    def test_rpca_override_without_thresholds(self, config_file, tmp_path):
        assert cli(config_file, tmp_path, "run", "--mode", "rpca") == EXIT_CONFIG


class TestVerbs:
    def test_generate(self, config_file, tmp_path):
        assert cli(config_file, tmp_path / "scenario", "generate", "--seed", "4") == EXIT_OK
        for name in ("L.mat", "M.mat", "P.mat", "supports.csv", "meta.json"):
            assert (tmp_path / "scenario" / name).exists(), name
        assert not (tmp_path / "scenario" / "X.mat").exists()
        assert json.loads((tmp_path / "scenario" / "meta.json").read_text())["seed"] == 4

    def test_check(self, config_file, tmp_path):
        assert cli(config_file, tmp_path, "check") == EXIT_OK
        assert (tmp_path / "assumptions.csv").exists()
        assert json.loads((tmp_path / "assumptions.json").read_text())["overall_pass"] is None

    def test_check_strict(self, config_file, tmp_path):
        assert cli(config_file, tmp_path, "check", "--strict-assumptions") == EXIT_ASSUMPTIONS
        assert json.loads((tmp_path / "assumptions.json").read_text())["overall_pass"] is False

    def test_run(self, config_file, tmp_path):
        assert cli(config_file, tmp_path, "run", "--trial", "1") == EXIT_OK
        assert json.loads((tmp_path / "trial_1.json").read_text())["failed"] is False

    def test_run_strict(self, config_file, tmp_path):
        assert cli(config_file, tmp_path, "run", "--strict-assumptions") == EXIT_ASSUMPTIONS

    def test_ensemble(self, config_file, tmp_path):
        assert cli(config_file, tmp_path, "ensemble", "--trials", "3", "--seed", "9") == EXIT_OK
        summary = json.loads((tmp_path / "summary.json").read_text())
        assert summary["trials"] == 3 and summary["failed_trials"] == 0
        assert json.loads((tmp_path / "trial_2.json").read_text())["seed"] == 11
        assert (tmp_path / "summary.csv").exists()

    def test_ensemble_all_failed(self, tmp_path):
        path = tmp_path / "exp.ini"
        path.write_text(CONFIG.replace("beta = 2", "beta = 2\ncompliance = true"))
        assert cli(path, tmp_path / "out", "ensemble") == EXIT_RUNTIME
        assert json.loads((tmp_path / "out" / "summary.json").read_text())["failed_trials"] == 2

    def test_oracle(self, config_file, tmp_path):
        assert cli(config_file, tmp_path, "oracle") == EXIT_OK
        lines = (tmp_path / "oracle.csv").read_text().splitlines()
        assert lines[0] == "t,rel_error,se" and len(lines) == 1 + 120 // 20

    def test_reruns_are_byte_identical(self, config_file, tmp_path):
        for out in ("a", "b"):
            assert cli(config_file, tmp_path / out, "ensemble") == EXIT_OK
        for name in ("summary.csv", "metrics_0.csv", "metrics_1.csv", "assumptions_0.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
