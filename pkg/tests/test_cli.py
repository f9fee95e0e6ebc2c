import json
import shutil
import subprocess

import pytest

from fuia_lab.cli import main
from fuia_lab.pipeline import read_metrics, trial_seed

from conftest import EXAMPLE_INI, FAST, example_config


@pytest.fixture
def fast_ini(tmp_path):
    path = tmp_path / "fast.ini"
    path.write_text(example_config(tmp_path / "runs", FAST, {"experiment": {"trials": 1}}).to_ini())
    return path


class TestExitCodes:
    def test_pipeline_succeeds(self, fast_ini, tmp_path, capsys):
        out = tmp_path / "override"
        assert main(["pipeline", "--config", str(fast_ini), "--out", str(out)]) == 0
        assert (out / "metrics.csv").exists()
        assert not (tmp_path / "runs").exists()
        assert "median_psnr" in capsys.readouterr().out

    def test_stages_one_by_one(self, fast_ini, tmp_path):
        out = str(tmp_path / "staged")
        for stage in ("train", "unlearn", "attack", "report"):
            assert main([stage, "--config", str(fast_ini), "--out", out]) == 0

    def test_seed_override(self, fast_ini, tmp_path):
        out = tmp_path / "seeded"
        assert main(["pipeline", "--config", str(fast_ini), "--out", str(out), "--seed", "7"]) == 0
        assert {r["seed"] for r in read_metrics(out / "metrics.csv")} == {str(trial_seed(7, 0))}
        assert json.loads((out / "run.json").read_text())["config"]["experiment"]["seed"] == 7

    def test_missing_config(self, tmp_path, capsys):
        assert main(["train", "--config", str(tmp_path / "absent.ini")]) == 2
        assert "config error" in capsys.readouterr().err

    def test_invalid_config(self, tmp_path):
        bad = tmp_path / "bad.ini"
        bad.write_text("[unlearn]\nscenario = class\nmethod = approx\n")
        assert main(["pipeline", "--config", str(bad)]) == 2

    def test_unknown_command_is_usage_error(self, fast_ini):
        with pytest.raises(SystemExit) as info:
            main(["evaluate", "--config", str(fast_ini)])
        assert info.value.code == 2

    def test_attack_before_train(self, fast_ini, tmp_path, capsys):
        assert main(["attack", "--config", str(fast_ini), "--out", str(tmp_path / "empty")]) == 3
        assert "stage failure" in capsys.readouterr().err

    def test_stale_artifacts(self, fast_ini, tmp_path):
        out = str(tmp_path / "stale")
        assert main(["train", "--config", str(fast_ini), "--out", out]) == 0
        assert main(["unlearn", "--config", str(fast_ini), "--out", out, "--seed", "1"]) == 3


def test_console_script(tmp_path):
    exe = shutil.which("fuia-lab")
    if exe is None:
        pytest.skip("package is not installed")
    proc = subprocess.run([exe, "train", "--config", str(EXAMPLE_INI), "--out", str(tmp_path), "--seed", "x"],
                          capture_output=True, text=True)
    assert proc.returncode == 2 and "--seed" in proc.stderr
