import json

import pytest

from fuia_lab.config import Config, load_config, parse_text
from fuia_lab.errors import ConfigError

from conftest import EXAMPLE_INI

MINIMAL = """
[experiment]
id = tiny
seed = 4

[unlearn]
scenario = client
method = eraser
"""


class TestParsing:
    def test_example_loads(self):
        cfg = load_config(EXAMPLE_INI)
        assert cfg.experiment.trials == 10
        assert cfg.data.shape == (1, 8, 8)
        assert cfg.model.hidden == (32,)
        assert cfg.attack.alpha == 1e-4
        assert cfg.defense.kind == "none"

    def test_defaults_fill_missing_sections(self):
        cfg = parse_text(MINIMAL)
        assert cfg.experiment.seed == 4
        assert cfg.fl.participation == 0.5 and cfg.fl.local_epochs == 3
        assert cfg.attack.gamma == 0.1 and cfg.attack.alpha == 1e-2 and cfg.attack.beta == 0.5

    def test_json_equivalent(self):
        ini = parse_text(MINIMAL)
        js = parse_text(json.dumps({"experiment": {"id": "tiny", "seed": 4},
                                    "unlearn": {"scenario": "client", "method": "eraser"}}))
        assert ini == js

    def test_ini_round_trip(self):
        cfg = load_config(EXAMPLE_INI)
        assert parse_text(cfg.to_ini()) == cfg

    def test_overrides(self):
        cfg = load_config(EXAMPLE_INI).with_overrides(seed=9, out="elsewhere")
        assert cfg.experiment.seed == 9 and cfg.experiment.out == "elsewhere"

    def test_lists(self):
        cfg = parse_text("[model]\nhidden = 16, 8\n[defense]\nkind = prune\np = 0.5\nphases = unlearning\n")
        assert cfg.model.hidden == (16, 8)
        assert cfg.defense_config().phases == ("unlearning",)


class TestErrors:
    @pytest.mark.parametrize("text, match", [
        ("[experiment]\ntrials = 0\n", "trials"),
        ("[unlearn]\nscenario = class\nmethod = approx\n", "does not handle"),
        ("[unlearn]\nscenario = sample\nmethod = eraser\n", "does not handle"),
        ("[model]\nactivation = relu\n", "smooth"),
        ("[fl]\nparticipation = 0\n", "participation"),
        ("[fl]\nrounds = three\n", "cannot read"),
        ("[attack]\ngamma = 2\n", "gamma"),
        ("[defense]\nkind = prune\np = 1.5\n", "p must"),
        ("[unlearn]\nforget_classes = 10\n", "forget_classes"),
        ("[widgets]\nx = 1\n", "unknown section"),
        ("[fl]\nspeed = 3\n", "unknown key"),
        ("[data]\nsource = pnm\npath = /nonexistent/images\n", "does not exist"),
        ("[data]\nsource = idx\n", "path is required"),
        ("{not json", "invalid JSON"),
        ("no sections here", "invalid configuration"),
    ])
    def test_rejected(self, text, match):
        with pytest.raises(ConfigError, match=match):
            parse_text(text)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="cannot read"):
            load_config(tmp_path / "absent.ini")


class TestStageHash:
    def test_only_consumed_sections_matter(self):
        cfg = Config()
        other = cfg.updated({"attack": {"iterations": 7}})
        assert cfg.stage_hash("train") == other.stage_hash("train")
        assert cfg.stage_hash("unlearn") == other.stage_hash("unlearn")
        assert cfg.stage_hash("attack") != other.stage_hash("attack")

    def test_seed_matters(self):
        cfg = Config()
        assert cfg.stage_hash("train") != cfg.with_overrides(seed=1).stage_hash("train")

    def test_output_directory_does_not(self):
        cfg = Config()
        assert cfg.stage_hash("attack") == cfg.with_overrides(out="x").stage_hash("attack")
