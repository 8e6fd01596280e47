import json
import os
import subprocess
import sys

import pytest

from dynssd import cli
from dynssd import config as C

TINY = """
seed = 3
[dataset]
image_size = 64
train_positive = 16
train_negative = 8
test_positive = 6
test_negative = 6
bands = 2
[proposer]
channels = [4, 8, 8, 8]
epochs = 2
[gan]
base_channels = 2
residual_blocks = 1
disc_channels = [4, 4]
patches = 16
epochs = 1
[classifier]
epochs = 2
[pipeline]
routing_threshold = 24
generator_input = 16
classifier_input = 32
[paths]
workdir = "work"
"""


@pytest.fixture
def tiny(tmp_path, monkeypatch):
    monkeypatch.delenv(cli.WORKDIR_ENV, raising=False)
    path = tmp_path / "tiny.toml"
    path.write_text(TINY)
    return path


class TestConfig:
    def test_default_round_trip(self):
        cfg = C.ExperimentConfig()
        assert C.loads(C.dumps(cfg)) == cfg

    def test_tiny_round_trip(self, tiny):
        cfg = C.load(tiny)
        assert C.loads(C.dumps(cfg)) == cfg
        assert cfg.proposer.channels == (4, 8, 8, 8)
        assert cfg.gan.epochs == 1 and cfg.classifier.lr == 1e-3

    @pytest.mark.parametrize(
        "text,key",
        [
            ("[proposer]\nfoo = 1\n", "proposer.foo"),
            ("bar = 1\n", "bar"),
            ("[pipeline]\nclassifier_input = 60\n", "pipeline"),
            ("[dataset]\nimage_size = \"big\"\n", "dataset.image_size"),
            ("[dataset]\nscale_factor = 1.5\n", "dataset.scale_factor"),
            ("[gan]\nlambda_adv = 0\nlambda_pixel = 0\nlambda_cycle = 0\n", "gan.lambda"),
            ("[classifier]\nhard_negatives = 1\n", "classifier.hard_negatives"),
            ("[pipeline]\nrouting_threshold = 200\ngenerator_input = 150\nclassifier_input = 300\n", "pipeline.routing_threshold"),
        ],
    )
    def test_rejections_name_the_key(self, text, key):
        with pytest.raises(C.ConfigError, match=key.replace(".", r"\.")):
            C.loads(text)

    def test_bad_toml(self):
        with pytest.raises(C.ConfigError, match="invalid TOML"):
            C.loads("[dataset\n")


class TestCommands:
    def test_help_lists_subcommands(self, capsys):
        with pytest.raises(SystemExit):
            cli.main(["--help"])
        out = capsys.readouterr().out
        for name in cli.COMMANDS:
            assert name in out

    def test_print_default_config(self, capsys):
        assert cli.main(["--print-default-config"]) == 0
        assert C.loads(capsys.readouterr().out) == C.ExperimentConfig()

    def test_evaluate_without_results(self, tiny):
        assert cli.main(["evaluate", "-c", str(tiny)]) == cli.EXIT_MISSING

    def test_stage_without_data(self, tiny, capsys):
        assert cli.main(["train-proposer", "-c", str(tiny)]) == cli.EXIT_MISSING
        assert "gen-data" in capsys.readouterr().err

    def test_config_error(self, tmp_path):
        bad = tmp_path / "bad.toml"
        bad.write_text("[nope]\n")
        assert cli.main(["gen-data", "-c", str(bad)]) == cli.EXIT_CONFIG

    def test_compare_bad_reference(self, tiny):
        assert cli.main(["gen-data", "-c", str(tiny)]) == 0
        assert cli.main(["compare", "-c", str(tiny), "test", "test75:bicubic"]) == cli.EXIT_CONFIG

    def test_corrupt_manifest_is_data_error(self, tiny):
        assert cli.main(["gen-data", "-c", str(tiny)]) == 0
        (tiny.parent / "work" / "data" / "train" / "manifest.json").write_text("{")
        assert cli.main(["train-proposer", "-c", str(tiny)]) == cli.EXIT_DATA

    def test_idempotent_and_force(self, tiny):
        assert cli.main(["gen-data", "-c", str(tiny)]) == 0
        marker = tiny.parent / "work" / "data" / cli.MARKER
        before = marker.read_bytes()
        assert cli.main(["gen-data", "-c", str(tiny)]) == 0
        assert marker.read_bytes() == before
        tiny.write_text(TINY.replace("seed = 3", "seed = 4"))
        assert cli.main(["gen-data", "-c", str(tiny)]) == cli.EXIT_CONFIG
        assert cli.main(["gen-data", "-c", str(tiny), "--force"]) == 0
        assert marker.read_bytes() != before

    def test_tampered_output_needs_force(self, tiny):
        assert cli.main(["gen-data", "-c", str(tiny)]) == 0
        frame = sorted((tiny.parent / "work" / "data" / "test").glob("*.ppm"))[0]
        frame.write_bytes(b"P6\n1 1\n255\n\0\0\0")
        assert cli.main(["gen-data", "-c", str(tiny)]) == cli.EXIT_CONFIG

    def test_workdir_env_override(self, tiny, tmp_path, monkeypatch):
        monkeypatch.setenv(cli.WORKDIR_ENV, str(tmp_path / "elsewhere"))
        assert cli.main(["gen-data", "-c", str(tiny)]) == 0
        assert (tmp_path / "elsewhere" / "data" / cli.MARKER).exists()
        assert not (tiny.parent / "work").exists()

    def test_lock_refuses_second_process(self, tiny):
        wd = cli.Workdir(tiny.parent / "work")
        with wd.lock():
            assert cli.main(["gen-data", "-c", str(tiny)]) == cli.EXIT_DATA

    def test_layout_version_checked(self, tiny):
        work = tiny.parent / "work"
        work.mkdir()
        (work / "layout.json").write_text(json.dumps({"layout_version": 99}))
        assert cli.main(["gen-data", "-c", str(tiny)]) == cli.EXIT_DATA


class TestAll:
    def test_chain_and_ablation_table(self, tiny, capsys):
        assert cli.main(["all", "-c", str(tiny)]) == 0
        work = tiny.parent / "work"
        header = (work / "ablate" / "ablation.txt").read_text().splitlines()[0]
        assert header.split() == "Upsampling Method Sensitivity Specificity TP FP TN FN".split()
        rows = (work / "ablate" / "ablation.txt").read_text().splitlines()[2:]
        assert [r.split("  ")[0] for r in rows] == ["Generator", "Bicubic Interpolation"]
        for stage in ("data", "proposer", "gan", "classifier", "run-test-generator", "eval-test-generator", "ablate"):
            assert (work / stage / cli.MARKER).exists()
        assert cli.main(["compare", "-c", str(tiny), "test75:bicubic", "test75:generator"]) == 0
        assert "Delta sens" in capsys.readouterr().out

    def test_console_script_entry(self, tiny):
        env = {**os.environ, cli.WORKDIR_ENV: str(tiny.parent / "w")}
        proc = subprocess.run(
            [sys.executable, "-m", "dynssd.cli", "evaluate", "-c", str(tiny)], capture_output=True, text=True, env=env
        )
        assert proc.returncode == 3
        assert "run --split test" in proc.stderr
