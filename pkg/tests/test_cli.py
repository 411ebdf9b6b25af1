"""
End-to-end tests for the run.py command line on a tiny synthetic dataset.
"""
import json
from pathlib import Path

import pytest

import run
from config.settings import Settings
from conftest import TINY_MATRIX
from constants import EXIT_OK, EXIT_USAGE, EXIT_ZFS_VIOLATION
from core.container import ServiceContainer
from services.results_store import ResultsStore
from services.trainer import CHECKPOINT_NAME

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def write_config(tmp_path: Path) -> Path:
    matrix = ";".join(",".join(str(v) for v in row) for row in TINY_MATRIX)
    path = tmp_path / "tiny.cfg"
    path.write_text(f"""
[data]
dataset = synthetic
data_root = {tmp_path / "data"}

[encoder]
family = basic
width = 0.125

[objective]
kind = fc
local_loss = ac

[training]
steps = 3
batch_size = 8
log_every = 1

[protonet]
steps = 5
batch_size = 16
embed_dim = 16
hidden_dim = 16

[probes]
steps = 5
batch_size = 8

[mine]
steps = 5
batch_size = 8
hidden_dim = 16

[tre]
steps = 20
draws = 2

[synthetic]
num_classes = 8
num_attributes = 6
images_per_class = 6
num_test_classes = 3
class_attribute_matrix = {matrix}

[output]
out_dir = {tmp_path / "runs"}
seed = 0
""")
    return path


@pytest.fixture
def cli(tmp_path, monkeypatch):
    """run.main against a results store and log file under tmp_path."""
    test_settings = Settings(results_dir=str(tmp_path / "results"), log_file=str(tmp_path / "zfs.log"))
    monkeypatch.setattr(run, "settings", test_settings)
    monkeypatch.setattr(run.container, "settings", test_settings)
    monkeypatch.setattr(run.container, "_started", False)
    monkeypatch.setattr(run.container, "results_store", None)
    monkeypatch.setattr(run.container, "_datasets", {})
    return run.main


@pytest.fixture
def config_path(tmp_path):
    return write_config(tmp_path)


def last_json(capsys):
    out = capsys.readouterr().out
    return json.loads(out[out.index("{"):])


class TestUsage:

    def test_help(self, cli):
        assert cli(["--help"]) == EXIT_OK

    def test_unknown_command(self, cli):
        assert cli(["fly"]) == EXIT_USAGE

    def test_grid_needs_spec(self, cli):
        assert cli(["grid"]) == EXIT_USAGE

    def test_bad_config(self, cli, tmp_path):
        assert cli(["train", "--config", str(tmp_path / "absent.cfg")]) == EXIT_USAGE

    def test_grid_dry_run(self, cli, capsys):
        assert cli(["grid", "--spec", str(CONFIGS / "grid_desk.cfg"), "--dry-run", "--device-budget", "desk"]) == 0
        summary = last_json(capsys)
        assert summary["cells"] == 24
        assert len(summary["commands"]) == 48
        assert all("--device-budget desk" in c for c in summary["commands"])


def test_container_start_is_idempotent(tmp_path):
    container = ServiceContainer(Settings(results_dir=str(tmp_path / "results"), num_threads=0))
    container.start()
    store = container.get_results_store()
    container.start()
    assert container.get_results_store() is store
    assert store.path == tmp_path / "results" / "results.tsv"


def test_device_budget_overrides_config(config_path):
    args = run.build_parser().parse_args(["train", "--config", str(config_path), "--device-budget", "desk"])
    config = run.load_config(args)
    assert config.encoder_width == 0.25
    assert config.training.steps == 300
    assert config.protonet.embed_dim == 16


class TestEndToEnd:

    def test_full_pipeline(self, cli, config_path, tmp_path, capsys):
        cfg = ["--config", str(config_path)]
        assert cli(["gen-synthetic", *cfg]) == EXIT_OK
        assert (tmp_path / "data" / "synthetic").is_dir()

        assert cli(["train", *cfg]) == EXIT_OK
        run_dir = tmp_path / "runs" / "synthetic-basic-fc-ac-s0"
        assert (run_dir / CHECKPOINT_NAME).exists()

        for command in (["eval-zsl"], ["probe-parts"], ["tre"], ["mi-train"], ["mi-viz", "--num-pairs", "2"]):
            assert cli([*command, *cfg]) == EXIT_OK, command
        assert (run_dir / "parts_f1.txt").exists()
        assert len(list((run_dir / "heatmaps").glob("*_overlay.png"))) == 2

        capsys.readouterr()
        assert cli(["report", "--table", "zsl", "--figures", str(tmp_path / "figures")]) == EXIT_OK
        summary = last_json(capsys)
        assert summary["records"] > 0
        assert (tmp_path / "figures" / "parts_vs_zsl.png").exists()

        metrics = set(ResultsStore(tmp_path / "results" / "results.tsv").read()["metric"])
        assert {"final_total_loss", "train_accuracy", "zsl_top1", "parts_f1", "tre_ratio", "tre_ratio_train"} <= metrics
        assert any(m.startswith("local_top1:") for m in metrics)

    def test_missing_checkpoint_is_a_usage_error(self, cli, config_path):
        assert cli(["eval-zsl", "--config", str(config_path), "--seed", "7"]) == EXIT_USAGE

    def test_foreign_init_weights_are_refused(self, cli, config_path, tmp_path):
        cfg = ["--config", str(config_path)]
        assert cli(["train", *cfg]) == EXIT_OK
        checkpoint = tmp_path / "runs" / "synthetic-basic-fc-ac-s0" / CHECKPOINT_NAME
        assert cli(["train", *cfg, "--seed", "1", "--init-checkpoint", str(checkpoint)]) == EXIT_ZFS_VIOLATION
        assert cli(["train", *cfg, "--seed", "1", "--init-checkpoint", str(checkpoint), "--no-zfs-strict"]) == EXIT_OK
