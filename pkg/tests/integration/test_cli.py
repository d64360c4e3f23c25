"""CLI commands through click's test runner."""

import logging

import pandas as pd
import pytest
from click.testing import CliRunner

from svtnet.cli import main

pytestmark = pytest.mark.integration


@pytest.fixture(autouse=True)
def reset_logging():
    yield
    logger = logging.getLogger("svtnet")
    for handler in logger.handlers:
        handler.close()
    logger.handlers = []


@pytest.fixture
def runner():
    return CliRunner()


@pytest.fixture
def fixture_yaml(fixtures_dir):
    return str(fixtures_dir / "experiment.yaml")


@pytest.fixture
def data_dir(runner, fixture_yaml, tmp_path):
    out = tmp_path / "data"
    result = runner.invoke(main, ["gen-synth", "--config", fixture_yaml, "--out", str(out)])
    assert result.exit_code == 0, result.output
    return out


def test_params_table(runner):
    result = runner.invoke(main, ["params", "--variant", "svt"])
    assert result.exit_code == 0, result.output
    assert "937,129" in result.output
    assert "148,032" in result.output


@pytest.mark.parametrize("variant,total", [("asvt", "408,737"), ("csvt", "789,097")])
def test_params_single_branch(runner, variant, total):
    result = runner.invoke(main, ["params", "--variant", variant])
    assert result.exit_code == 0, result.output
    assert total in result.output


def test_config_error_is_one_line(runner, fixtures_dir):
    result = runner.invoke(
        main, ["params", "--config", str(fixtures_dir / "invalid_config.yaml")]
    )
    assert result.exit_code == 1
    lines = [line for line in result.output.splitlines() if line.startswith("error:")]
    assert len(lines) == 1
    assert lines[0].startswith("error: ConfigError: Section 'model'")


def test_unknown_flag(runner):
    result = runner.invoke(main, ["params", "--layers", "3"])
    assert result.exit_code != 0


def test_gen_synth(data_dir):
    index = pd.read_csv(data_dir / "index.csv")
    assert len(index) == 12
    assert list(index.columns) == ["path", "northing", "easting", "split", "run"]


def test_gen_synth_refuses_non_empty_dir(runner, fixture_yaml, data_dir):
    result = runner.invoke(main, ["gen-synth", "--config", fixture_yaml, "--out", str(data_dir)])
    assert result.exit_code == 1
    assert "error: DatasetError: output directory is not empty" in result.output

    forced = runner.invoke(
        main, ["gen-synth", "--config", fixture_yaml, "--out", str(data_dir), "--force"]
    )
    assert forced.exit_code == 0, forced.output


def test_voxelize(runner, fixture_yaml, data_dir, tmp_path):
    cloud = data_dir / "clouds" / "scene0000_copy0.bin"
    out = tmp_path / "scene.vox"
    result = runner.invoke(
        main, ["voxelize", str(cloud), "--config", fixture_yaml, "--out", str(out)]
    )
    assert result.exit_code == 0, result.output
    assert "voxels=" in result.output
    rows = out.read_text().splitlines()
    assert rows and all(len(r.split()) == 3 for r in rows)


def test_embed_then_eval(runner, fixture_yaml, data_dir, tmp_path):
    for split in ("train", "test"):
        result = runner.invoke(
            main,
            [
                "embed",
                "--config",
                fixture_yaml,
                "--data",
                str(data_dir),
                "--split",
                split,
                "--out",
                str(tmp_path / f"{split}.csv"),
            ],
        )
        assert result.exit_code == 0, result.output

    result = runner.invoke(
        main,
        [
            "eval",
            "--config",
            fixture_yaml,
            "--db",
            str(tmp_path / "train.csv"),
            "--queries",
            str(tmp_path / "test.csv"),
            "--out",
            str(tmp_path / "report"),
        ],
    )
    assert result.exit_code == 0, result.output
    assert "fixture: recall@1=" in result.output
    curve = pd.read_csv(tmp_path / "report" / "recall_curve_fixture.csv")
    assert curve["n"].tolist() == [1, 2, 3, 4, 5]


def test_embed_is_deterministic(runner, fixture_yaml, data_dir, tmp_path):
    outputs = []
    for name in ("a.csv", "b.csv"):
        out = tmp_path / name
        args = ["embed", "--config", fixture_yaml, "--data", str(data_dir), "--out", str(out)]
        assert runner.invoke(main, args + ["--seed", "4"]).exit_code == 0
        outputs.append(out.read_bytes())
    assert outputs[0] == outputs[1]


def test_train_then_checkpoint_mismatch(runner, fixture_yaml, data_dir, tmp_path):
    run_dir = tmp_path / "run"
    result = runner.invoke(
        main,
        [
            "train",
            "--config",
            fixture_yaml,
            "--data",
            str(data_dir),
            "--out",
            str(run_dir),
            "--max-iterations",
            "1",
        ],
    )
    assert result.exit_code == 0, result.output
    model = run_dir / "model.svtn"
    assert model.exists()
    assert (run_dir / "epochs.csv").exists()

    mismatch = runner.invoke(
        main,
        [
            "embed",
            "--config",
            fixture_yaml,
            "--data",
            str(data_dir),
            "--checkpoint",
            str(model),
            "--variant",
            "csvt",
            "--out",
            str(tmp_path / "d.csv"),
        ],
    )
    assert mismatch.exit_code == 1
    assert "error: ConfigError: variant mismatch" in mismatch.output


def test_dump_tokens_needs_csvt_branch(runner, fixture_yaml, data_dir, tmp_path):
    cloud = str(data_dir / "clouds" / "scene0001_copy0.bin")
    result = runner.invoke(main, ["dump-tokens", cloud, "--config", fixture_yaml])
    assert result.exit_code == 1
    assert "no CSVT branch" in result.output

    out = tmp_path / "tokens.txt"
    result = runner.invoke(
        main, ["dump-tokens", cloud, "--config", fixture_yaml, "--variant", "svt", "--out", str(out)]
    )
    assert result.exit_code == 0, result.output
    assert all(len(line.split()) == 4 for line in out.read_text().splitlines())


def test_dump_attention(runner, fixture_yaml, data_dir, tmp_path):
    cloud = str(data_dir / "clouds" / "scene0002_copy1.bin")
    result = runner.invoke(
        main, ["dump-attention", cloud, "--config", fixture_yaml, "--out", str(tmp_path / "attn")]
    )
    assert result.exit_code == 0, result.output
    assert (tmp_path / "attn" / "attention.npy").exists()


def test_status_without_runs(runner, fixture_yaml, tmp_path):
    result = runner.invoke(main, ["status", "--config", fixture_yaml, "--out", str(tmp_path)])
    assert result.exit_code == 0
    assert "No previous pipeline runs found" in result.output
