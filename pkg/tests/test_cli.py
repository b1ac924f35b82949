import numpy as np
import pytest

from spikedepth.cli import ConfigError, load_config, main
from spikedepth.synthdata import read_depth_raster


def test_load_config_defaults_file_and_overrides(tmp_path):
    cfg_file = tmp_path / "run.cfg"
    cfg_file.write_text(
        "# comment line\n"
        "epochs = 5\n"
        "lr = 1e-3   # inline comment\n"
        "spike_penalty = true\n"
        "\n")
    cfg = load_config(str(cfg_file), {"epochs": 7, "seed": None})
    assert cfg["epochs"] == 7          # flag beats file
    assert cfg["lr"] == 1e-3           # file beats default
    assert cfg["spike_penalty"] is True
    assert cfg["lambda_smooth"] == 0.5  # untouched default


def test_load_config_rejects_bad_input(tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("no_such_key = 1\n")
    with pytest.raises(ConfigError, match="unknown config key"):
        load_config(str(bad), {})
    bad.write_text("epochs\n")
    with pytest.raises(ConfigError, match="key = value"):
        load_config(str(bad), {})
    bad.write_text("epochs = soon\n")
    with pytest.raises(ConfigError):
        load_config(str(bad), {})
    bad.write_text("spike_penalty = maybe\n")
    with pytest.raises(ConfigError, match="boolean"):
        load_config(str(bad), {})


def test_synth_gen_writes_dataset_and_config_echo(tmp_path, capsys):
    out = tmp_path / "ds"
    rc = main(["synth-gen", "--out", str(out), "--count", "3",
               "--height", "16", "--width", "16", "--seed", "5"])
    assert rc == 0
    assert (out / "manifest.json").exists()
    echo = (out / "config_used.txt").read_text()
    assert "count = 3" in echo and "seed = 5" in echo


def test_missing_required_option_exits_1(capsys):
    assert main(["synth-gen"]) == 1
    assert "--out" in capsys.readouterr().err
    assert main(["train", "--out", "/tmp/x"]) == 1


def test_gradcheck_prints_pass_lines(capsys):
    rc = main(["gradcheck", "--seed", "0"])
    out = capsys.readouterr().out
    assert rc == 0
    assert "PASS" in out and "FAIL" not in out
    assert "conv2d_input" in out


@pytest.fixture(scope="module")
def cli_run(tmp_path_factory):
    """synth-gen + 1-epoch train, shared by the command round-trip tests."""
    root = tmp_path_factory.mktemp("cli")
    ds = root / "ds"
    run = root / "run"
    assert main(["synth-gen", "--out", str(ds), "--count", "4",
                 "--height", "32", "--width", "32", "--seed", "2"]) == 0
    assert main(["train", "--data", str(ds), "--out", str(run),
                 "--epochs", "1", "--n-frames", "2",
                 "--base-channels", "4", "--seed", "0"]) == 0
    return ds, run


def test_train_outputs(cli_run):
    ds, run = cli_run
    assert (run / "best.ssk").exists()
    assert (run / "last.ssk").exists()
    assert (run / "train_log.csv").exists()
    assert "epochs = 1" in (run / "config_used.txt").read_text()


def test_eval_and_profile_reports(cli_run, tmp_path, capsys):
    ds, run = cli_run
    out = tmp_path / "report"
    rc = main(["eval", "--data", str(ds), "--checkpoint",
               str(run / "best.ssk"), "--n-frames", "2", "--out", str(out)])
    assert rc == 0
    printed = capsys.readouterr().out
    assert "test MDE" in printed and "Decoder Mean" in printed
    assert (out / "report.csv").exists()
    assert "Model MDE [cm]" in (out / "report.txt").read_text()
    assert main(["profile", "--data", str(ds), "--checkpoint",
                 str(run / "best.ssk"), "--n-frames", "2"]) == 0


def test_train_fine_tune_from_checkpoint(cli_run, tmp_path):
    ds, run = cli_run
    out = tmp_path / "finetune"
    rc = main(["train", "--data", str(ds), "--out", str(out),
               "--checkpoint", str(run / "best.ssk"), "--epochs", "1",
               "--n-frames", "2", "--spike-penalty",
               "--lambda-spike", "0.05", "--seed", "1"])
    assert rc == 0
    assert (out / "last.ssk").exists()


def test_infer_writes_predictions(cli_run, tmp_path):
    ds, run = cli_run
    out = tmp_path / "pred"
    left = next(iter(sorted(ds.glob("*_left.evt"))))
    right = ds / left.name.replace("_left", "_right")
    rc = main(["infer", "--checkpoint", str(run / "best.ssk"),
               "--left", str(left), "--right", str(right),
               "--n-frames", "2", "--out", str(out)])
    assert rc == 0
    stem = left.stem
    assert (out / f"pred_{stem}.pgm").read_bytes().startswith(b"P5\n")
    pred = read_depth_raster(out / f"pred_{stem}.f32")
    assert pred.depth.shape == (32, 32)
    assert np.all(np.isfinite(pred.depth))


def test_infer_mode_mismatch_exits_1(cli_run, tmp_path, capsys):
    ds, run = cli_run
    left = next(iter(sorted(ds.glob("*_left.evt"))))
    rc = main(["infer", "--checkpoint", str(run / "best.ssk"),
               "--left", str(left), "--n-frames", "2",
               "--out", str(tmp_path)])
    assert rc == 1
    assert "--right" in capsys.readouterr().err


def test_unknown_checkpoint_path_exits_1(tmp_path, capsys):
    rc = main(["eval", "--data", str(tmp_path), "--checkpoint",
               str(tmp_path / "none.ssk")])
    assert rc == 1
