import json
import subprocess
import sys

import numpy as np
import pytest
from PIL import Image

from tvae import cli
from tvae.config import load_run_config
from tvae.dataset_io import load_dataset, load_manifest, read_tensor
from tvae.errors import DivergenceError

SMALL = {
    "phantom": {"n_slices": 4},
    "data": {"n_subjects": 6},
    "model": {"base_channels": 4, "rnn_hidden": 16, "g_dim": 16, "z_dim": 4},
    "train": {"max_epochs": 1, "batch_size": 8},
    "eval": {"n_samples": 2},
}


@pytest.fixture(scope="session")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "small.json").write_text(json.dumps(SMALL))
    assert cli.main(["gen-data", "--config", str(root / "small.json"), "--out", str(root / "data")]) == 0
    return root


@pytest.fixture(scope="session")
def trained(workdir):
    out = workdir / "run"
    code = cli.main(["train", "--config", str(workdir / "small.json"), "--data", str(workdir / "data"), "--out", str(out)])
    assert code == 0
    return out


def test_gen_data_counts_and_layout(workdir, capsys):
    out = workdir / "again"
    assert cli.main(["gen-data", "--config", str(workdir / "small.json"), "--out", str(out)]) == 0
    assert capsys.readouterr().out.strip() == "4 train / 2 test"
    train = load_manifest(out / "train")
    assert len(train.subjects) == 4 and tuple(train.shape) == (4, 4, 100, 100)
    assert (out / "config.json").exists()


def test_gen_data_byte_identical(workdir):
    out = workdir / "again2"
    cli.main(["gen-data", "--config", str(workdir / "small.json"), "--out", str(out)])
    for f in sorted((workdir / "data").rglob("*")):
        if f.is_file():
            assert f.read_bytes() == (out / f.relative_to(workdir / "data")).read_bytes(), f.name


def test_gen_data_without_lesions(workdir):
    out = workdir / "clean"
    code = cli.main(
        ["gen-data", "--config", str(workdir / "small.json"), "--out", str(out), "--phantom.lesion_probability", "0"]
    )
    assert code == 0
    for split in ("train", "test"):
        for seq in load_dataset(out / split):
            assert not seq.has_tumor and not seq.lesion_mask.any()


def test_train_outputs(trained):
    log = [json.loads(l) for l in (trained / "log.jsonl").read_text().splitlines()]
    assert len(log) == 1
    assert (trained / "checkpoints" / "best" / "manifest.json").exists()
    assert (trained / "checkpoints" / "last" / "manifest.json").exists()
    assert (trained / "model" / "manifest.json").exists()
    echo = load_run_config(trained / "config.json")
    assert echo.model.base_channels == 4 and echo.train.max_epochs == 1


def test_train_volumes_uses_batch_four(tmp_path):
    cfg = {**SMALL, "phantom": {"n_slices": 16}, "data": {"n_subjects": 3, "split_fraction": 0.67}}
    cfg["model"] = {**SMALL["model"], "base_channels": 2, "conv_dims": 3}
    cfg["train"] = {"max_epochs": 1}
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    assert cli.main(["gen-data", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path / "d")]) == 0
    assert cli.main(["train", "--config", str(tmp_path / "c.json"), "--data", str(tmp_path / "d"), "--out", str(tmp_path / "r")]) == 0
    echo = json.loads((tmp_path / "r" / "config.json").read_text())
    assert echo["model"]["input_shape"] == [1, 16, 64, 64]
    assert echo["train"]["batch_size"] is None
    ck = json.loads((tmp_path / "r" / "checkpoints" / "last" / "manifest.json").read_text())
    assert ck["model_config"]["conv_dims"] == 3
    from tvae.train import TrainConfig

    assert TrainConfig(**ck["train_config"]).resolved_batch_size(3) == 4


def test_predict(workdir, trained, capsys):
    subject = load_manifest(workdir / "data" / "test").subjects[0].subject_id
    out = workdir / "pred"
    code = cli.main(
        ["predict", "--checkpoint", str(trained / "model"), "--data", str(workdir / "data"),
         "--subject", subject, "--out", str(out), "--samples", "3"]
    )
    assert code == 0
    meta = json.loads((out / f"{subject}_week4_pred.json").read_text())
    assert meta == {"shape": [4, 64, 64], "dtype": "f32le"}
    vol = read_tensor(out / f"{subject}_week4_pred.f32", meta["shape"])
    assert vol.min() > 0 and vol.max() < 1
    img = Image.open(out / f"{subject}_montage.png")
    assert img.mode == "L"
    # 4 weeks + prediction + 3 samples + uncertainty map per row
    assert img.size[0] == 9 * 66 + 2


def test_predict_unknown_subject(workdir, trained):
    code = cli.main(
        ["predict", "--checkpoint", str(trained / "model"), "--data", str(workdir / "data"), "--subject", "nobody", "--out", str(workdir / "x")]
    )
    assert code == cli.EXIT_DATA


def test_eval_model_and_baseline(workdir, trained):
    out = workdir / "ev"
    args = ["eval", "--config", str(workdir / "small.json"), "--data", str(workdir / "data")]
    assert cli.main(args + ["--checkpoint", str(trained / "model"), "--out", str(out)]) == 0
    rep = json.loads((out / "report.json").read_text())
    assert rep["n_samples"] == 2 and rep["averaging"] == "per-slice"
    assert rep["boundary_stability"] is not None and rep["diversity"] >= 0
    assert (out / "report.csv").read_text().startswith("Model,PSNR")
    assert cli.main(args + ["--baseline", "copy-last", "--out", str(workdir / "evb")]) == 0
    base = json.loads((workdir / "evb" / "report.json").read_text())
    assert np.isfinite(base["aggregate"]["psnr"])


def test_eval_lpips_plugin(workdir):
    out = workdir / "evl"
    code = cli.main(
        ["eval", "--data", str(workdir / "data"), "--baseline", "copy-last", "--out", str(out),
         "--lpips-plugin", "tests_plugins:constant_half", "--eval.n_samples", "1"]
    )
    assert code == 0
    assert json.loads((out / "report.json").read_text())["aggregate"]["lpips"] == 0.5


def test_eval_requires_checkpoint(workdir):
    assert cli.main(["eval", "--data", str(workdir / "data"), "--out", str(workdir / "e")]) == cli.EXIT_CONFIG


def test_ablation_grid_filter():
    assert len(cli.ablation_rows(cli.parse_grid(["conv_dims=3"]))) == 3
    assert len(cli.ablation_rows(cli.parse_grid(["recon_mode=edge_aware"]))) == 3
    assert len(cli.ablation_rows({})) == 5
    with pytest.raises(Exception):
        cli.parse_grid(["depth=3"])


def test_ablate_two_rows(workdir, capsys):
    out = workdir / "abl"
    code = cli.main(
        ["ablate", "--config", str(workdir / "small.json"), "--data", str(workdir / "data"), "--out", str(out),
         "--grid", "conv_dims=2", "--seeds", "0,1"]
    )
    assert code == 0
    rows = json.loads((out / "ablation.json").read_text())
    assert [r["model"] for r in rows] == ["T-VAE (2D) + MSE Loss", "T-VAE (2D) + Edge-Aware Loss"]
    assert all(len(r["per_seed"]) == 2 for r in rows)
    csv_lines = (out / "ablation.csv").read_text().splitlines()
    assert len(csv_lines) == 3


def test_exit_codes(workdir, monkeypatch):
    cfg = str(workdir / "small.json")
    assert cli.main(["gen-data", "--config", cfg, "--out", str(workdir / "z"), "--model.nonsense", "1"]) == cli.EXIT_CONFIG
    assert cli.main(["gen-data", "--config", cfg, "--out", str(workdir / "z"), "--phantom.lesion_probability", "2"]) == cli.EXIT_CONFIG
    assert cli.main(["train", "--config", cfg, "--data", str(workdir / "missing"), "--out", str(workdir / "z")]) == cli.EXIT_DATA

    def diverge(self, frames, noise=None):
        raise DivergenceError("loss is nan")

    monkeypatch.setattr(cli.Trainer, "train_step", diverge)
    assert cli.main(["train", "--config", cfg, "--data", str(workdir / "data"), "--out", str(workdir / "z")]) == cli.EXIT_DIVERGENCE


def test_seed_environment_variable(workdir, monkeypatch):
    monkeypatch.setenv("TVAE_SEED", "7")
    out = workdir / "seeded"
    assert cli.main(["train", "--config", str(workdir / "small.json"), "--data", str(workdir / "data"), "--out", str(out)]) == 0
    assert json.loads((out / "config.json").read_text())["train"]["seed"] == 7


def test_module_entry_point(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "tvae.cli", "gen-data", "--out", str(tmp_path), "--data.nope", "1"],
        capture_output=True, text=True,
    )
    assert proc.returncode == 2
    assert "config error" in proc.stderr
