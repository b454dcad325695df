import json

import pytest

from gradflip import config as cf
from gradflip.cli import main

MINI_CFG = """
# mini experiment for CLI tests
seed = 99
gen.n_speakers = 3
gen.utterances_per_speaker = 10
gen.alphabet_size = 4
gen.dim = 6
gen.semi_speakers = 1
gen.offset_scale = 1.0
gen.noise_sigma = 0.15
gen.train_frac = 0.6
gen.dev_frac = 0.2
model.n_layers = 3
model.channels = 6
model.kernel_width = 3
model.branch_channels = 4
model.branch_kernel = 3
train.lr_main = 0.05
train.lr_speaker = 0.02
train.batch_size = 4
train.epochs_a = 1
train.epochs_b = 1
train.epochs_c = 1
probe.epochs = 1
"""


@pytest.fixture()
def mini(tmp_path):
    cfg_path = tmp_path / "cfg.txt"
    cfg_path.write_text(MINI_CFG)
    data_dir = tmp_path / "data"
    rc = main(["gen-data", "--config", str(cfg_path), "--out", str(data_dir)])
    assert rc == 0
    return cfg_path, data_dir, tmp_path


def test_gen_data_writes_files_and_manifest(mini):
    _, data_dir, _ = mini
    for part in ("train", "dev", "test", "semi"):
        assert (data_dir / f"synth.{part}").exists()
    manifest = json.loads((data_dir / "manifest.json").read_text())
    assert manifest["seed"] == 99
    assert manifest["counts"]["train"] == 18  # 3 speakers x floor(0.6 * 10)
    assert manifest["counts"]["semi"] == 10
    assert (data_dir / "config.resolved").exists()


def test_gen_data_rerun_identical_bytes(mini, tmp_path):
    cfg_path, data_dir, _ = mini
    other = tmp_path / "data2"
    assert main(["gen-data", "--config", str(cfg_path), "--out", str(other)]) == 0
    for name in ("synth.train", "synth.dev", "synth.test", "synth.semi", "manifest.json"):
        assert (data_dir / name).read_bytes() == (other / name).read_bytes(), name


def test_gen_data_refuses_overwrite_without_force(mini):
    cfg_path, data_dir, _ = mini
    assert main(["gen-data", "--config", str(cfg_path), "--out", str(data_dir)]) == 2
    assert main(["gen-data", "--config", str(cfg_path), "--out", str(data_dir), "--force"]) == 0


def test_gen_data_validation_error_exit_2(tmp_path):
    cfg_path = tmp_path / "cfg.txt"
    cfg_path.write_text(MINI_CFG)
    rc = main(
        ["gen-data", "--config", str(cfg_path), "--out", str(tmp_path / "d"),
         "--gen.n_speakers=0"]
    )
    assert rc == 2


def test_unknown_config_key_exit_2(tmp_path):
    rc = main(["gen-data", "--out", str(tmp_path / "d"), "--gen.bogus=1"])
    assert rc == 2


def test_train_baseline_writes_cell(mini):
    cfg_path, data_dir, tmp = mini
    out = tmp / "runs"
    rc = main(
        ["train", "--config", str(cfg_path), "--data", str(data_dir), "--out", str(out),
         "--mode", "baseline"]
    )
    assert rc == 0
    cell = out / "baseline"
    assert (cell / "metrics.csv").exists()
    assert (cell / "final.ckpt").exists()
    assert (cell / "best.ckpt").exists()
    header = (cell / "metrics.csv").read_text().splitlines()[0]
    assert header == "epoch,phase,train_acoustic_loss,train_speaker_loss,dev_ler,dev_speaker_acc,lambda,wall_clock_sec"


def test_train_baseline_rejects_fork_flag(mini):
    cfg_path, data_dir, tmp = mini
    rc = main(
        ["train", "--config", str(cfg_path), "--data", str(data_dir),
         "--out", str(tmp / "runs"), "--mode", "baseline", "--fork", "mid"]
    )
    assert rc == 2


def test_train_al_cell_directory(mini):
    cfg_path, data_dir, tmp = mini
    out = tmp / "runs"
    rc = main(
        ["train", "--config", str(cfg_path), "--data", str(data_dir), "--out", str(out),
         "--mode", "al", "--fork", "out"]
    )
    assert rc == 0
    assert (out / "al-out" / "metrics.csv").exists()
    resolved = (out / "al-out" / "config.resolved").read_text()
    assert "train.mode = al" in resolved
    assert "train.fork = out" in resolved


def test_train_semi_requires_semi_file(mini, tmp_path):
    cfg_path, data_dir, tmp = mini
    (data_dir / "synth.semi").unlink()
    rc = main(
        ["train", "--config", str(cfg_path), "--data", str(data_dir),
         "--out", str(tmp / "runs"), "--mode", "semi", "--fork", "in"]
    )
    assert rc == 2


def test_train_missing_data_exit_2(mini, tmp_path):
    cfg_path, _, _ = mini
    rc = main(
        ["train", "--config", str(cfg_path), "--data", str(tmp_path / "nope"),
         "--out", str(tmp_path / "runs"), "--mode", "baseline"]
    )
    assert rc == 2


def test_train_divergence_exit_3(mini):
    cfg_path, data_dir, tmp = mini
    rc = main(
        ["train", "--config", str(cfg_path), "--data", str(data_dir),
         "--out", str(tmp / "runs-div"), "--mode", "baseline",
         "--train.lr_main=500.0", "--train.epochs_a=4"]
    )
    assert rc == 3


def probe_args(cfg_path, data_dir, out, ckpts, layers="1,2"):
    return [
        "probe", "--config", str(cfg_path), "--checkpoints", ckpts,
        "--layers", layers, "--data", str(data_dir / "synth.train"), "--out", str(out),
    ]


def test_probe_and_eval_pipeline(mini):
    cfg_path, data_dir, tmp = mini
    out = tmp / "runs"
    assert main(
        ["train", "--config", str(cfg_path), "--data", str(data_dir), "--out", str(out),
         "--mode", "baseline"]
    ) == 0
    ckpt = out / "baseline" / "final.ckpt"

    rc = main(probe_args(cfg_path, data_dir, tmp / "probe", f"baseline={ckpt}"))
    assert rc == 0
    lines = (tmp / "probe" / "probe.csv").read_text().splitlines()
    assert lines[0] == "variant,layer,accuracy,chance,n_eval,seed"
    assert len(lines) == 4  # 2 cells + chance + header
    assert lines[-1].startswith("chance,")

    rc = main(
        ["eval", "--config", str(cfg_path), "--checkpoint", str(ckpt),
         "--data", f"{data_dir}/synth.dev,{data_dir}/synth.test", "--out", str(tmp / "eval")]
    )
    assert rc == 0
    lines = (tmp / "eval" / "eval.csv").read_text().splitlines()
    assert lines[0] == "split,metric,value,n_utts"
    assert len(lines) == 5  # dev ler/wer + test ler/wer
    assert {l.split(",")[0] for l in lines[1:]} == {"dev", "test"}


def test_probe_single_cell(mini):
    cfg_path, data_dir, tmp = mini
    out = tmp / "runs"
    assert main(
        ["train", "--config", str(cfg_path), "--data", str(data_dir), "--out", str(out),
         "--mode", "baseline"]
    ) == 0
    ckpt = out / "baseline" / "final.ckpt"
    rc = main(probe_args(cfg_path, data_dir, tmp / "probe1", f"baseline={ckpt}", layers="1"))
    assert rc == 0
    lines = (tmp / "probe1" / "probe.csv").read_text().splitlines()
    assert len(lines) == 3


def test_probe_missing_checkpoint_exit_2(mini):
    cfg_path, data_dir, tmp = mini
    rc = main(probe_args(cfg_path, data_dir, tmp / "probe2", "baseline=/nope.ckpt"))
    assert rc == 2


def test_probe_invalid_layer_recorded_absent(mini):
    cfg_path, data_dir, tmp = mini
    out = tmp / "runs"
    assert main(
        ["train", "--config", str(cfg_path), "--data", str(data_dir), "--out", str(out),
         "--mode", "baseline"]
    ) == 0
    ckpt = out / "baseline" / "final.ckpt"
    rc = main(probe_args(cfg_path, data_dir, tmp / "probe3", f"baseline={ckpt}", layers="1,9"))
    assert rc == 0
    lines = (tmp / "probe3" / "probe.csv").read_text().splitlines()
    bad = [l for l in lines if l.startswith("baseline,9,")]
    assert len(bad) == 1 and bad[0].split(",")[2] == ""


def test_eval_rerun_byte_identical(mini):
    cfg_path, data_dir, tmp = mini
    out = tmp / "runs"
    assert main(
        ["train", "--config", str(cfg_path), "--data", str(data_dir), "--out", str(out),
         "--mode", "baseline"]
    ) == 0
    ckpt = out / "baseline" / "final.ckpt"
    for d in ("e1", "e2"):
        assert main(
            ["eval", "--config", str(cfg_path), "--checkpoint", str(ckpt),
             "--data", str(data_dir / "synth.dev"), "--out", str(tmp / d)]
        ) == 0
    assert (tmp / "e1" / "eval.csv").read_bytes() == (tmp / "e2" / "eval.csv").read_bytes()


def test_env_seed_default(tmp_path, monkeypatch):
    monkeypatch.setenv(cf.SEED_ENV_VAR, "4242")
    cfg = cf.resolve()
    assert cfg["seed"] == 4242
    # explicit file/flag values win over the environment
    assert cf.resolve(seed_flag=7)["seed"] == 7


def test_config_resolved_reproduces_run(mini, tmp_path):
    cfg_path, data_dir, tmp = mini
    out1 = tmp / "r1"
    assert main(
        ["train", "--config", str(cfg_path), "--data", str(data_dir), "--out", str(out1),
         "--mode", "mt", "--fork", "in"]
    ) == 0
    resolved = out1 / "mt-in" / "config.resolved"
    out2 = tmp / "r2"
    assert main(
        ["train", "--config", str(resolved), "--data", str(data_dir), "--out", str(out2)]
    ) == 0
    a, b = out1 / "mt-in", out2 / "mt-in"
    assert (a / "final.ckpt").read_bytes() == (b / "final.ckpt").read_bytes()
    strip = lambda p: [",".join(l.split(",")[:-1]) for l in p.read_text().splitlines()]
    assert strip(a / "metrics.csv") == strip(b / "metrics.csv")
