import numpy as np
import pytest

from shiftbnn import exper
from shiftbnn.cli import ConfigFileError, format_config, main, parse_config, parse_floats, parse_ints
from shiftbnn.exper import ExperimentConfig
from shiftbnn.models import ModelSpec
from shiftbnn.nn import SignActConfig

SMOKE = """\
arch = mlp2
width = 0.125
epochs = 1
batch_size = 64
analysis_samples = 100
shifts = 0.5
seeds = 0
"""


@pytest.fixture
def conf(tmp_path, synthetic_mnist):
    def write(text=SMOKE, name="c.conf"):
        p = tmp_path / name
        p.write_text(text + f"data_dir = {synthetic_mnist}\n")
        return str(p)
    return write


def test_parse_lists():
    assert parse_floats("-2:2:0.5") == (-2.0, -1.5, -1.0, -0.5, 0.0, 0.5, 1.0, 1.5, 2.0)
    assert parse_floats("0, 1.2") == (0.0, 1.2)
    assert parse_ints("0:10") == tuple(range(10))
    assert parse_ints("3,1") == (3, 1)


def test_config_roundtrip():
    cfg = ExperimentConfig(model=ModelSpec(arch="vggsmall", pooling="avg", sign=SignActConfig(ste_clip=0.5),
                                           width=0.5, input_shape=(3, 16, 16)),
                           dataset="cifar10", shifts=(-1.5, 0.0, 1.5), seeds=(1, 2), augment=False, warmup=5)
    assert parse_config(format_config(cfg)) == cfg


def test_unknown_key_is_line_anchored():
    with pytest.raises(ConfigFileError, match=r"c.conf:2: unknown key 'shfit'"):
        parse_config("arch = mlp2\nshfit = 1.0\n", "c.conf")
    with pytest.raises(ConfigFileError, match=r":1: bad value for 'epochs'"):
        parse_config("epochs = many\n")
    with pytest.raises(ConfigFileError, match=r":2: key 'lr' already set on line 1"):
        parse_config("lr = 0.1\nlr = 0.2\n")
    with pytest.raises(ConfigFileError, match=r":1: expected 'key = value'"):
        parse_config("arch mlp2\n")
    with pytest.raises(ConfigFileError, match="extra_act"):
        parse_config("arch = mlp2\nextra_act = leaky\n")


def test_cli_bad_config_exit_code(conf, capsys):
    path = conf("arch = mlp2\nshfit = 1\n")
    assert main(["train", path, "--out", "unused"]) == 2
    assert "unknown key 'shfit'" in capsys.readouterr().err


def test_cli_missing_dataset(tmp_path, capsys):
    p = tmp_path / "c.conf"
    p.write_text(SMOKE + f"data_dir = {tmp_path / 'nowhere'}\n")
    assert main(["train", str(p), "--out", str(tmp_path / "o")]) == 2
    err = capsys.readouterr().err
    assert "train-images-idx3-ubyte" in err and "train-labels-idx1-ubyte" in err


def test_train_smoke_and_rerun(conf, tmp_path, capsys):
    path = conf()
    assert main(["train", path, "--out", str(tmp_path / "a")]) == 0
    out = capsys.readouterr().out
    assert "epoch 1/1" in out
    rec = exper.read_records(tmp_path / "a" / "record.jsonl")
    assert len(rec) == 1 and len(rec[0].epochs) == 1
    assert (tmp_path / "a" / "model.ckpt").exists()
    assert main(["train", str(tmp_path / "a" / "config.conf"), "--out", str(tmp_path / "b")]) == 0
    again = exper.read_records(tmp_path / "b" / "record.jsonl")
    assert again[0].final_test_acc == rec[0].final_test_acc
    assert again[0].config == rec[0].config


def test_sweep_single_cell(conf, tmp_path):
    assert main(["sweep", conf(), "--shifts", "0", "--seeds", "0", "--workers", "1", "--quiet",
                 "--out", str(tmp_path)]) == 0
    rows = exper.read_sweep_csv(tmp_path / "sweep.csv")
    assert len(rows) == 1 and rows[0]["shift"] == 0.0
    assert len(exper.read_records(tmp_path / "records.jsonl")) == 1


def test_sweep_resume_trains_only_missing_cells(conf, tmp_path, capsys):
    path = conf()
    assert main(["sweep", path, "--shifts", "0", "--seeds", "0", "--workers", "1", "--quiet",
                 "--out", str(tmp_path)]) == 0
    first = exper.read_records(tmp_path / "records.jsonl")
    capsys.readouterr()
    assert main(["sweep", path, "--shifts", "0", "--seeds", "0,1", "--workers", "1",
                 "--out", str(tmp_path), "--resume"]) == 0
    log = capsys.readouterr().out
    assert "resuming: 1 finished runs" in log
    assert "seed 0:" not in log and "seed 1:" in log
    recs = exper.read_records(tmp_path / "records.jsonl")
    assert [r.seed for r in recs] == [0, 1]
    assert recs[0].to_json() == first[0].to_json()
    assert len(exper.read_sweep_csv(tmp_path / "sweep.csv")) == 2


def test_search_prints_choice(conf, tmp_path, capsys):
    assert main(["search", conf(), "--shifts=-1,0,1", "--workers", "1", "--quiet", "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert out.count("first-epoch train accuracy") == 3
    assert "chosen shift:" in out


def test_analyze_vggsmall_balance(conf, tmp_path):
    text = "arch = vggsmall\nwidth = 0.125\npad = 2\nepochs = 1\nbatch_size = 100\nshifts = 0\n" \
           "train_subset = 200\ntest_subset = 100\nanalysis_samples = 50\n"
    path = conf(text, "v.conf")
    assert main(["train", path, "--quiet", "--out", str(tmp_path / "t")]) == 0
    assert main(["analyze", path, "--checkpoint", str(tmp_path / "t" / "model.ckpt"), "--samples", "50",
                 "--preact", "--out", str(tmp_path / "an")]) == 0
    lines = (tmp_path / "an" / "balance.csv").read_text().splitlines()
    assert lines[1] == "layer,plus_fraction"
    assert [l.split(",")[0] for l in lines[2:]] == [f"act{i}" for i in range(1, 7)]
    assert (tmp_path / "an" / "preact_act2.csv").exists()


def test_analyze_checkpoint_mismatch(conf, tmp_path, capsys):
    assert main(["train", conf(), "--quiet", "--out", str(tmp_path / "t")]) == 0
    other = conf("arch = lenet5\nshifts = 0\n", "l.conf")
    assert main(["analyze", other, "--checkpoint", str(tmp_path / "t" / "model.ckpt")]) == 2
    assert "state mismatch" in capsys.readouterr().err


def test_export_and_verified_inference(conf, tmp_path, capsys, monkeypatch, synthetic_mnist):
    path = conf()
    assert main(["train", path, "--quiet", "--out", str(tmp_path)]) == 0
    ckpt, packed = str(tmp_path / "model.ckpt"), str(tmp_path / "m.sbp")
    assert main(["export", path, "--checkpoint", ckpt, "-o", packed]) == 0
    assert main(["infer", packed, "--data-dir", str(synthetic_mnist), "--verify", "--config", path,
                 "--checkpoint", ckpt]) == 0
    assert "verified: exact match" in capsys.readouterr().out


def test_export_fp_model_refused(conf, tmp_path, capsys):
    path = conf(SMOKE.replace("arch = mlp2", "arch = mlp2\nprecision = fp\nactivation = relu6"), "fp.conf")
    assert main(["train", path, "--quiet", "--out", str(tmp_path)]) == 0
    assert main(["export", path, "--checkpoint", str(tmp_path / "model.ckpt"), "-o", str(tmp_path / "x")]) == 2
    assert "nothing to pack" in capsys.readouterr().err


def test_study_writes_histograms(conf, tmp_path):
    assert main(["study", conf(), "--shifts=-1,1", "--workers", "1", "--quiet", "--out", str(tmp_path)]) == 0
    rows = (tmp_path / "study.csv").read_text().splitlines()
    assert len(rows) == 4
    left, counts = exper.read_hist_csv(tmp_path / "effective_init-1.csv")
    assert counts.sum() == 64


def test_example_config_parses():
    from pathlib import Path
    root = Path(__file__).resolve().parents[1]
    for p in sorted((root / "configs").glob("*.conf")):
        cfg = parse_config(p.read_text(), str(p))
        assert cfg.epochs >= 1
    cfg = parse_config((root / "configs" / "mnist_mlp2.conf").read_text())
    assert len(cfg.shifts) == 9 and len(cfg.seeds) == 10 and cfg.lr == 0.01 and cfg.epochs == 30
    assert np.isclose(sum(cfg.shifts), 0)
