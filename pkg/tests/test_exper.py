import dataclasses
import json
import math

import numpy as np
import pytest

from shiftbnn import exper
from shiftbnn.exper import ExperimentConfig, FormatVersionError, RunRecord
from shiftbnn.models import ModelSpec, build
from shiftbnn.nn import ConfigError, Param, SignActConfig
from shiftbnn.optim import SGD


@pytest.fixture
def cfg(synthetic_mnist):
    return ExperimentConfig(model=ModelSpec(arch="mlp2", width=0.125), data_dir=str(synthetic_mnist), epochs=2,
                            batch_size=64, shifts=(0.0,), seeds=(0,), analysis_samples=100)


def _metrics(rec):
    return json.dumps(rec.epochs), json.dumps(rec.balance), json.dumps(rec.thresholds)


def test_config_validation():
    with pytest.raises(ConfigError):
        ExperimentConfig(shifts=())
    with pytest.raises(ConfigError):
        ExperimentConfig(seeds=())
    with pytest.raises(ConfigError):
        ExperimentConfig(epochs=0)
    with pytest.raises(ConfigError):
        ExperimentConfig(model=ModelSpec(precision="fp", activation="relu6"), trainable_threshold=True)


def test_config_dict_roundtrip(cfg):
    again = ExperimentConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert again == cfg and again.hash() == cfg.hash()


def test_spec_for_sets_shift_and_input(cfg):
    spec = cfg.replace(pad=2, trainable_threshold=True).spec_for(1.5)
    assert spec.sign.threshold_shift == 1.5 and spec.sign.trainable and spec.sign.per_channel
    assert spec.input_shape == (1, 32, 32)


def test_train_run_is_deterministic(cfg):
    a, _ = exper.train_run(cfg, 0.5, 3)
    b, _ = exper.train_run(cfg, 0.5, 3)
    assert _metrics(a) == _metrics(b)
    assert len(a.epochs) == cfg.epochs and a.status == "ok"
    assert a.final_test_acc > 0.5


def test_record_reruns_from_its_own_config(cfg):
    rec, _ = exper.train_run(cfg, -0.5, 1)
    back = RunRecord.from_json(rec.to_json())
    again, _ = exper.train_run(ExperimentConfig.from_dict(back.config), back.shift, back.seed)
    assert _metrics(again) == _metrics(rec)
    assert back.config_hash == cfg.hash()


def test_identical_seeds_give_identical_accuracy(cfg):
    summary, records = exper.shift_sweep(cfg.replace(seeds=(4, 4)))
    assert records[0].final_test_acc == records[1].final_test_acc
    assert summary[0].std == 0


def test_single_seed_std_is_zero(cfg):
    summary, _ = exper.shift_sweep(cfg.replace(shifts=(0.0, 1.0), epochs=1))
    assert [s.std for s in summary] == [0.0, 0.0]
    assert [s.shift for s in summary] == [0.0, 1.0]


def test_parallel_sweep_matches_serial(cfg):
    c = cfg.replace(shifts=(0.0, 0.5), seeds=(0, 1), epochs=1)
    serial = exper.run_grid(c, 1)
    parallel = exper.run_grid(c, 2)
    assert [_metrics(r) for r in serial] == [_metrics(r) for r in parallel]
    assert [(r.shift, r.seed) for r in parallel] == [(0.0, 0), (0.0, 1), (0.5, 0), (0.5, 1)]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_diverged_run_is_recorded(cfg):
    summary, records = exper.shift_sweep(cfg.replace(lr=math.inf))
    assert records[0].status == "diverged"
    assert len(records[0].epochs) == cfg.epochs
    assert summary[0].n_failed == 1 and summary[0].n_ok == 0
    line = records[0].to_json()
    assert "NaN" not in line and RunRecord.from_json(line).status == "diverged"


def test_select_shift():
    assert exper.select_shift({0.0: 0.5}) == 0.0
    assert exper.select_shift({0.0: 0.50, 1.0: 0.55, 2.0: 0.53}) == 1.0
    assert exper.select_shift({-1.0: 0.6, 0.5: 0.6, 2.0: 0.6}) == 0.5
    assert exper.select_shift({-1.0: 0.6, 1.0: 0.6}) == -1.0


def test_first_epoch_search_single_point(cfg):
    best, acc = exper.first_epoch_search(cfg.replace(epochs=5))
    assert best == 0.0 and list(acc) == [0.0]


def test_first_epoch_search_uses_one_epoch(cfg):
    best, acc = exper.first_epoch_search(cfg.replace(shifts=(-1.0, 0.0, 1.0)))
    assert best in acc and len(acc) == 3
    rec, _ = exper.train_run(cfg.replace(epochs=1), 1.0, 0)
    assert acc[1.0] == rec.first_epoch_train_acc


def test_plus_fraction_examples():
    assert exper.plus_fraction(np.ones(10)) == 1.0
    assert exper.plus_fraction(np.array([1, -1, 1, -1])) == 0.5


def test_balance_stats_consistency(cfg):
    model = build(ModelSpec(arch="lenet5", width=0.5, sign=SignActConfig(0.4)), 0)
    x = np.random.default_rng(0).normal(size=(64, 1, 28, 28)).astype(np.float32)
    bal = exper.balance_stats(model, x, batch_size=20)
    model.eval()
    for name, layer in model.sign_layers():
        assert 0 <= bal[name] <= 1
    # compare with a direct count of -1 entries
    y = x
    minus = {}
    for name, layer in model.net.layers:
        y = layer.forward(y)
        if name.startswith("act"):
            minus[name] = np.count_nonzero(y < 0) / y.size
    assert all(abs(bal[n] - (1 - minus[n])) < 1e-12 for n in bal)


def test_balance_stats_needs_binary_activation():
    with pytest.raises(ConfigError):
        exper.balance_stats(build(ModelSpec(precision="fp", activation="relu6"), 0), np.zeros((2, 1, 28, 28)))


def test_threshold_mirror_during_training(cfg):
    c = cfg.replace(trainable_threshold=True, epochs=2)
    rec, model = exper.train_run(c, 0.0, 0, debug_mirror=True)
    t = rec.thresholds["act1"]
    assert np.array_equal(np.array(t["th"]), -np.array(t["beta"]))
    assert np.any(np.array(t["beta"]) != 0)


def test_mirror_check_catches_asymmetry(cfg):
    model = build(cfg.replace(trainable_threshold=True).spec_for(0.0), 0)
    model.net["act1"].threshold.grad[0] = 1.0
    with pytest.raises(exper.MirrorError):
        exper.check_mirror(model)


def test_one_sgd_step_mirrors():
    beta, th = Param(np.zeros(3, np.float32)), Param(np.zeros(3, np.float32))
    g = np.array([0.5, -2.0, 1e-3], np.float32)
    beta.grad[:], th.grad[:] = g, -g
    SGD({"beta": beta, "th": th}, 0.9).step(0.1)
    assert np.array_equal(th.value, -beta.value)


def test_threshold_bias_study(cfg):
    studies = exper.threshold_bias_study(cfg.replace(shifts=(-1.0, 1.0), epochs=1))
    assert [s.init for s in studies] == [-1.0, 1.0]
    low, high = (s.effective().mean() for s in studies)
    assert low < high
    assert all(len(s.pairs()) == 64 for s in studies)


def test_slope_grid(synthetic_mnist):
    c = ExperimentConfig(model=ModelSpec(arch="resnet20ds", width=0.25), data_dir=str(synthetic_mnist), epochs=1,
                         batch_size=100, shifts=(0.0, 0.5), train_subset=200, test_subset=100, analysis_samples=50)
    grid = exper.slope_grid(c, [0.0, 1.0])
    assert set(grid.table) == {(0.0, 0.0), (0.0, 0.5), (1.0, 0.0), (1.0, 0.5)}
    assert set(grid.snapshots) == {0.0, 1.0}
    assert sum(next(iter(grid.snapshots[0.0].values()))["count"]) == 50 * 4 * 28 * 28
    with pytest.raises(ConfigError):
        exper.slope_grid(c.replace(model=ModelSpec()), [0.0])


def test_sweep_and_hist_csv(tmp_path, cfg):
    _, records = exper.shift_sweep(cfg.replace(epochs=1))
    path = tmp_path / "sweep.csv"
    exper.write_sweep_csv(records, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "# format_version: 1"
    assert lines[1] == "shift,seed,final_test_acc,first_epoch_train_acc,status"
    rows = exper.read_sweep_csv(path)
    assert len(rows) == 1 and rows[0]["status"] == "ok"
    hpath = tmp_path / "h.csv"
    exper.write_hist_csv(*exper.histogram([0.1, 0.2, 0.2, 3.0], 4), hpath)
    left, counts = exper.read_hist_csv(hpath)
    assert counts.sum() == 4 and len(left) == 4


def test_readers_reject_unknown_versions(tmp_path, cfg):
    p = tmp_path / "x.csv"
    p.write_text("# format_version: 2\nshift,seed\n")
    with pytest.raises(FormatVersionError):
        exper.read_sweep_csv(p)
    rec, _ = exper.train_run(cfg.replace(epochs=1), 0.0, 0)
    d = json.loads(rec.to_json())
    d["format_version"] = 7
    with pytest.raises(FormatVersionError):
        RunRecord.from_json(json.dumps(d))


def test_records_jsonl_roundtrip(tmp_path, cfg):
    rec, _ = exper.train_run(cfg.replace(epochs=1), 0.0, 0)
    path = tmp_path / "r.jsonl"
    exper.write_records([rec, rec], path)
    back = exper.read_records(path)
    assert len(back) == 2 and back[0].to_json() == rec.to_json()
    assert path.read_text().startswith('{"format_version": 1')


def test_spearman_and_search_validity():
    assert exper.spearman([1, 2, 3], [10, 20, 30]) == pytest.approx(1.0)
    summary = [exper.ShiftSummary(s, m, 0.0, 1, 0, f) for s, m, f in ((0, 0.9, 0.5), (1, 0.8, 0.4), (2, 0.7, 0.45))]
    assert exper.search_validity(summary) == pytest.approx(0.5)


def test_leaky_relu_mean_exceeds_median():
    from shiftbnn.nn import leaky_relu
    x = np.random.default_rng(0).standard_normal(200_000)
    for s in (0.0, 0.3, 0.7):
        y = leaky_relu(x, s)
        assert y.mean() > np.median(y)


def test_run_grid_reuses_only_matching_records(cfg):
    one = cfg.replace(shifts=(0.0,), seeds=(0,))
    (rec,) = exper.run_grid(one)
    calls = []
    # same settings, larger grid: the finished cell is reused
    out = exper.run_grid(one.replace(seeds=(0, 1)), done=[rec], on_record=calls.append)
    assert [r.seed for r in calls] == [1] and out[0] is rec
    # different learning rate: nothing is reused
    calls.clear()
    exper.run_grid(one.replace(lr=0.005), done=[rec], on_record=calls.append)
    assert [r.seed for r in calls] == [0]
