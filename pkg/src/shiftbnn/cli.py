"""``shiftbnn`` command line: train, sweep, search, analyze, export, infer.

Config files are plain ``key = value`` lines; ``#`` starts a comment.  See
``configs/mnist_mlp2.conf`` in the repository for an annotated example and
:data:`KEYS` for the full list of keys.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import binkernel, data as data_mod, exper
from .exper import ExperimentConfig
from .models import CheckpointError, ModelSpec, build, load_checkpoint, save_checkpoint
from .nn import FoldError
from .nn.activations import ConfigError, GenHardtanhConfig, SignActConfig


class ConfigFileError(ValueError):
    pass


def _bool(s: str) -> bool:
    v = s.lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {s!r}")


def _opt(parse):
    def inner(s: str):
        return None if s.lower() in ("none", "auto", "") else parse(s)
    return inner


def parse_floats(s: str) -> tuple[float, ...]:
    """``"-2,-1,0"`` or ``"-2:2:0.5"`` (inclusive range with step)."""
    s = s.strip()
    if ":" in s:
        lo, hi, step = (float(v) for v in s.split(":"))
        n = int(round((hi - lo) / step))
        return tuple(float(np.round(lo + i * step, 10)) for i in range(n + 1))
    return tuple(float(v) for v in s.split(",") if v.strip())


def parse_ints(s: str) -> tuple[int, ...]:
    """``"0,1,2"`` or ``"0:10"`` (half-open range)."""
    s = s.strip()
    if ":" in s:
        lo, hi = (int(v) for v in s.split(":"))
        return tuple(range(lo, hi))
    return tuple(int(v) for v in s.split(",") if v.strip())


# key -> (section, field, parser); section is "model", "sign", "hardtanh" or "run"
KEYS = {
    "arch": ("model", "arch", str),
    "precision": ("model", "precision", str),
    "activation": ("model", "activation", str),
    "pooling": ("model", "pooling", str),
    "extra_act": ("model", "extra_act", str),
    "leaky_slope": ("model", "leaky_slope", float),
    "binarize_first_last": ("model", "binarize_first_last", _opt(_bool)),
    "width": ("model", "width", float),
    "input_shape": ("model", "input_shape", _opt(lambda s: tuple(int(v) for v in s.split(",")))),
    "per_channel": ("sign", "per_channel", _bool),
    "ste_clip": ("sign", "ste_clip", float),
    "y_offset": ("hardtanh", "y_offset", float),
    "range": ("hardtanh", "range", float),
    "dataset": ("run", "dataset", str),
    "data_dir": ("run", "data_dir", _opt(str)),
    "optimizer": ("run", "optimizer", str),
    "lr": ("run", "lr", float),
    "momentum": ("run", "momentum", float),
    "epochs": ("run", "epochs", int),
    "batch_size": ("run", "batch_size", int),
    "warmup": ("run", "warmup", int),
    "shifts": ("run", "shifts", parse_floats),
    "seeds": ("run", "seeds", parse_ints),
    "trainable_threshold": ("run", "trainable_threshold", _bool),
    "record_distributions": ("run", "record_distributions", _bool),
    "augment": ("run", "augment", _opt(_bool)),
    "pad": ("run", "pad", int),
    "train_subset": ("run", "train_subset", int),
    "test_subset": ("run", "test_subset", int),
    "analysis_samples": ("run", "analysis_samples", int),
    "pretrained": ("run", "pretrained", _opt(str)),
    "pretrained_shift": ("run", "pretrained_shift", float),
}


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    """Build an :class:`ExperimentConfig` from ``key = value`` lines; unknown keys are rejected."""
    sections: dict[str, dict] = {"model": {}, "sign": {}, "hardtanh": {}, "run": {}}
    seen: dict[str, int] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigFileError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in KEYS:
            raise ConfigFileError(f"{source}:{lineno}: unknown key {key!r}")
        if key in seen:
            raise ConfigFileError(f"{source}:{lineno}: key {key!r} already set on line {seen[key]}")
        seen[key] = lineno
        section, name, parse = KEYS[key]
        try:
            sections[section][name] = parse(value)
        except ValueError as e:
            raise ConfigFileError(f"{source}:{lineno}: bad value for {key!r}: {e}") from None
    try:
        spec = ModelSpec(sign=SignActConfig(**sections["sign"]), hardtanh=GenHardtanhConfig(**sections["hardtanh"]),
                         **sections["model"])
        return ExperimentConfig(model=spec, **sections["run"])
    except ConfigError as e:
        raise ConfigFileError(f"{source}: {e}") from None


def format_config(cfg: ExperimentConfig) -> str:
    """Inverse of :func:`parse_config` for every key (defaults included)."""
    spec = cfg.model
    objs = {"model": spec, "sign": spec.sign, "hardtanh": spec.hardtanh, "run": cfg}
    lines = []
    for key, (section, name, _) in KEYS.items():
        v = getattr(objs[section], name)
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        elif v is None:
            v = "auto"
        elif isinstance(v, bool):
            v = str(v).lower()
        lines.append(f"{key} = {v}")
    return "\n".join(lines) + "\n"


def load_config(path: str, args=None) -> ExperimentConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigFileError(f"config file not found: {path}")
    cfg = parse_config(p.read_text(), str(p))
    over = {}
    if args is not None:
        if getattr(args, "shifts", None):
            over["shifts"] = parse_floats(args.shifts)
        if getattr(args, "seeds", None):
            over["seeds"] = parse_ints(args.seeds)
        if getattr(args, "data_dir", None):
            over["data_dir"] = args.data_dir
    return cfg.replace(**over) if over else cfg


def _out_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _say(msg: str):
    print(msg, flush=True)


def cmd_train(args) -> int:
    cfg = load_config(args.config, args)
    shift = args.shift if args.shift is not None else cfg.shifts[0]
    seed = args.seed if args.seed is not None else cfg.seeds[0]
    cfg = cfg.replace(shifts=(shift,), seeds=(seed,))
    out = _out_dir(args.out)
    rec, model = exper.train_run(cfg, shift, seed, log=None if args.quiet else _say)
    save_checkpoint(out / "model.ckpt", model.state_dict())
    (out / "config.conf").write_text(format_config(cfg))
    rec_path = out / "record.jsonl"
    rec_path.unlink(missing_ok=True)
    exper.write_records([rec], rec_path)
    _say(f"status {rec.status}; final test accuracy {rec.final_test_acc:.4f}")
    for name, frac in rec.balance.items():
        _say(f"balance {name}: {frac:.4f}")
    _say(f"wrote {out / 'model.ckpt'} and {rec_path}")
    return 0 if rec.status == "ok" else 1


def cmd_sweep(args) -> int:
    cfg = load_config(args.config, args)
    out = _out_dir(args.out)
    rec_path = out / "records.jsonl"
    done = exper.read_records(rec_path) if args.resume and rec_path.exists() else []
    if not args.resume:
        rec_path.unlink(missing_ok=True)
    elif done:
        _say(f"resuming: {len(done)} finished runs in {rec_path}")
    summary, records = exper.shift_sweep(cfg, args.workers, None if args.quiet else _say,
                                         on_record=lambda r: exper.write_records([r], rec_path), done=done)
    exper.write_sweep_csv(records, out / "sweep.csv")
    exper.write_table_csv(["shift", "mean_test_acc", "std_test_acc", "n_ok", "n_failed", "first_epoch_train_acc"],
                          [[s.shift, s.mean, s.std, s.n_ok, s.n_failed, s.first_epoch_mean] for s in summary],
                          out / "summary.csv")
    _say("shift    mean     std      ok failed")
    for s in summary:
        _say(f"{s.shift:+6.2f}  {s.mean:.4f}  {s.std:.4f}  {s.n_ok:3d} {s.n_failed:3d}")
    _say(f"wrote {out / 'sweep.csv'}")
    return 0


def cmd_search(args) -> int:
    cfg = load_config(args.config, args)
    if len(cfg.shifts) < 2:
        _say("note: grid has a single shift")
    best, acc = exper.first_epoch_search(cfg, args.workers, None if args.quiet else _say)
    out = _out_dir(args.out)
    exper.write_table_csv(["shift", "first_epoch_train_acc"], sorted(acc.items()), out / "search.csv")
    for s, a in sorted(acc.items()):
        _say(f"shift {s:+.2f}: first-epoch train accuracy {a:.4f}")
    _say(f"chosen shift: {best:+.2f}")
    return 0


def _model_from(cfg: ExperimentConfig, ckpt: str, shift: float | None):
    shift = cfg.shifts[0] if shift is None else shift
    model = build(cfg.spec_for(shift), cfg.seeds[0])
    model.load_state_dict(load_checkpoint(ckpt))
    return model


def cmd_analyze(args) -> int:
    cfg = load_config(args.config, args)
    model = _model_from(cfg, args.checkpoint, args.shift)
    out = _out_dir(args.out)
    _, test = exper.load_data(cfg)
    x = test.images[:args.samples]
    bal = exper.balance_stats(model, x)
    exper.write_table_csv(["layer", "plus_fraction"], [[k, f"{v:.6f}"] for k, v in bal.items()],
                          out / "balance.csv")
    for k, v in bal.items():
        _say(f"{k}: +1 fraction {v:.4f}")
    table = exper.threshold_table(model)
    eff = [v for t in table.values() for v in t["effective"]]
    if eff:
        left, counts = exper.histogram(eff)
        exper.write_hist_csv(left, counts, out / "effective_threshold_hist.csv")
        _say(f"effective threshold mean {np.mean(eff):+.4f} over {len(eff)} channels")
    if args.preact:
        for name, h in exper.preactivation_histograms(model, x).items():
            exper.write_hist_csv(h["bin_left"], h["count"], out / f"preact_{name}.csv")
            _say(f"{name}: pre-activation mean {h['mean']:+.4f} median {h['median']:+.4f}")
    _say(f"wrote {out / 'balance.csv'}")
    return 0


def cmd_study(args) -> int:
    cfg = load_config(args.config, args)
    out = _out_dir(args.out)
    studies = exper.threshold_bias_study(cfg, args.workers, None if args.quiet else _say)
    rec_path = out / "records.jsonl"
    rec_path.unlink(missing_ok=True)
    rows = []
    for st in studies:
        exper.write_records(st.records, rec_path)
        eff = st.effective()
        left, counts = exper.histogram(eff, 40, -4.0, 4.0)
        exper.write_hist_csv(left, counts, out / f"effective_init{st.init:+g}.csv")
        mirror = max((abs(t + b) for b, t in st.pairs()), default=0.0)
        rows.append([st.init, float(eff.mean()), float(eff.std()), mirror])
        _say(f"init {st.init:+.2f}: effective threshold mean {eff.mean():+.4f} std {eff.std():.4f} "
             f"max |th + beta| {mirror:.2e}")
    exper.write_table_csv(["init", "effective_mean", "effective_std", "max_abs_th_plus_beta"], rows,
                          out / "study.csv")
    return 0


def cmd_slopes(args) -> int:
    cfg = load_config(args.config, args)
    out = _out_dir(args.out)
    grid = exper.slope_grid(cfg, parse_floats(args.slopes), args.workers, None if args.quiet else _say)
    exper.write_table_csv(["slope", "shift", "mean_test_acc", "std_test_acc", "n_ok", "n_failed"],
                          [[k[0], k[1], s.mean, s.std, s.n_ok, s.n_failed] for k, s in sorted(grid.table.items())],
                          out / "slope_grid.csv")
    for slope, snap in grid.snapshots.items():
        for name, h in snap.items():
            exper.write_hist_csv(h["bin_left"], h["count"], out / f"preact_slope{slope:g}_{name}.csv")
    for (slope, shift), s in sorted(grid.table.items()):
        _say(f"slope {slope:.2f} shift {shift:+.2f}: {s.mean:.4f} +- {s.std:.4f}")
    return 0


def cmd_export(args) -> int:
    cfg = load_config(args.config, args)
    model = _model_from(cfg, args.checkpoint, args.shift)
    packed = binkernel.export_packed(model)
    packed.save(args.output)
    n_packed = sum(st.kind in (binkernel.K_PLINEAR, binkernel.K_PCONV) for st in packed.stages)
    _say(f"wrote {args.output}: {len(packed.stages)} stages, {n_packed} packed layers")
    return 0


def cmd_infer(args) -> int:
    packed = binkernel.PackedModel.load(args.packed)
    train, test = data_mod.load(args.dataset, args.data_dir)
    if args.split == "train":
        test = train
    if args.limit:
        test = test.subset(args.limit)
    pad = (packed.input_shape[-1] - test.images.shape[-1]) // 2
    test = data_mod.pad_images(test, pad)
    with binkernel.Timer() as t:
        pred, acts = binkernel.run_batched(packed, test.images, collect=args.verify)
    acc = float((pred == test.labels).mean())
    _say(f"packed accuracy {acc:.4f} on {len(test)} {args.dataset} {args.split} images ({t.elapsed:.2f} s)")
    if not args.verify:
        return 0
    if not (args.config and args.checkpoint):
        raise ConfigFileError("--verify needs --config and --checkpoint for the reference model")
    cfg = load_config(args.config, args)
    model = _model_from(cfg, args.checkpoint, args.shift)
    ref_pred, ref_acts = binkernel.run_reference_batched(model, test.images)
    ref_acc = float((ref_pred == test.labels).mean())
    _say(f"reference accuracy {ref_acc:.4f}")
    mism = [int(np.count_nonzero(a != b)) for a, b in zip(acts, ref_acts)]
    same = ref_acc == acc and np.array_equal(pred, ref_pred) and len(acts) == len(ref_acts) and not any(mism)
    if same:
        _say("verified: exact match")
        return 0
    _say(f"verification FAILED: prediction mismatches {int((pred != ref_pred).sum())}, "
         f"activation mismatches per layer {mism}")
    return 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="shiftbnn", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="cmd", required=True)

    def common(sp, grid=True, workers=False):
        sp.add_argument("config", help="key = value config file")
        sp.add_argument("--data-dir", help="dataset directory (default $SHIFTBNN_DATA/<dataset>)")
        sp.add_argument("--out", default="runs", help="output directory")
        sp.add_argument("--quiet", action="store_true")
        if grid:
            sp.add_argument("--shifts", help="shift grid, e.g. --shifts=-2,-1,0 or --shifts=-2:2:0.5")
            sp.add_argument("--seeds", help="seed list, e.g. 0,1,2 or 0:10")
        if workers:
            sp.add_argument("--workers", type=int, default=exper.default_workers(),
                            help="parallel training processes")

    sp = sub.add_parser("train", help="train one model")
    common(sp, grid=False)
    sp.add_argument("--shift", type=float, help="threshold shift (default: first of 'shifts')")
    sp.add_argument("--seed", type=int, help="seed (default: first of 'seeds')")
    sp.set_defaults(func=cmd_train)

    for name, func, hlp in (("sweep", cmd_sweep, "train every (shift, seed) and aggregate"),
                            ("search", cmd_search, "first-epoch shift search"),
                            ("study", cmd_study, "trainable-threshold vs batch-norm bias study")):
        sp = sub.add_parser(name, help=hlp)
        common(sp, workers=True)
        if name == "sweep":
            sp.add_argument("--resume", action="store_true",
                            help="reuse finished runs from OUT/records.jsonl that have the same config")
        sp.set_defaults(func=func)

    sp = sub.add_parser("slopes", help="LeakyReLU slope x shift grid (resnet20ds)")
    common(sp, workers=True)
    sp.add_argument("--slopes", default="0,0.25,0.5,0.75,1", help="slope list")
    sp.set_defaults(func=cmd_slopes)

    for name, func, hlp in (("analyze", cmd_analyze, "balance statistics of a checkpoint"),
                            ("export", cmd_export, "fold, binarize and pack a checkpoint")):
        sp = sub.add_parser(name, help=hlp)
        sp.add_argument("config")
        sp.add_argument("--checkpoint", required=True)
        sp.add_argument("--shift", type=float, help="shift the checkpoint was trained with (default: first of 'shifts')")
        sp.add_argument("--data-dir")
        sp.set_defaults(func=func)
    sub.choices["analyze"].add_argument("--out", default="runs")
    sub.choices["analyze"].add_argument("--samples", type=int, default=1000)
    sub.choices["analyze"].add_argument("--preact", action="store_true", help="also write pre-activation histograms")
    sub.choices["export"].add_argument("-o", "--output", required=True)

    sp = sub.add_parser("infer", help="run a packed model on a dataset split")
    sp.add_argument("packed")
    sp.add_argument("--dataset", default="mnist", choices=("mnist", "cifar10"))
    sp.add_argument("--split", default="test", choices=("train", "test"))
    sp.add_argument("--data-dir")
    sp.add_argument("--limit", type=int, default=0, help="first N images only")
    sp.add_argument("--verify", action="store_true", help="compare with the reference model layer by layer")
    sp.add_argument("--config")
    sp.add_argument("--checkpoint")
    sp.add_argument("--shift", type=float)
    sp.set_defaults(func=cmd_infer)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigFileError, ConfigError, CheckpointError, FoldError, binkernel.PackError,
            data_mod.DatasetNotFound, data_mod.FormatError, exper.FormatVersionError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
