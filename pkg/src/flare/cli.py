"""Command-line entry point: ``flare {gen-data,train,eval,spectra,bench}``.

Exit codes: 0 success, 2 validation error, 3 runtime error.
"""

import argparse
import csv
import json
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import bench as benchmod
from .checkpoint import Checkpoint, checkpoint_load, checkpoint_save
from .data import (MIN_GRID, NormStats, compute_stats, generate_split, read_pcf, write_meta,
                   write_pcf)
from .errors import ConfigError, FlareError, FormatError
from .mixer import head_split, kv_config
from .model import ModelConfig, init_params, model_forward
from .resmlp import resmlp_forward, subtree
from .spectral import dense_spectrum_oracle, effective_rank, flare_spectrum
from .tensor import Tensor, layer_norm, no_grad
from .train import (LOG_HEADER, EpochRecord, OptimizerState, TrainConfig,
                    evaluate, fit)

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 2, 3


class ValidationError(FlareError):
    pass


# ----------------------------------------------------------------------------
# run configuration
# ----------------------------------------------------------------------------

_MODEL_KEYS = [f.name for f in fields(ModelConfig) if f.name != "seed"]
_TRAIN_KEYS = [f.name for f in fields(TrainConfig) if f.name != "seed"]

RUN_DEFAULTS = {
    **{f"model.{k}": getattr(ModelConfig(), k) for k in _MODEL_KEYS},
    **{f"train.{k}": getattr(TrainConfig(), k) for k in _TRAIN_KEYS},
    "seed": 0,
    "data.dir": None,
    "out.dir": None,
    "checkpoint.every": 0,
}
RUN_DEFAULTS["train.betas"] = list(RUN_DEFAULTS["train.betas"])
# d_in / d_out are taken from the data unless set explicitly
RUN_DEFAULTS["model.d_in"] = None
RUN_DEFAULTS["model.d_out"] = None


def _coerce(key, value):
    default = RUN_DEFAULTS[key]
    if isinstance(value, str) and not isinstance(default, str):
        try:
            value = json.loads(value)
        except json.JSONDecodeError:
            if default is not None:
                raise ValidationError(f"cannot parse value {value!r} for {key}")
    if isinstance(default, bool) and not isinstance(value, bool):
        raise ValidationError(f"{key} must be a boolean")
    return value


def resolve_run_config(file_values=None, overrides=None, env=None):
    """Defaults < config file < FLARE_SEED < explicit flags. Unknown keys are rejected."""
    cfg = dict(RUN_DEFAULTS)
    for source in (file_values or {},):
        for k, v in source.items():
            if k not in RUN_DEFAULTS:
                raise ValidationError(f"unknown config key {k!r}")
            cfg[k] = _coerce(k, v)
    env = os.environ if env is None else env
    if env.get("FLARE_SEED") not in (None, ""):
        try:
            cfg["seed"] = int(env["FLARE_SEED"])
        except ValueError:
            raise ValidationError(f"FLARE_SEED must be an integer, got {env['FLARE_SEED']!r}")
    for k, v in (overrides or {}).items():
        if k not in RUN_DEFAULTS:
            raise ValidationError(f"unknown config key {k!r}")
        cfg[k] = _coerce(k, v)
    return cfg


def build_configs(run, d_in, d_out):
    m = {k: run[f"model.{k}"] for k in _MODEL_KEYS}
    for key, actual in (("d_in", d_in), ("d_out", d_out)):
        if m[key] is None:
            m[key] = actual
        elif m[key] != actual:
            raise ConfigError(f"model.{key}={m[key]} but data has {actual}")
    t = {k: run[f"train.{k}"] for k in _TRAIN_KEYS}
    try:
        return ModelConfig(seed=run["seed"], **m), TrainConfig(seed=run["seed"], **t)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def _load_json(path):
    try:
        values = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(values, dict):
        raise ValidationError("config file must hold a flat JSON object")
    return values


def _parse_sets(items):
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ValidationError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v
    return out


def _is_nonempty_dir(path):
    p = Path(path)
    return p.exists() and (not p.is_dir() or any(p.iterdir()))


def _write_csv(fh, header, rows):
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)


# ----------------------------------------------------------------------------
# gen-data
# ----------------------------------------------------------------------------

def cmd_gen_data(args):
    if args.grid < MIN_GRID:
        raise ValidationError(f"--grid must be >= {MIN_GRID}")
    if args.n_train < 1 or args.n_test < 0:
        raise ValidationError("--n-train must be >= 1 and --n-test >= 0")
    out = Path(args.out)
    if _is_nonempty_dir(out) and not args.force:
        raise ValidationError(f"{out} exists and is not empty (use --force)")
    train, test, manifest = generate_split(args.grid, args.n_train, args.n_test, args.seed)
    out.mkdir(parents=True, exist_ok=True)
    write_pcf(out / "train.pcf", train)
    write_pcf(out / "test.pcf", test)
    # stats from the float32 values that land on disk
    stats = compute_stats(read_pcf(out / "train.pcf"))
    generator = {"kind": "darcy", "grid": args.grid, "seed": args.seed,
                 "n_train": args.n_train, "n_test": args.n_test}
    write_meta(out / "train.meta.json", stats, generator, manifest)
    return EXIT_OK


# ----------------------------------------------------------------------------
# train
# ----------------------------------------------------------------------------

def _params_from_arrays(arrays, dtype):
    return {k: Tensor(v, requires_grad=True, dtype=dtype) for k, v in arrays.items()}


def _records_to_meta(log):
    return [[r.epoch, r.lr, r.train_rel_l2, r.test_rel_l2, r.seconds] for r in log]


def _records_from_meta(rows):
    return [EpochRecord(int(e), lr, tr, te, s) for e, lr, tr, te, s in rows]


def _save(path, model_cfg, train_cfg, run, stats, params, opt, log, epoch):
    meta = {"train": train_cfg.to_dict(), "run": run, "norm_stats": stats.to_dict(),
            "epoch": epoch, "log": _records_to_meta(log)}
    checkpoint_save(path, Checkpoint(model_config=model_cfg,
                                     params={k: v.data for k, v in params.items()},
                                     optimizer=opt, step=opt.step, meta=meta))


def cmd_train(args):
    file_values = _load_json(args.config) if args.config else {}
    overrides = _parse_sets(args.set)
    if args.data:
        overrides["data.dir"] = args.data
    if args.out:
        overrides["out.dir"] = args.out
    if args.seed is not None:
        overrides["seed"] = args.seed
    run = resolve_run_config(file_values, overrides)
    if not run["data.dir"] or not run["out.dir"]:
        raise ValidationError("data directory and output directory are required")
    data_dir, out = Path(run["data.dir"]), Path(run["out.dir"])
    train_set = read_pcf(data_dir / "train.pcf")
    test_path = data_dir / "test.pcf"
    test_set = read_pcf(test_path) if test_path.exists() else []
    if not train_set:
        raise ValidationError("training split is empty")
    model_cfg, train_cfg = build_configs(run, train_set[0].features.shape[1],
                                         train_set[0].labels.shape[1])
    run["model.d_in"], run["model.d_out"] = model_cfg.d_in, model_cfg.d_out
    every = int(run["checkpoint.every"])
    if every < 0:
        raise ValidationError("checkpoint.every must be >= 0")

    start_epoch, opt, log = 0, None, []
    if args.resume:
        ckpt = checkpoint_load(args.resume)
        if ckpt.model_config != model_cfg:
            raise ConfigError("checkpoint model config differs from the resolved config")
        if TrainConfig.from_dict(ckpt.meta["train"]) != train_cfg:
            raise ConfigError("checkpoint train config differs from the resolved config")
        params = _params_from_arrays(ckpt.params, train_cfg.dtype)
        opt = ckpt.optimizer or OptimizerState()
        log = _records_from_meta(ckpt.meta["log"])
        start_epoch = int(ckpt.meta["epoch"]) + 1
    elif _is_nonempty_dir(out) and not args.force:
        raise ValidationError(f"{out} exists and is not empty (use --force or --resume)")
    else:
        params = init_params(model_cfg, dtype=train_cfg.dtype)
    stats = compute_stats(train_set)

    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved.json").write_text(json.dumps(run, indent=2, sort_keys=True) + "\n")

    def on_epoch_end(epoch, params, opt_state, log_so_far):
        if every and (epoch + 1) % every == 0:
            _save(out / f"epoch_{epoch + 1:04d}.flck", model_cfg, train_cfg, run, stats,
                  params, opt_state, log_so_far, epoch)

    params, log, opt = fit(params, train_set, test_set, model_cfg, train_cfg, stats,
                           start_epoch=start_epoch, opt_state=opt, log=log,
                           on_epoch_end=on_epoch_end)
    with open(out / "run.csv", "w", newline="") as fh:
        _write_csv(fh, LOG_HEADER, [r.row() for r in log])
    _save(out / "final.flck", model_cfg, train_cfg, run, stats, params, opt, log,
          train_cfg.epochs - 1)
    return EXIT_OK


# ----------------------------------------------------------------------------
# eval / spectra
# ----------------------------------------------------------------------------

def _load_for_inference(path, samples):
    ckpt = checkpoint_load(path)
    cfg = ckpt.model_config
    if samples and samples[0].features.shape[1] != cfg.d_in:
        raise ConfigError(f"checkpoint expects d_in={cfg.d_in}, data has "
                          f"{samples[0].features.shape[1]}")
    if samples and samples[0].labels.shape[1] != cfg.d_out:
        raise ConfigError(f"checkpoint expects d_out={cfg.d_out}, data has "
                          f"{samples[0].labels.shape[1]}")
    stats = NormStats.from_dict(ckpt.meta["norm_stats"]) if "norm_stats" in ckpt.meta else None
    return ckpt, cfg, _params_from_arrays(ckpt.params, np.float32), stats


def eval_report(per_sample):
    return {"mean_rel_l2": float(np.mean(per_sample)), "per_sample": [float(e) for e in per_sample]}


def cmd_eval(args):
    samples = read_pcf(Path(args.data) / f"{args.split}.pcf")
    if not samples:
        raise ValidationError(f"{args.split} split is empty")
    _, cfg, params, stats = _load_for_inference(args.checkpoint, samples)
    report = eval_report(evaluate(params, samples, cfg, stats))
    print(json.dumps(report))
    return EXIT_OK


def block_queries_keys(params, cfg, x, block):
    """Per-head latent queries (H, M, D) and keys (H, N, D) entering ``block``."""
    with no_grad():
        h = model_forward(x, params, cfg, upto_block=block)
        bp = subtree(params, f"blocks.{block}")
        h = layer_norm(h, bp["ln1.gamma"], bp["ln1.beta"], cfg.layer_norm_eps)
        k = head_split(resmlp_forward(h, kv_config(cfg.C, cfg.L_kv), subtree(bp, "mixer.key")),
                       cfg.H)
        q = head_split(bp["mixer.latent"], cfg.H)
    return q.data.astype(np.float64), k.data.astype(np.float64)


def cmd_spectra(args):
    samples = read_pcf(Path(args.data) / f"{args.split}.pcf")
    if not 0 <= args.sample < len(samples):
        raise ValidationError(f"--sample {args.sample} out of range (0..{len(samples) - 1})")
    _, cfg, params, stats = _load_for_inference(args.checkpoint, samples)
    if not 0 <= args.block < cfg.B:
        raise ValidationError(f"--block {args.block} out of range (0..{cfg.B - 1})")
    sample = samples[args.sample]
    if cfg.M > sample.n_points:
        raise ValidationError("sample has fewer points than latent tokens")
    if args.check and sample.n_points > 1024:
        raise ValidationError("--check materializes N x N; use a sample with N <= 1024")
    x = sample.features.astype(np.float64)
    if stats is not None:
        x = (x - stats.feature_mean) / stats.feature_std
    q, k = block_queries_keys(params, cfg, x.astype(np.float32), args.block)

    rows, summary = [], {"block": args.block, "sample": args.sample, "heads": []}
    worst = 0.0
    for h in range(cfg.H):
        res = flare_spectrum(q[h], k[h])
        rows += [(h, i, repr(float(lam))) for i, lam in enumerate(res.eigenvalues)]
        entry = {"head": h, "effective_rank": effective_rank(res.eigenvalues, args.tau),
                 "top_eigenvalue": float(res.eigenvalues[0])}
        if args.check:
            ref, _ = dense_spectrum_oracle(q[h], k[h])
            diff = float(np.max(np.abs(res.eigenvalues - ref) / np.maximum(np.abs(ref), 1.0)))
            entry["max_rel_diff"] = diff
            worst = max(worst, diff)
        summary["heads"].append(entry)
    summary["tau"] = args.tau
    if args.check:
        summary["check_ok"] = worst <= 1e-8

    if args.out:
        with open(args.out, "w", newline="") as fh:
            _write_csv(fh, ["head", "index", "eigenvalue"], rows)
        print(json.dumps(summary))
    else:
        _write_csv(sys.stdout, ["head", "index", "eigenvalue"], rows)
        print(json.dumps(summary), file=sys.stderr)
    return EXIT_RUNTIME if args.check and not summary["check_ok"] else EXIT_OK


# ----------------------------------------------------------------------------
# bench
# ----------------------------------------------------------------------------

def _int_list(text):
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not vals or min(vals) < 1:
        raise argparse.ArgumentTypeError("sequence lengths must be positive")
    return vals


def cmd_bench(args):
    if args.c % args.h:
        raise ValidationError(f"--c {args.c} not divisible by --h {args.h}")
    if args.reps < 1 or args.threads < 1 or args.m < 1:
        raise ValidationError("--m, --reps and --threads must be positive")
    rows = benchmod.run_bench(args.mixer, args.n, args.m, args.c, args.h, args.reps, args.threads)
    out = [(n, mixer, m, repr(mean), repr(std)) for n, mixer, m, mean, std, _ in rows]
    if args.out:
        with open(args.out, "w", newline="") as fh:
            _write_csv(fh, benchmod.BENCH_HEADER, out)
    else:
        _write_csv(sys.stdout, benchmod.BENCH_HEADER, out)
    return EXIT_OK


# ----------------------------------------------------------------------------
# parser
# ----------------------------------------------------------------------------

def build_parser():
    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = argparse.ArgumentParser(prog="flare", description=__doc__, formatter_class=fmt)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic Darcy dataset", formatter_class=fmt)
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--grid", type=int, default=32, help="grid points per side (>= 8)")
    g.add_argument("--n-train", type=int, default=200, help="training samples")
    g.add_argument("--n-test", type=int, default=50, help="test samples")
    g.add_argument("--seed", type=int, default=0, help="generator seed")
    g.add_argument("--force", action="store_true", help="write into a non-empty directory")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a FLARE model", formatter_class=fmt)
    t.add_argument("--config", default=None, help="flat dotted-key JSON config file")
    t.add_argument("--data", default=None, help="dataset directory (overrides data.dir)")
    t.add_argument("--out", default=None, help="output directory (overrides out.dir)")
    t.add_argument("--seed", type=int, default=None, help="seed (overrides file and FLARE_SEED)")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", default=None,
                   help="override one config key; repeatable")
    t.add_argument("--resume", default=None, help="checkpoint to resume from")
    t.add_argument("--force", action="store_true", help="write into a non-empty directory")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="mean relative L2 of a checkpoint", formatter_class=fmt)
    e.add_argument("--checkpoint", required=True, help="FLCK checkpoint")
    e.add_argument("--data", required=True, help="dataset directory")
    e.add_argument("--split", default="test", choices=["train", "test"], help="split to score")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("spectra", help="eigenvalues of each head's communication matrix",
                       formatter_class=fmt)
    s.add_argument("--checkpoint", required=True, help="FLCK checkpoint")
    s.add_argument("--data", required=True, help="dataset directory")
    s.add_argument("--split", default="test", choices=["train", "test"], help="split to read")
    s.add_argument("--sample", type=int, default=0, help="sample index")
    s.add_argument("--block", type=int, default=0, help="block index (0-based)")
    s.add_argument("--tau", type=float, default=1e-3, help="relative effective-rank threshold")
    s.add_argument("--check", action="store_true", help="compare against the dense N x N oracle")
    s.add_argument("--out", default=None, help="CSV path (default: stdout)")
    s.set_defaults(func=cmd_spectra)

    b = sub.add_parser("bench", help="time mixer forward+backward vs N", formatter_class=fmt)
    b.add_argument("--mixer", choices=benchmod.MIXERS, default="flare", help="mixer to time")
    b.add_argument("--n", type=_int_list, default=[1024, 2048, 4096],
                   help="comma-separated sequence lengths")
    b.add_argument("--m", type=int, default=64, help="latent tokens (flare)")
    b.add_argument("--c", type=int, default=64, help="feature width")
    b.add_argument("--h", type=int, default=8, help="heads")
    b.add_argument("--reps", type=int, default=3, help="timed repetitions per N")
    b.add_argument("--threads", type=int, default=1, help="BLAS threads")
    b.add_argument("--out", default=None, help="CSV path (default: stdout)")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValidationError, ConfigError, FormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except FlareError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
