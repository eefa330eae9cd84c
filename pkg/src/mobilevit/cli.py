"""``mobilevit`` command line: params, verify, bench, train, sampler-sim.

Exit status: 0 success, 1 a suite or check failed, 2 usage error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import statistics
import sys
import time
from pathlib import Path

import numpy as np

from . import _kernels
from .model import ARCHS, ModelConfig, attention_cost, build, count_params, param_breakdown, parse_patch_config, save_weights
from .rng import Rng
from .sampler import DEFAULT_RESOLUTIONS, ResolutionSet, count_updates, draw_batches, expected_updates, write_plan_csv
from .tensor import Tensor, no_grad

EXIT_FAIL = 1
EXIT_USAGE = 2


class UsageError(Exception):
    pass


def _variant(value: str) -> str:
    v = value.upper()
    if v not in ARCHS:
        raise argparse.ArgumentTypeError(f"unknown variant {value!r} (choose from {', '.join(ARCHS)})")
    return v


def _patch(value: str) -> tuple:
    try:
        return parse_patch_config(value)
    except ValueError as e:
        raise argparse.ArgumentTypeError(str(e)) from None


def _resolutions(value: str) -> tuple:
    out = []
    for item in value.split(","):
        item = item.strip().lower()
        try:
            h, _, w = item.partition("x")
            out.append((int(h), int(w or h)))
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad resolution {item!r}; use e.g. 160,192 or 160x160") from None
    return tuple(out)


# -- params ----------------------------------------------------------------------------


def cmd_params(args) -> int:
    model = build(ModelConfig(variant=args.variant, patch=args.patch_config), args.seed)
    total = count_params(model)
    stages = param_breakdown(model)
    if args.json:
        print(json.dumps({"variant": args.variant, "patch": list(args.patch_config), "total": total,
                          "stages": stages}, indent=2))
        return 0
    print(f"MobileViT-{args.variant}  patch {','.join(map(str, args.patch_config))}")
    print(f"{'stage':<12}{'params':>12}{'mv2':>12}{'mobilevit':>12}")
    for name, row in stages.items():
        print(f"{name:<12}{row['total']:>12,}{row['mv2']:>12,}{row['mobilevit']:>12,}")
    print(f"{'total':<12}{total:>12,}  ({total / 1e6:.2f} M)")
    return 0


# -- verify ----------------------------------------------------------------------------


def cmd_verify(args) -> int:
    from .verify import SUITES, reports_json, run_suite

    names = args.suite or list(SUITES)
    for n in names:
        if n not in SUITES:
            raise UsageError(f"unknown suite {n!r} (choose from {', '.join(SUITES)})")
    reports = []
    for n in names:
        rep = run_suite(n, seed=args.seed)
        reports.append(rep)
        if not args.json:
            print(f"{rep.to_text()}  [{rep.seconds:.1f}s]")
    text = reports_json(reports)
    if args.json:
        print(text)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(text)
    ok = all(r.passed for r in reports)
    if not args.json:
        print("ALL PASSED" if ok else "FAILURES")
    return 0 if ok else EXIT_FAIL


# -- bench -----------------------------------------------------------------------------


def cmd_bench(args) -> int:
    if args.backend:
        try:
            _kernels.use(args.backend)
        except ValueError as e:
            raise UsageError(str(e)) from None
    cfg = ModelConfig(variant=args.variant, patch=args.patch_config)
    model = build(cfg, args.seed).eval()
    x = Tensor(Rng(args.seed).split("bench").normal((args.batch, 3, args.resolution, args.resolution)))
    times = []
    with no_grad():
        for _ in range(args.warmup):
            model(x)
        for _ in range(args.repeats):
            t0 = time.perf_counter()
            model(x)
            times.append(time.perf_counter() - t0)
    cost = attention_cost(cfg, args.resolution, args.resolution)
    result = {
        "variant": args.variant, "resolution": args.resolution, "batch": args.batch,
        "patch": list(cfg.patch), "backend": _kernels.active(), "repeats": args.repeats,
        "mean_ms": 1e3 * statistics.fmean(times),
        "attention_macs": cost["attention_total"], "projection_macs": cost["projection_total"],
        "ffn_macs": cost["ffn_total"], "blocks": cost["blocks"],
    }
    if args.repeats > 1:
        result["stdev_ms"] = 1e3 * statistics.stdev(times)
    if args.json:
        print(json.dumps(result, indent=2))
    else:
        spread = f" +- {result['stdev_ms']:.2f}" if "stdev_ms" in result else ""
        print(f"MobileViT-{args.variant} @ {args.resolution}x{args.resolution}, batch {args.batch}, "
              f"patch {','.join(map(str, cfg.patch))}, {result['backend']} kernels")
        print(f"  wall time: {result['mean_ms']:.2f}{spread} ms over {args.repeats} run(s)")
        print(f"  attention MACs: {cost['attention_total']:,}  projection: {cost['projection_total']:,}  "
              f"ffn: {cost['ffn_total']:,}")
        for b in cost["blocks"]:
            print(f"    {b['stage']}: feature {b['feature'][0]}x{b['feature'][1]}, P={b['P']}, N={b['N']}, "
                  f"d={b['d']}, L={b['layers']}: N^2*P*d = {b['attention_per_layer']:,} per layer")
    return 0


# -- train -----------------------------------------------------------------------------

DATA_KEYS = {"dataset_size": int, "val_size": int, "classes": int, "image_size": int}


def read_config_file(path) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise UsageError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        out[key.strip()] = value.strip()
    return out


def _coerce(key: str, value: str, current):
    if key == "resolutions":
        return _resolutions(value)
    if isinstance(current, bool):
        if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
            raise UsageError(f"{key}: expected a boolean, got {value!r}")
        return value.lower() in ("true", "1", "yes")
    try:
        return type(current)(value)
    except ValueError:
        raise UsageError(f"{key}: cannot parse {value!r} as {type(current).__name__}") from None


def cmd_train(args) -> int:
    from .train import TrainConfig, load_image_folder, micro_config, synthetic_blobs, train_toy, write_metrics

    cfg = TrainConfig()
    data_opts = {"dataset_size": 256, "val_size": 128, "classes": 4, "image_size": 64}
    fields = {f.name for f in dataclasses.fields(TrainConfig)}
    settings = read_config_file(args.config) if args.config else {}
    for flag in ("sampler", "seed", "epochs"):
        if getattr(args, flag) is not None:
            settings[flag] = str(getattr(args, flag))
    updates = {}
    for key, value in settings.items():
        if key in DATA_KEYS:
            data_opts[key] = _coerce(key, value, DATA_KEYS[key](0))
        elif key in fields:
            updates[key] = _coerce(key, value, getattr(cfg, key))
        else:
            raise UsageError(f"unknown config key {key!r}")
    try:
        cfg = dataclasses.replace(cfg, **updates)
    except ValueError as e:
        raise UsageError(str(e)) from None

    if args.data == "synthetic":
        train_data = synthetic_blobs(data_opts["dataset_size"], data_opts["classes"], data_opts["image_size"],
                                     seed=cfg.seed)
        val_data = synthetic_blobs(data_opts["val_size"], data_opts["classes"], data_opts["image_size"],
                                   seed=cfg.seed + 1_000_003)
    else:
        if not Path(args.data).is_dir():
            raise UsageError(f"data directory {args.data!r} does not exist")
        train_data = load_image_folder(args.data, data_opts["image_size"])
        val_data = None
    result = train_toy(micro_config(len(train_data.classes)), train_data, cfg, val_data)
    write_metrics(args.out, result)
    save_weights(Path(args.out) / "weights.mvtw", result["model"])
    s = result["summary"]
    print(f"{cfg.epochs} epochs, {s['updates']} updates ({cfg.sampler} sampler, "
          f"{s['updates_per_epoch'][0]} in epoch 0); "
          f"train loss {s['initial_train_loss']:.4f} -> {s['final_train_loss']:.4f}, "
          f"val top1 {s['final_val_top1']:.3f} (EMA {s['final_val_ema_top1']:.3f}); wrote {args.out}")
    return 0


# -- sampler-sim -----------------------------------------------------------------------


def cmd_sampler_sim(args) -> int:
    rset = ResolutionSet(args.resolutions, args.batch)
    std = count_updates(None, args.dataset_size, args.epochs, args.batch)
    plans = [(e, draw_batches(rset, args.dataset_size, args.seed, e)) for e in range(args.epochs)]
    ms = sum(len(p) for _, p in plans)
    result = {
        "dataset_size": args.dataset_size, "epochs": args.epochs, "base_batch": args.batch,
        "resolutions": [list(r) for r in rset.resolutions], "batch_sizes": rset.batch_sizes(),
        "standard_updates": std, "multiscale_updates": ms,
        "multiscale_expected": round(expected_updates(rset, args.dataset_size, args.epochs), 1),
        "seed": args.seed,
    }
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_plan_csv(out / "plan.csv", plans)
        (out / "report.json").write_text(json.dumps(result, indent=2))
    if args.json:
        print(json.dumps(result, indent=2))
    else:
        print(f"batch sizes: " + ", ".join(f"{h}x{w}:{b}" for (h, w), b in zip(rset.resolutions, rset.batch_sizes())))
        print(f"standard updates:    {std:,}")
        print(f"multi-scale updates: {ms:,}  (renewal estimate {result['multiscale_expected']:,})")
    return 0


# -- entry -----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mobilevit", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("params", help="parameter count and per-stage breakdown")
    sp.add_argument("--variant", type=_variant, default="S")
    sp.add_argument("--patch-config", type=_patch, default=(2, 2, 2), help="A, B or e.g. 8,4,2")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--json", action="store_true")
    sp.set_defaults(func=cmd_params)

    sp = sub.add_parser("verify", help="run structural check suites")
    sp.add_argument("--suite", action="append", help="suite name (repeatable); default all")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--json", action="store_true")
    sp.add_argument("--out", help="directory for report.json")
    sp.set_defaults(func=cmd_verify)

    sp = sub.add_parser("bench", help="time eval-mode forward passes")
    sp.add_argument("--variant", type=_variant, default="XS")
    sp.add_argument("--resolution", type=int, default=256)
    sp.add_argument("--patch-config", type=_patch, default=(2, 2, 2))
    sp.add_argument("--repeats", type=int, default=10)
    sp.add_argument("--warmup", type=int, default=1)
    sp.add_argument("--batch", type=int, default=1)
    sp.add_argument("--backend", choices=["compiled", "python"])
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--json", action="store_true")
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("train", help="toy-scale training run")
    sp.add_argument("--config", help="key=value config file")
    sp.add_argument("--data", default="synthetic", help="'synthetic' or an image-folder root")
    sp.add_argument("--sampler", choices=["standard", "multiscale"])
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", default="runs/train")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("sampler-sim", help="standard vs multi-scale update counts")
    sp.add_argument("--dataset-size", type=int, default=1_281_167)
    sp.add_argument("--epochs", type=int, default=300)
    sp.add_argument("--batch", type=int, default=1024)
    sp.add_argument("--resolutions", type=_resolutions, default=DEFAULT_RESOLUTIONS)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--json", action="store_true")
    sp.add_argument("--out", help="directory for plan.csv and report.json")
    sp.set_defaults(func=cmd_sampler_sim)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"mobilevit: error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
