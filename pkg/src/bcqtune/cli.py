"""Command-line front end.

Exit codes: 0 success, 2 usage or configuration error, 3 data or integrity
error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path


from . import alphatune, gradcheck, qfile, tasks
from .bcq import ROW, Method, QuantConfig
from .errors import (CompatibilityError, ConfigError, InputError, IntegrityError,
                     ShapeError, TrainingDivergedError)
from .numkit import make_rng
from .toymodel import ModelConfig, count_trainable, count_trainable_geometry, init_dense, quantize_model

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


class NumericalFailure(Exception):
    pass


def _group_arg(text: str) -> int:
    if text.lower() == "row":
        return ROW
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"group size must be an integer or 'row', got {text!r}") from None
    if value <= 0:
        raise argparse.ArgumentTypeError("group size must be positive")
    return value


def _g_label(g: int) -> str:
    return "row" if g == ROW else str(g)


def _check_out(path: str, force: bool) -> Path:
    p = Path(path)
    if p.exists() and not force:
        raise UsageError(f"{p} exists; pass --force to overwrite")
    return p


def _print_table(header, rows, out=None) -> None:
    out = out or sys.stdout
    cells = [[str(c) for c in header]] + [[str(c) for c in row] for row in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    for row in cells:
        print("  ".join(c.ljust(w) if i == 0 else c.rjust(w)
                        for i, (c, w) in enumerate(zip(row, widths))), file=out)


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _emit(args, header, rows) -> None:
    _print_table(header, rows)
    if getattr(args, "csv", None):
        _write_csv(args.csv, header, rows)


# -- commands ---------------------------------------------------------------------------------

def cmd_init(args) -> int:
    out = _check_out(args.out, args.force)
    cfg = ModelConfig(vocab=args.vocab, h=args.h, n_layers=args.layers, n_ctx=args.n_ctx)
    qfile.save_dense(out, init_dense(cfg, args.seed))
    print(f"wrote dense model to {out} (vocab={cfg.vocab}, h={cfg.h}, layers={cfg.n_layers}, n_ctx={cfg.n_ctx})")
    return EXIT_OK


def _size_rows(geometry: ModelConfig, q: int, g: int):
    rows = []
    total = padded = 0
    for s in qfile.size_report(geometry, q, g):
        rows.append([s.name, f"({s.h_out},{s.h_in})", _g_label(g) if g == ROW else s.g, q,
                     s.plane_bytes, s.scale_bytes, s.total_bytes, f"{s.total_mb:.2f}", s.plane_padding_bytes])
        total += s.total_bytes
        padded += s.plane_padding_bytes
    n = geometry.n_layers
    rows.append([f"all x{n} layers", "", "", q, "", "", total * n, f"{total * n / qfile.MB:.2f}", padded * n])
    return rows


SIZE_HEADER = ["layer", "shape", "g", "q", "plane_bytes", "scale_bytes", "total_bytes", "MB", "padding_bytes"]


def _geometry(args) -> ModelConfig:
    return qfile.GEOMETRIES[args.geometry]


def cmd_quantize(args) -> int:
    if args.geometry:
        geometry = _geometry(args)
        print(f"dry run: {args.geometry} geometry (h={geometry.h}, {geometry.n_layers} layers), q={args.q}, g={_g_label(args.g)}")
        _emit(args, SIZE_HEADER, _size_rows(geometry, args.q, args.g))
        print(f"BCQ1 file size: {qfile.model_file_size(geometry, args.q, args.g) / qfile.MB:.1f} MB")
        return EXIT_OK
    if not args.model or not args.out:
        raise UsageError("quantize needs --model and --out (or --geometry for a dry run)")
    out = _check_out(args.out, args.force)
    dense = qfile.load_dense(args.model)
    qconfig = QuantConfig(q=args.q, g=args.g, method=args.method, alt_iterations=args.iters)
    report = []
    model = quantize_model(dense, qconfig, report=report)
    if qconfig.method is Method.ALTERNATING:
        greedy = []
        quantize_model(dense, QuantConfig(q=args.q, g=args.g), report=greedy)
        header = ["layer", "greedy_mse", f"alternating({args.iters})_mse"]
        rows = [[name, f"{gm:.6e}", f"{am:.6e}"] for (name, gm), (_, am) in zip(greedy, report)]
    else:
        header = ["layer", "greedy_mse"]
        rows = [[name, f"{m:.6e}"] for name, m in report]
    _emit(args, header, rows)
    print()
    _print_table(SIZE_HEADER, _size_rows(model.config, args.q, args.g))
    digest = qfile.save_model(out, model)
    print(f"wrote {out} ({out.stat().st_size} bytes, sha256 {digest.hex()[:16]}...)")
    return EXIT_OK


def _load_config(path) -> tuple[alphatune.TrainConfig, dict]:
    try:
        return alphatune.load_run_config(path)
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None


def cmd_finetune(args) -> int:
    config, quant = _load_config(args.config)
    if args.geometry:
        geometry = _geometry(args)
        g = quant.get("g", ROW)
        n = count_trainable_geometry(geometry.h, geometry.n_layers, g, config.trainable_planes)
        size = qfile.checkpoint_file_size(geometry, g, config.trainable_planes)
        print(f"dry run: {args.geometry} geometry, g={_g_label(g)}, planes={list(config.trainable_planes)}")
        print(f"trainable parameters: {n:,} ({n / 1e6:.2f}M)")
        print(f"checkpoint size: {size:,} bytes ({size / qfile.MB:.2f} MB)")
        return EXIT_OK
    if not (args.qmodel and args.data and args.ckpt_out):
        raise UsageError("finetune needs --qmodel, --data and --ckpt-out (or --geometry for a dry run)")
    ckpt_out = _check_out(args.ckpt_out, args.force)
    model = qfile.load_model(args.qmodel)
    for key in ("q", "g"):
        if key in quant and quant[key] != getattr(model.config, key):
            raise ConfigError(f"{key}: config says {quant[key]}, quantized model has {getattr(model.config, key)}")
    train_data = tasks.parse_data_spec(args.data)
    valid_data = tasks.parse_data_spec(args.valid) if args.valid else None
    model.trainable_planes = config.trainable_planes
    n = count_trainable(model)
    print(f"trainable parameters: {n:,}")
    try:
        model, history = alphatune.train(model, train_data, config, valid_data)
    except TrainingDivergedError as exc:
        qfile.save_checkpoint(ckpt_out, model, config.trainable_planes)
        print(f"training diverged: {exc}; wrote last good scales to {ckpt_out}", file=sys.stderr)
        return EXIT_NUMERIC
    qfile.save_checkpoint(ckpt_out, model, config.trainable_planes)
    history_out = Path(args.history_out) if args.history_out else ckpt_out.with_suffix(".history.csv")
    alphatune.write_history_csv(history_out, history)
    _print_table(["epoch", "train_loss", "valid_loss"],
                 [[r["epoch"], f"{r['train_loss']:.4f}", "" if r["valid_loss"] is None else f"{r['valid_loss']:.4f}"]
                  for r in history])
    print(f"checkpoint size: {ckpt_out.stat().st_size:,} bytes; history in {history_out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = qfile.load_model(args.qmodel)
    if args.ckpt:
        qfile.apply_checkpoint(model, args.ckpt)
    data = tasks.parse_data_spec(args.data)
    loss, acc = alphatune.evaluate(model, data)
    _emit(args, ["loss", "token_accuracy"], [[f"{loss:.6f}", f"{acc:.4f}"]])
    return EXIT_OK


def cmd_size_report(args) -> int:
    if args.qmodel:
        model = qfile.load_model(args.qmodel)
        geometry, q, g = model.config, model.config.q, model.config.g
    elif args.geometry:
        geometry, q, g = _geometry(args), args.q, args.g
    else:
        raise UsageError("size-report needs --geometry or --qmodel")
    _emit(args, SIZE_HEADER, _size_rows(geometry, q, g))
    base = qfile.model_file_size(geometry, q, g)
    ckpt = qfile.checkpoint_file_size(geometry, g)
    print(f"BCQ1 file: {base:,} bytes ({base / qfile.MB:.1f} MB); "
          f"alpha_1 checkpoint: {ckpt:,} bytes ({ckpt / qfile.MB:.2f} MB, {100 * ckpt / base:.3f}% of base)")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    model = qfile.load_model(args.qmodel)
    rng = make_rng(args.seed)
    T = min(model.config.n_ctx, 8)
    tokens = rng.integers(0, model.config.vocab, size=(2, T))
    targets = rng.integers(0, model.config.vocab, size=(2, T))
    planes = tuple(range(1, model.config.q + 1))
    fault = 1.5 if args.inject_fault else None
    probes = gradcheck.check_model_alphas(model, tokens, targets, rng, args.samples, planes, fault=fault)
    for _, layer in model.linear_layers():
        for p in gradcheck.check_layer(layer, rng, n_rows=2):
            if p.name == "input":
                probes.append(p)
    failed = [p for p in probes if not p.rel_error < args.tolerance]
    print(f"checked {len(probes)} gradient entries at tolerance {args.tolerance:g}: "
          f"{'PASS' if not failed else 'FAIL'}; worst relative error "
          f"{max(p.rel_error for p in probes):.3e}")
    if failed:
        _print_table(["entry", "index", "analytic", "numeric", "rel_error"],
                     [[p.name, p.index, f"{p.analytic:.6e}", f"{p.numeric:.6e}", f"{p.rel_error:.3e}"]
                      for p in gradcheck.worst(failed)])
        raise NumericalFailure(f"{len(failed)} entries exceed tolerance")
    return EXIT_OK


def cmd_export_history(args) -> int:
    history = alphatune.read_history_csv(args.history)
    rows = [[r["epoch"], r["train_loss"], "" if r["valid_loss"] is None else r["valid_loss"]] for r in history]
    if args.format == "json":
        text = json.dumps(history, indent=2)
        if args.out:
            Path(args.out).write_text(text + "\n", encoding="utf-8")
        else:
            print(text)
    elif args.format == "csv":
        if args.out:
            alphatune.write_history_csv(args.out, history)
        else:
            w = csv.writer(sys.stdout, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "valid_loss"])
            w.writerows(rows)
    else:
        _print_table(["epoch", "train_loss", "valid_loss"],
                     [[e, f"{t:.4f}", v if v == "" else f"{v:.4f}"] for e, t, v in rows])
    return EXIT_OK


# -- parser -----------------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bcqtune", description="BCQ quantization and scale-only fine-tuning")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init", help="create a random full-precision toy model")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--h", type=int, default=32)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--vocab", type=int, default=tasks.reversal_vocab())
    p.add_argument("--n-ctx", type=int, default=16)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("quantize", help="post-training BCQ quantization of a dense model")
    p.add_argument("--model")
    p.add_argument("--q", type=int, default=3)
    p.add_argument("--g", type=_group_arg, default=ROW, help="group size or 'row'")
    p.add_argument("--method", choices=[m.value for m in Method], default=Method.GREEDY.value)
    p.add_argument("--iters", type=int, default=15)
    p.add_argument("--out")
    p.add_argument("--geometry", choices=sorted(qfile.GEOMETRIES), help="size table only, no weights")
    p.add_argument("--csv")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("finetune", help="train alpha planes and write a task checkpoint")
    p.add_argument("--qmodel")
    p.add_argument("--config", required=True)
    p.add_argument("--data", help="reversal:n=..,k=..,seed=.. or an .npz file")
    p.add_argument("--valid")
    p.add_argument("--ckpt-out")
    p.add_argument("--history-out")
    p.add_argument("--geometry", choices=sorted(qfile.GEOMETRIES),
                   help="print trainable count and checkpoint size only")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="loss and token accuracy of a quantized model")
    p.add_argument("--qmodel", required=True)
    p.add_argument("--ckpt")
    p.add_argument("--data", required=True)
    p.add_argument("--csv")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("size-report", help="storage of quantized layers")
    p.add_argument("--geometry", choices=sorted(qfile.GEOMETRIES))
    p.add_argument("--qmodel")
    p.add_argument("--q", type=int, default=3)
    p.add_argument("--g", type=_group_arg, default=ROW)
    p.add_argument("--csv")
    p.set_defaults(func=cmd_size_report)

    p = sub.add_parser("gradcheck", help="finite-difference check of alpha and input gradients")
    p.add_argument("--qmodel", required=True)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--samples", type=int, default=4, help="alpha entries per layer and plane")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--inject-fault", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("export-history", help="render a training history CSV")
    p.add_argument("--history", required=True)
    p.add_argument("--format", choices=["table", "csv", "json"], default="table")
    p.add_argument("--out")
    p.set_defaults(func=cmd_export_history)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (IntegrityError, CompatibilityError, InputError, ShapeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalFailure, TrainingDivergedError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
