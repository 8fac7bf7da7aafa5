"""``eegtrm`` command line.

Exit codes: 0 success, 2 validation error, 3 numerical error. Errors are
reported on stderr as ``eegtrm: error: <kind>: <message>``.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import platform
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .datasets import (
    SynthSpec,
    baseline_correct,
    default_active_cells,
    generate_synthetic,
    load_segments,
    save_segments,
)
from .errors import NumericalError, ValidationError
from .hostnet import HostNetConfig, build_model
from .metrics import accuracy_table_csv, paired_ttest
from .montage import SHIPPED_MONTAGES, Montage, load_montage, map_to_topographic, shipped_montage
from .numerics import precision_dtype
from .training import SplitPlan, TrainConfig, evaluate, make_splits, train_run
from .trm import count_parameters, derive_schedule

log = logging.getLogger("eegtrm")

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 2, 3
MAP_HEADER_DTYPE = "<u4"
MAP_VALUE_DTYPE = "<f4"


def _parse_grid(text: str) -> tuple[int, int]:
    try:
        h, w = text.lower().split("x")
        grid = int(h), int(w)
    except ValueError:
        raise ValidationError(f"malformed grid {text!r}; expected HxW, e.g. 7x9") from None
    if min(grid) < 1:
        raise ValidationError(f"grid dims must be positive, got {text!r}")
    return grid


def _montage(arg: str) -> Montage:
    """A montage file path, or the name of a shipped montage."""
    if arg in SHIPPED_MONTAGES and not Path(arg).exists():
        return shipped_montage(arg)
    return load_montage(arg)


def _trm_k(text: str) -> int | None:
    if text == "none":
        return None
    if text in ("3", "5"):
        return int(text)
    raise ValidationError(f"--trm must be none, 3 or 5, got {text!r}")


def _sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_schedule(args) -> int:
    schedule = derive_schedule(_parse_grid(args.grid), args.k)
    rows = [[i, f"{s.kernel_h}x{s.kernel_w}", f"{s.out_h}x{s.out_w}", int(s.has_bias)] for i, s in enumerate(schedule)]
    if args.format == "csv":
        w = csv.writer(sys.stdout, lineterminator="\n")
        w.writerow(["step", "kernel", "output", "bias"])
        w.writerows(rows)
    else:
        print(f"TRM-({args.k},{args.k}) on {args.grid}: {len(schedule)} steps")
        for step, kernel, out, bias in rows:
            print(f"  step {step}: kernel {kernel:<5} -> {out:<5} bias={'yes' if bias else 'no'}")
    return EXIT_OK


def cmd_params(args) -> int:
    montage = _montage(args.montage)
    print(count_parameters(montage.n_channels, derive_schedule(montage.grid, args.k)))
    return EXIT_OK


def cmd_map(args) -> int:
    montage = _montage(args.montage)
    data = load_segments(args.data)
    if not 0 <= args.segment < len(data):
        raise ValidationError(f"segment index {args.segment} out of range for {len(data)} segments")
    tensor = map_to_topographic(data.data[args.segment], montage, data.channel_names)
    header = np.array([tensor.height, tensor.width, tensor.time_points, 0], dtype=MAP_HEADER_DTYPE)
    Path(args.out).write_bytes(header.tobytes() + tensor.values.astype(MAP_VALUE_DTYPE).tobytes())
    return EXIT_OK


def read_map_dump(path: str | Path) -> np.ndarray:
    """Inverse of ``eegtrm map``: returns the H x W x TP array."""
    buf = Path(path).read_bytes()
    if len(buf) < 16:
        raise ValidationError(f"{path}: truncated map header")
    h, w, tp, _ = np.frombuffer(buf, dtype=MAP_HEADER_DTYPE, count=4)
    values = np.frombuffer(buf, dtype=MAP_VALUE_DTYPE, offset=16)
    if values.size != h * w * tp:
        raise ValidationError(f"{path}: payload holds {values.size} values, header says {h * w * tp}")
    return values.reshape(int(h), int(w), int(tp))


def cmd_gen(args) -> int:
    montage = _montage(args.montage)
    spec = SynthSpec(
        montage=montage,
        active_cells=default_active_cells(montage, args.classes, args.cells_per_class),
        amplitude=args.amplitude,
        sigma=args.sigma,
        band_hz=(args.band_low, args.band_high),
        time_points=args.tp,
        sample_rate_hz=args.rate,
        segments_per_class=args.per_class,
        seed=args.seed,
    )
    save_segments(generate_synthetic(spec), args.out)
    return EXIT_OK


def _prepare(data, montage: Montage, baseline_ms: float | None):
    montage.check_channel_names(data.channel_names)
    if baseline_ms:
        data = baseline_correct(data, baseline_ms)
    return data


def cmd_train(args) -> int:
    dtype = precision_dtype()
    montage = _montage(args.montage)
    trm_k = _trm_k(args.trm)
    data = _prepare(load_segments(args.data), montage, args.baseline_ms)
    test_data = None
    if args.protocol == "split":
        if not args.test_data:
            raise ValidationError("--protocol split needs --test-data (the fixed test set)")
        test_data = _prepare(load_segments(args.test_data), montage, args.baseline_ms)
        if test_data.data.shape[1:] != data.data.shape[1:]:
            raise ValidationError("training and test segments differ in shape")
    host = HostNetConfig(n_classes=data.n_classes, dropout_p=args.dropout)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    X, y = data.data, data.labels
    if args.protocol == "cv4":
        splits = make_splits(len(y), y, SplitPlan("fourfold_cv", seed=args.seed))
        runs = [(s.train, s.val, (X[s.test], y[s.test])) for s in splits]
    else:
        runs = []
        for r in range(args.repeats):
            (s,) = make_splits(len(y), y, SplitPlan("fixed_test_with_val_split", seed=args.seed + r))
            runs.append((s.train, s.val, (test_data.data, test_data.labels)))

    results, curves, summaries = [], [], []
    for fold, (tr, va, test) in enumerate(runs):
        cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch, weight_decay=args.wd,
                          learning_rate=args.lr, seed=args.seed + fold)
        model = build_model(host, data.n_channels, data.time_points, montage, trm_k, seed=cfg.seed, dtype=dtype)
        if fold == 0:
            (out / "model_summary.txt").write_text(model.summary_text() + "\n", encoding="utf-8")
            (out / "model_summary.csv").write_text(model.summary_csv(), encoding="utf-8")
        report, best = train_run(model, (X[tr], y[tr]), (X[va], y[va]), test, cfg)
        curve = out / f"fold{fold}_curve.csv"
        curve.write_text(report.curve_csv(), encoding="utf-8")
        ckpt = out / f"fold{fold}_best.trmc"
        save_checkpoint(ckpt, best)
        summary = {"fold": fold, **report.summary(), "n_train": len(tr), "n_val": len(va), "n_test": len(test[1])}
        (out / f"fold{fold}_summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
        results.append([fold, report.best_epoch, f"{report.test_accuracy:.6f}"])
        curves.append(str(curve))
        summaries.append(summary)
        log.info("fold %d: best epoch %d, test accuracy %.4f (%.1fs)",
                 fold, report.best_epoch, report.test_accuracy, report.wall_time_seconds)

    accs = np.array([s["test_accuracy"] for s in summaries])
    sd = float(np.std(accs, ddof=1)) if len(accs) > 1 else 0.0
    results.append(["mean", f"{np.mean([s['best_epoch'] for s in summaries]):.2f}", f"{accs.mean():.6f}"])
    results.append(["sd", "", f"{sd:.6f}"])
    _write_csv(out / "results.csv", ["fold", "best_epoch", "test_accuracy"], results)

    manifest = {
        "command": "train",
        "config": {
            "data": str(args.data),
            "data_sha256": _sha256(args.data),
            "test_data": args.test_data,
            "test_data_sha256": _sha256(args.test_data) if args.test_data else None,
            "montage": montage.to_dict(),
            "trm_k": trm_k,
            "protocol": args.protocol,
            "repeats": len(runs),
            "baseline_ms": args.baseline_ms,
            "host": asdict(host),
            "train": asdict(TrainConfig(epochs=args.epochs, batch_size=args.batch, weight_decay=args.wd,
                                        learning_rate=args.lr, seed=args.seed)),
            "fold_seeds": [args.seed + f for f in range(len(runs))],
            "precision": "check" if dtype == np.float64 else "fast",
            "n_channels": data.n_channels,
            "time_points": data.time_points,
            "n_classes": data.n_classes,
        },
        "artifacts": {
            "curves": curves,
            "checkpoints": [str(out / f"fold{f}_best.trmc") for f in range(len(runs))],
            "results": str(out / "results.csv"),
        },
        "versions": {"eegtrm": __version__, "numpy": np.__version__, "python": platform.python_version()},
        "seed": args.seed,
        "mean_test_accuracy": float(accs.mean()),
        "sd_test_accuracy": sd,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    print(f"mean test accuracy {accs.mean():.4f} ± {sd:.4f} over {len(runs)} runs")
    return EXIT_OK


def cmd_eval(args) -> int:
    run = Path(args.run)
    manifest = json.loads((run / "manifest.json").read_text(encoding="utf-8"))
    cfg = manifest["config"]
    montage = Montage(
        name=cfg["montage"]["name"],
        grid_height=cfg["montage"]["grid_height"],
        grid_width=cfg["montage"]["grid_width"],
        channels=tuple((c["name"], c["row"], c["col"]) for c in cfg["montage"]["channels"]),
    )
    data = _prepare(load_segments(args.data), montage, cfg["baseline_ms"])
    host = HostNetConfig(**cfg["host"])
    dtype = np.float64 if cfg["precision"] == "check" else np.float32
    folds = range(len(manifest["artifacts"]["checkpoints"])) if args.fold is None else [args.fold]
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["fold", "loss", "accuracy"])
    for f in folds:
        model = build_model(host, data.n_channels, data.time_points, montage, cfg["trm_k"], dtype=dtype)
        model.load_state_dict(load_checkpoint(run / f"fold{f}_best.trmc"))
        loss, acc = evaluate(model, data.data, data.labels)
        w.writerow([f, f"{loss:.6f}", f"{acc:.6f}"])
    return EXIT_OK


def _read_columns(path: str) -> tuple[list[str], dict[str, list[str]]]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValidationError(f"{path}: no data rows")
    return list(rows[0].keys()), {k: [r[k] for r in rows] for k in rows[0]}


def _floats(values: list[str], name: str) -> list[float]:
    try:
        return [float(v) for v in values]
    except ValueError:
        raise ValidationError(f"column {name!r} is not numeric") from None


def cmd_compare(args) -> int:
    header, cols = _read_columns(args.csv)
    numeric = []
    for k in header:
        try:
            numeric.append((k, [float(v) for v in cols[k]]))
        except ValueError:
            pass
    names = [args.a, args.b] if args.a and args.b else [k for k, _ in numeric[:2]]
    for n in names:
        if n not in cols:
            raise ValidationError(f"no column {n!r} in {args.csv}")
    if len(names) < 2:
        raise ValidationError("need two numeric columns to compare")
    res = paired_ttest(_floats(cols[names[0]], names[0]), _floats(cols[names[1]], names[1]))
    print(f"t={res.t_statistic:.6f} df={res.degrees_of_freedom} p={res.p_value:.6g}")
    if args.table:
        subjects = cols.get("subject") or cols.get("Subject")
        table = accuracy_table_csv(dict(numeric), subjects)
        Path(args.table).write_text(table, encoding="utf-8")
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="eegtrm", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("schedule", help="list the TRM kernel schedule for a grid")
    s.add_argument("--grid", required=True, help="HxW, e.g. 7x9")
    s.add_argument("--k", type=int, required=True, choices=range(2, 100), metavar="K")
    s.add_argument("--format", choices=["text", "csv"], default="text")
    s.set_defaults(func=cmd_schedule)

    s = sub.add_parser("params", help="count trainable TRM parameters for a montage")
    s.add_argument("--montage", required=True, help=f"montage file or one of {', '.join(SHIPPED_MONTAGES)}")
    s.add_argument("--k", type=int, required=True, choices=[3, 5])
    s.set_defaults(func=cmd_params)

    s = sub.add_parser("map", help="dump one segment as an H x W x TP topographic tensor")
    s.add_argument("--data", required=True)
    s.add_argument("--montage", required=True)
    s.add_argument("--segment", type=int, required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_map)

    s = sub.add_parser("gen", help="generate a synthetic spatially-localised dataset")
    s.add_argument("--montage", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--classes", type=int, default=2)
    s.add_argument("--cells-per-class", type=int, default=4)
    s.add_argument("--per-class", type=int, default=100)
    s.add_argument("--tp", type=int, default=128)
    s.add_argument("--rate", type=float, default=128.0)
    s.add_argument("--amplitude", type=float, default=4.0)
    s.add_argument("--sigma", type=float, default=1.0)
    s.add_argument("--band-low", type=float, default=8.0)
    s.add_argument("--band-high", type=float, default=13.0)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_gen)

    d = TrainConfig()
    s = sub.add_parser("train", help="train raw->host or raw->TRM->host under a split protocol")
    s.add_argument("--data", required=True)
    s.add_argument("--montage", required=True)
    s.add_argument("--trm", default="none", choices=["none", "3", "5"])
    s.add_argument("--protocol", default="cv4", choices=["cv4", "split"])
    s.add_argument("--test-data", help="fixed test set for --protocol split")
    s.add_argument("--repeats", type=int, default=4, help="runs for --protocol split")
    s.add_argument("--epochs", type=int, default=d.epochs)
    s.add_argument("--batch", type=int, default=d.batch_size)
    s.add_argument("--wd", type=float, default=d.weight_decay)
    s.add_argument("--lr", type=float, default=d.learning_rate)
    s.add_argument("--dropout", type=float, default=0.5)
    s.add_argument("--baseline-ms", type=float, default=None, help="segment-wise baseline correction window")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate the checkpoints of a train run on a dataset")
    s.add_argument("--run", required=True, help="output directory of a train run")
    s.add_argument("--data", required=True)
    s.add_argument("--fold", type=int)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("compare", help="two-tailed paired t-test between two CSV columns")
    s.add_argument("csv")
    s.add_argument("--a", help="first column (default: first numeric column)")
    s.add_argument("--b", help="second column (default: second numeric column)")
    s.add_argument("--table", help="also write a per-subject accuracy table to this CSV")
    s.set_defaults(func=cmd_compare)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"eegtrm: error: validation: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except NumericalError as exc:
        print(f"eegtrm: error: numerical: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"eegtrm: error: validation: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
