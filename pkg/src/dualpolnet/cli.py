"""Command-line entry point.

Subcommands: ``synth`` (generate a synthetic chip dataset), ``train``,
``eval``, ``ablate``, and ``params``. Every run resolves one flat JSON
config (defaults <- --config file <- --seed override) with strict key
checking, writes artifacts atomically under --out, and renders report
figures next to the delimited outputs unless --no-figures is given.

Exit status is 0 on success; failures print one ``error: ...`` line on
stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .config import flat_from_configs, load_config_file
from .drdlf import count_params
from .errors import ConfigError, FormatError, ShapeError
from .harness import (ABLATION_AXES, ablation_suite, build_model, evaluate,
                      evaluate_predictions, read_jsonl, train, write_csv, write_jsonl)
from .sardata import DatasetManifest, class_names, load_manifest, synth_chip, write_chip, write_manifest
from .seeding import derive_seed
from .tensor import set_default_dtype
from .weights import load_weights, save_weights


def _add_common(p: argparse.ArgumentParser, with_out: bool = True) -> None:
    p.add_argument("--config", help="flat JSON config file")
    p.add_argument("--seed", type=int, default=None, help="root seed (overrides the config)")
    if with_out:
        p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--workers", type=int, default=1, help="data-loading workers (1 = sequential)")
    p.add_argument("--precision", choices=("f32", "f64"), default="f32")
    p.add_argument("--print-config", action="store_true", help="dump the resolved config to stdout")
    p.add_argument("--no-figures", action="store_true", help="skip rendering report figures")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dualpolnet",
                                     description="dual-polarization guided SAR ship classifier")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic dual-pol chips plus manifests")
    _add_common(p)
    p.add_argument("--classes", type=int, default=3, help="number of ship classes")
    p.add_argument("--per-class", type=int, default=8, help="chips per class (split 50/50)")
    p.add_argument("--size", type=int, default=64, help="chip height/width in pixels")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train from a manifest and save weights")
    _add_common(p)
    p.add_argument("--manifest", required=True, help="training manifest (JSON lines)")
    p.add_argument("--classes-file", help="class table JSON (default: classes.json next to the manifest)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate weights (or a stub) on a manifest")
    _add_common(p)
    p.add_argument("--manifest", help="evaluation manifest (JSON lines)")
    p.add_argument("--classes-file", help="class table JSON (default: classes.json next to the manifest)")
    p.add_argument("--weights", help="DPGW weight snapshot")
    p.add_argument("--stub-identity", action="store_true",
                   help="bypass the model: predict every chip's true label")
    p.add_argument("--predictions", help="JSONL of {\"label\": int, \"pred\": int} rows; bypasses the model")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="sweep one configuration axis")
    _add_common(p)
    p.add_argument("--axis", required=True, choices=ABLATION_AXES)
    p.add_argument("--manifest", help="training manifest")
    p.add_argument("--test-manifest", help="evaluation manifest")
    p.add_argument("--classes-file", help="class table JSON (default: classes.json next to the manifest)")
    p.add_argument("--structural", action="store_true",
                   help="emit configs and parameter counts without training")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("params", help="print the trainable-parameter count")
    _add_common(p, with_out=False)
    p.set_defaults(func=cmd_params)
    return parser


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _configs(args):
    overrides = {"seed": args.seed} if args.seed is not None else {}
    mcfg, tcfg = load_config_file(args.config, overrides)
    if args.print_config:
        print(json.dumps(flat_from_configs(mcfg, tcfg), indent=2))
    return mcfg, tcfg


def _write_json(doc: dict, path: str) -> None:
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def _load_manifest_arg(args, attr: str = "manifest"):
    path = getattr(args, attr)
    if not path:
        raise ConfigError(f"--{attr.replace('_', '-')} is required here")
    classes_file = args.classes_file or os.path.join(os.path.dirname(os.path.abspath(path)),
                                                     "classes.json")
    return load_manifest(path, classes_file)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    mcfg, _ = _configs(args)
    if args.per_class < 1:
        raise ConfigError(f"--per-class must be >= 1, got {args.per_class}")
    if args.classes < 2:
        raise ConfigError(f"--classes must be >= 2, got {args.classes}")
    root = mcfg.seed
    out = args.out
    os.makedirs(os.path.join(out, "chips"), exist_ok=True)
    names = class_names(args.classes)
    train_recs: list[tuple[str, int]] = []
    test_recs: list[tuple[str, int]] = []
    for cls in range(args.classes):
        for i in range(args.per_class):
            rel = os.path.join("chips", f"c{cls}_{i:04d}.sarc")
            chip = synth_chip(cls, derive_seed(root, f"chip.{cls}.{i}"), size=args.size)
            write_chip(chip, os.path.join(out, rel))
            (train_recs if i < (args.per_class + 1) // 2 else test_recs).append((rel, cls))
    write_manifest(DatasetManifest(train_recs, names, "train"),
                   os.path.join(out, "train.jsonl"), os.path.join(out, "classes.json"))
    write_manifest(DatasetManifest(test_recs, names, "test"), os.path.join(out, "test.jsonl"))
    print(f"wrote {args.classes * args.per_class} chips "
          f"({len(train_recs)} train / {len(test_recs)} test) to {out}")
    return 0


def cmd_train(args) -> int:
    mcfg, tcfg = _configs(args)
    manifest = _load_manifest_arg(args)
    store = build_model(mcfg)
    log = train(store, manifest, tcfg, mcfg, workers=args.workers)
    os.makedirs(args.out, exist_ok=True)
    save_weights(store, os.path.join(args.out, "weights.dpgw"))
    write_jsonl(log, os.path.join(args.out, "loss_log.jsonl"))
    _write_json(flat_from_configs(mcfg, tcfg), os.path.join(args.out, "config.json"))
    if not args.no_figures:
        from .figures import save_loss_curve
        save_loss_curve(log, os.path.join(args.out, "loss_curve.png"))
    epoch_rows = [r for r in log if "step" not in r]
    print(f"trained {tcfg.epochs} epochs; final mean loss {epoch_rows[-1]['loss']:.4f}; "
          f"artifacts in {args.out}")
    return 0


def _read_predictions(path: str) -> tuple[list[int], list[int]]:
    y_true, y_pred = [], []
    for i, row in enumerate(read_jsonl(path), 1):
        if not isinstance(row, dict) or "label" not in row or "pred" not in row:
            raise FormatError(f"{path}:{i}: prediction rows need 'label' and 'pred'")
        if not isinstance(row["label"], int) or not isinstance(row["pred"], int):
            raise FormatError(f"{path}:{i}: 'label' and 'pred' must be integers")
        y_true.append(row["label"])
        y_pred.append(row["pred"])
    if not y_true:
        raise FormatError(f"{path}: no prediction rows")
    return y_true, y_pred


def cmd_eval(args) -> int:
    mcfg, tcfg = _configs(args)
    if args.predictions:
        y_true, y_pred = _read_predictions(args.predictions)
        if args.classes_file:
            with open(args.classes_file, "r", encoding="utf-8") as fh:
                names = json.load(fh)["classes"]
        else:
            names = class_names(max(mcfg.classes, max(y_true) + 1, max(y_pred) + 1))
        cm, acc = evaluate_predictions(y_true, y_pred, names)
    elif args.stub_identity:
        manifest = _load_manifest_arg(args)
        labels = [label for _, label in manifest.records]
        cm, acc = evaluate_predictions(labels, labels, manifest.classes)
    else:
        if not args.weights:
            raise ConfigError("--weights is required unless --stub-identity or --predictions is given")
        manifest = _load_manifest_arg(args)
        store = build_model(mcfg)
        load_weights(store, args.weights)
        cm, acc = evaluate(store, manifest, mcfg, workers=args.workers)
    os.makedirs(args.out, exist_ok=True)
    cm.to_csv(os.path.join(args.out, "confusion.csv"))
    _write_json(flat_from_configs(mcfg, tcfg), os.path.join(args.out, "config.json"))
    if not args.no_figures:
        from .figures import save_confusion_heatmap
        save_confusion_heatmap(cm, os.path.join(args.out, "confusion.png"))
    print(f"{acc * 100.0:.2f}")
    return 0


def cmd_ablate(args) -> int:
    mcfg, tcfg = _configs(args)
    if args.structural:
        header, rows = ablation_suite(mcfg, args.axis, structural_only=True)
    else:
        train_manifest = _load_manifest_arg(args)
        test_manifest = _load_manifest_arg(args, "test_manifest")
        header, rows = ablation_suite(mcfg, args.axis, train_manifest, test_manifest,
                                      tcfg, workers=args.workers)
    os.makedirs(args.out, exist_ok=True)
    csv_path = os.path.join(args.out, f"ablation_{args.axis}.csv")
    write_csv(header, rows, csv_path)
    _write_json(flat_from_configs(mcfg, tcfg), os.path.join(args.out, "config.json"))
    if not args.no_figures:
        from .figures import save_ablation_chart
        save_ablation_chart(header, rows, args.axis, os.path.join(args.out, f"ablation_{args.axis}.png"))
    print(f"{len(rows)} rows -> {csv_path}")
    return 0


def cmd_params(args) -> int:
    mcfg, _ = _configs(args)
    print(count_params(mcfg))
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        set_default_dtype(args.precision)
        return args.func(args)
    except (ConfigError, FormatError, ShapeError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
