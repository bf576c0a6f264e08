"""Command-line surface: one binary, subcommands for each pipeline stage.

Exit codes are a stable contract:
  0 success, 1 verification failure, 2 usage/config error,
  3 data ingest error, 4 numeric failure.

Every command is deterministic given its flags and seeds; train runs
print their fully resolved configuration as config.key=value lines.
The FACEATTR_DATA_ROOT environment variable supplies a default image
root where --root is not given.
"""

import argparse
import concurrent.futures
import json
import os
import shutil
import sys

import numpy as np
from PIL import Image

from . import chart, data, verify
from .errors import (AttributeCoverageError, CheckpointError,
                     CheckpointFormatError, CheckpointVersionError,
                     ConfigError, ContractError, EmptyBatchError, GraphError,
                     IngestError, LabelError, ManifestError, MetricError,
                     NumericError, ShapeError)
from .model import HeadSpec, Model, preset_spec, small_spec
from .optim import AdamConfig
from .train import (TrainConfig, evaluate, export_history, load_checkpoint,
                    parse_history, report_from_obj, report_table)
from .train import train as run_training

_EXIT_MAP = (
    ((NumericError,), 4),
    ((IngestError, ManifestError, CheckpointFormatError, CheckpointVersionError), 3),
    ((ConfigError, ContractError, LabelError, AttributeCoverageError,
      CheckpointError, MetricError, EmptyBatchError, ShapeError, GraphError), 2),
)


# ---------------------------------------------------------------------------
# config documents

_SYNTH_KEYS = {"count", "size", "attributes", "noise", "label_coverage", "with_bbox"}
_ARCH_KEYS = {"stem_channels", "stage_blocks", "stage_channels", "block",
              "stem_pool", "stem_kernel", "stem_stride", "stem_norm"}
_CROP_KEYS = {"pad_left", "pad_right", "pad_top", "pad_bottom"}
_AUG_KEYS = {"flip", "shift", "zoom", "flip_prob", "max_shift", "max_zoom"}
_SPLIT_KEYS = {"test_fraction", "val_fraction", "seed", "stratified"}
_TRAIN_KEYS = {"attribute", "epochs", "batch_size", "loss", "seed", "out",
               "history", "preset", "image_size", "lr", "beta1", "beta2",
               "eps", "root", "arch", "crop", "augment", "split"}


def _load_json_config(path, allowed, label):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read {label} file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{label} file {path} is not valid JSON: {exc.msg}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{label} file {path} must hold a JSON object")
    unknown = set(doc) - allowed
    if unknown:
        raise ConfigError(f"{label} file {path} has unknown keys {sorted(unknown)}")
    return doc


def _check_section(doc, key, allowed, path):
    section = doc.get(key)
    if section is None:
        return {}
    if not isinstance(section, dict):
        raise ConfigError(f"config {path}: {key!r} must be an object")
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"config {path}: {key!r} has unknown keys {sorted(unknown)}")
    return section


def _pick(flag_value, cfg, key, default):
    if flag_value is not None:
        return flag_value
    if key in cfg:
        return cfg[key]
    return default


# ---------------------------------------------------------------------------
# synth


def cmd_synth(args):
    cfg = {}
    if args.spec:
        cfg = _load_json_config(args.spec, _SYNTH_KEYS, "synth spec")
    count = int(_pick(args.count, cfg, "count", 300))
    size = int(_pick(args.size, cfg, "size", 32))
    attributes = _pick(
        args.attributes.split(",") if args.attributes else None,
        cfg, "attributes", None)
    noise = float(_pick(args.noise, cfg, "noise", 0.03))
    coverage = float(_pick(None, cfg, "label_coverage", 1.0))
    with_bbox = bool(_pick(None, cfg, "with_bbox", True))

    records, schemas = data.gen_synthetic(
        args.out, count, size=size, attributes=attributes, seed=args.seed,
        noise=noise, label_coverage=coverage, with_bbox=with_bbox)
    print(f"manifest={os.path.join(args.out, 'manifest.jsonl')}")
    print(f"schema={os.path.join(args.out, 'schema.json')}")
    print(f"images={len(records)}")
    print(f"attributes={','.join(s.name for s in schemas)}")
    return 0


# ---------------------------------------------------------------------------
# preprocess


def cmd_preprocess(args):
    root = args.root or os.environ.get("FACEATTR_DATA_ROOT") or os.path.dirname(args.manifest)
    records = data.load_manifest(args.manifest)
    if not records:
        raise ConfigError(f"manifest {args.manifest} is empty")
    rule = data.CropRule(pad_left=args.pad_left, pad_right=args.pad_right,
                         pad_top=args.pad_top, pad_bottom=args.pad_bottom)

    img_dir = os.path.join(args.out, "images")
    os.makedirs(img_dir, exist_ok=True)
    unreadable = []
    out_records = []
    for i, rec in enumerate(records):
        path = rec.image if os.path.isabs(rec.image) else os.path.join(root, rec.image)
        try:
            img = data.decode_image(path)
        except IngestError as exc:
            unreadable.append(exc.path)
            continue
        if rec.bbox is not None:
            h, w = img.shape[:2]
            x0, y0, x1, y1 = data.padded_crop(w, h, rec.bbox, rule)
            img = img[y0:y1, x0:x1]
        fname = f"{i:05d}.png"
        Image.fromarray(img).save(os.path.join(img_dir, fname))
        out_records.append(data.SampleRecord(image=os.path.join("images", fname),
                                             labels=rec.labels))
    if unreadable:
        for path in unreadable:
            print(f"unreadable={path}", file=sys.stderr)
        raise IngestError(unreadable[0],
                          f"{len(unreadable)} image(s) could not be read")

    out_manifest = os.path.join(args.out, "manifest.jsonl")
    data.save_manifest(out_records, out_manifest)
    schema_src = os.path.join(os.path.dirname(args.manifest), "schema.json")
    if os.path.isfile(schema_src):
        shutil.copyfile(schema_src, os.path.join(args.out, "schema.json"))
    print(f"manifest={out_manifest}")
    print(f"written={len(out_records)}")
    return 0


# ---------------------------------------------------------------------------
# train


def _build_model_spec(preset, arch_cfg, head, image_size):
    if preset in ("resnet18", "resnet34", "resnet50"):
        if arch_cfg:
            raise ConfigError("custom 'arch' settings only apply with --preset custom")
        return preset_spec(int(preset[6:]), head, image_size=image_size)
    if preset != "custom":
        raise ConfigError(f"unknown preset {preset!r}")
    kwargs = dict(arch_cfg)
    if "stage_blocks" in kwargs:
        kwargs["stage_blocks"] = tuple(kwargs["stage_blocks"])
    if "stage_channels" in kwargs:
        kwargs["stage_channels"] = tuple(kwargs["stage_channels"])
    return small_spec(head, image_size=image_size, **kwargs)


def _train_one(attribute, records, schemas, source, spec_builder, cfg_common, log):
    entry = data.schema_for(schemas, attribute)
    loss = cfg_common["loss"] or ("binary" if entry.head == "sigmoid" else "categorical")
    head = HeadSpec(entry.head, entry.num_outputs)
    spec = spec_builder(head)
    model = Model.build(spec, seed=cfg_common["seed"])

    split_spec = cfg_common["split"]
    tr, va, te = data.split_manifest(records, attribute, split_spec)
    cfg = TrainConfig(
        attribute=attribute, checkpoint_path=cfg_common["out_for"](attribute),
        epochs=cfg_common["epochs"], batch_size=cfg_common["batch_size"],
        loss=loss, adam=cfg_common["adam"], seed=cfg_common["seed"],
        augment=cfg_common["augment"])
    best, history = run_training(model, source, tr, va, cfg, schema=entry, log=log)
    history_path = cfg_common["history_for"](attribute)
    export_history(history, history_path)
    return {
        "attribute": attribute, "best": best, "history_path": history_path,
        "checkpoint_path": cfg.checkpoint_path,
        "counts": (len(tr), len(va), len(te)),
    }


def cmd_train(args):
    cfg = {}
    if args.config:
        cfg = _load_json_config(args.config, _TRAIN_KEYS, "train config")
    arch_cfg = _check_section(cfg, "arch", _ARCH_KEYS, args.config)
    crop_cfg = _check_section(cfg, "crop", _CROP_KEYS, args.config)
    aug_cfg = _check_section(cfg, "augment", _AUG_KEYS, args.config)
    split_cfg = _check_section(cfg, "split", _SPLIT_KEYS, args.config)

    manifest_dir = args.manifest
    manifest_path = os.path.join(manifest_dir, "manifest.jsonl")
    schema_path = os.path.join(manifest_dir, "schema.json")
    if not os.path.isfile(manifest_path):
        raise ConfigError(f"no manifest.jsonl under {manifest_dir}")
    if not os.path.isfile(schema_path):
        raise ConfigError(f"no schema.json under {manifest_dir}")

    attribute_arg = _pick(args.attribute, cfg, "attribute", None)
    if not attribute_arg:
        raise ConfigError("an attribute is required (--attribute)")
    attributes = [a.strip() for a in attribute_arg.split(",") if a.strip()]
    out = _pick(args.out, cfg, "out", None)
    if not out:
        raise ConfigError("a checkpoint path is required (--out)")

    epochs = int(_pick(args.epochs, cfg, "epochs", 100))
    batch_size = int(_pick(args.batch, cfg, "batch_size", 32))
    loss = _pick(args.loss, cfg, "loss", None)
    seed = int(_pick(args.seed, cfg, "seed", 0))
    preset = _pick(args.preset, cfg, "preset", "custom")
    default_size = 224 if preset.startswith("resnet") else 32
    image_size = int(_pick(args.image_size, cfg, "image_size", default_size))
    root = args.root or cfg.get("root") or os.environ.get("FACEATTR_DATA_ROOT") or manifest_dir
    adam = AdamConfig(lr=float(_pick(args.lr, cfg, "lr", 1e-3)),
                      beta1=float(_pick(None, cfg, "beta1", 0.9)),
                      beta2=float(_pick(None, cfg, "beta2", 0.999)),
                      eps=float(_pick(None, cfg, "eps", 1e-8)))
    if args.no_augment:
        augment = data.AugmentConfig(flip=False, shift=False, zoom=False)
    else:
        augment = data.AugmentConfig(**aug_cfg)
    split_spec = data.SplitSpec(**split_cfg)
    crop_rule = data.CropRule(**crop_cfg)

    if len(attributes) > 1:
        os.makedirs(out, exist_ok=True)
        out_for = lambda a: os.path.join(out, f"{a}.ckpt")
    else:
        parent = os.path.dirname(out)
        if parent:
            os.makedirs(parent, exist_ok=True)
        out_for = lambda a: out
    history_arg = _pick(args.history, cfg, "history", None)
    if history_arg and len(attributes) > 1:
        raise ConfigError("--history only applies to single-attribute runs")
    history_for = (lambda a: history_arg) if history_arg else (lambda a: out_for(a) + ".history.csv")

    resolved = {
        "attributes": ",".join(attributes), "epochs": epochs,
        "batch_size": batch_size, "loss": loss or "auto", "seed": seed,
        "preset": preset, "image_size": image_size, "root": root, "out": out,
        "lr": adam.lr, "beta1": adam.beta1, "beta2": adam.beta2, "eps": adam.eps,
        "augment.flip": augment.flip, "augment.shift": augment.shift,
        "augment.zoom": augment.zoom, "augment.flip_prob": augment.flip_prob,
        "augment.max_shift": augment.max_shift, "augment.max_zoom": augment.max_zoom,
        "split.test_fraction": split_spec.test_fraction,
        "split.val_fraction": split_spec.val_fraction,
        "split.seed": split_spec.seed, "split.stratified": split_spec.stratified,
        "crop.pad_left": crop_rule.pad_left, "crop.pad_right": crop_rule.pad_right,
        "crop.pad_top": crop_rule.pad_top, "crop.pad_bottom": crop_rule.pad_bottom,
    }
    for key in sorted(resolved):
        print(f"config.{key}={resolved[key]}")

    schemas = data.load_schema(schema_path)
    records = data.load_manifest(manifest_path, schema=schemas)
    source = data.DataSource(root, target=image_size, crop_rule=crop_rule)
    spec_builder = lambda head: _build_model_spec(preset, arch_cfg, head, image_size)
    cfg_common = {
        "epochs": epochs, "batch_size": batch_size, "loss": loss, "seed": seed,
        "adam": adam, "augment": augment, "split": split_spec,
        "out_for": out_for, "history_for": history_for,
    }

    def log_for(attribute):
        return lambda line: print(f"attribute={attribute} {line}")

    results = []
    if args.jobs > 1 and len(attributes) > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=args.jobs) as pool:
            futures = {
                pool.submit(_train_one, a, records, schemas, source,
                            spec_builder, cfg_common, log_for(a)): a
                for a in attributes}
            for fut in concurrent.futures.as_completed(futures):
                results.append(fut.result())
        results.sort(key=lambda r: attributes.index(r["attribute"]))
    else:
        for a in attributes:
            results.append(_train_one(a, records, schemas, source,
                                      spec_builder, cfg_common, log_for(a)))

    for res in results:
        best = res["best"]
        tr_n, va_n, te_n = res["counts"]
        print(f"attribute={res['attribute']} train={tr_n} val={va_n} test={te_n} "
              f"best_epoch={best.epoch} best_val_loss={best.val_loss:.6g} "
              f"best_val_acc={best.val_acc:.4f} "
              f"checkpoint={res['checkpoint_path']} history={res['history_path']}")
    return 0


# ---------------------------------------------------------------------------
# eval / report / plot / gradcheck


def cmd_eval(args):
    if not os.path.isfile(args.ckpt):
        raise ConfigError(f"checkpoint {args.ckpt} does not exist")
    if not os.path.isfile(args.manifest):
        raise ConfigError(f"manifest {args.manifest} does not exist")
    ckpt = load_checkpoint(args.ckpt)
    root = args.root or os.environ.get("FACEATTR_DATA_ROOT") or os.path.dirname(args.manifest)
    records = data.load_manifest(args.manifest)
    image_size = ckpt.arch.get("image_size", 224)
    source = data.DataSource(root, target=image_size)
    report = evaluate(ckpt, records, source, batch_size=args.batch)
    for line in report.lines():
        print(line)
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            json.dump(report.to_obj(), fh, sort_keys=True, indent=2)
            fh.write("\n")
        print(f"json={args.json}")
    return 0


def cmd_report(args):
    reports = []
    for path in args.inputs:
        if not os.path.isfile(path):
            raise ConfigError(f"report input {path} does not exist")
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
        try:
            objs = ([json.loads(ln) for ln in text.splitlines() if ln.strip()]
                    if args.jsonl else [json.loads(text)])
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path} is not valid JSON: {exc.msg}") from exc
        reports.extend(report_from_obj(o) for o in objs)
    table = report_table(reports, style=args.style)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(table)
        print(f"table={args.out}")
    else:
        sys.stdout.write(table)
    return 0


def cmd_plot(args):
    try:
        rows = parse_history(args.history)
    except OSError as exc:
        raise ConfigError(f"cannot read history {args.history}: {exc}") from exc
    svg = chart.history_chart(rows, title=args.title)
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(svg)
    print(f"svg={args.out}")
    print(f"epochs={len(rows)}")
    return 0


def cmd_gradcheck(args):
    names = args.cases.split(",") if args.cases else None
    try:
        results = verify.run_battery(names=names, seed=args.seed, h=args.h,
                                     tol=args.tol, inject_fault=args.inject_fault)
    except KeyError as exc:
        raise ConfigError(f"unknown gradcheck case {exc.args[0]!r}") from exc
    for line in verify.battery_lines(results, verbose=args.verbose):
        print(line)
    failed = [name for name, report in results if not report.passed]
    print(f"cases={len(results)} failed={len(failed)}")
    return 1 if failed else 0


# ---------------------------------------------------------------------------
# parser


def build_parser():
    parser = argparse.ArgumentParser(
        prog="faceattr",
        description="Train and evaluate per-attribute image classifiers.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic labeled dataset")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--spec", help="JSON file with count/size/attributes/noise")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int)
    p.add_argument("--size", type=int)
    p.add_argument("--attributes", help="comma-separated attribute subset")
    p.add_argument("--noise", type=float)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", help="apply face crops and rewrite a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--root", help="image root (default: manifest directory)")
    p.add_argument("--pad-left", type=float, default=0.40)
    p.add_argument("--pad-right", type=float, default=0.40)
    p.add_argument("--pad-top", type=float, default=0.40)
    p.add_argument("--pad-bottom", type=float, default=0.30)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train one model per attribute")
    p.add_argument("--manifest", required=True,
                   help="dataset directory holding manifest.jsonl and schema.json")
    p.add_argument("--attribute", help="attribute name, or comma-separated list")
    p.add_argument("--preset",
                   choices=("resnet18", "resnet34", "resnet50", "custom"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="checkpoint path (directory for multiple attributes)")
    p.add_argument("--history", help="history CSV path (single attribute only)")
    p.add_argument("--loss", choices=("categorical", "binary"))
    p.add_argument("--lr", type=float)
    p.add_argument("--image-size", type=int, dest="image_size")
    p.add_argument("--root", help="image root (default: manifest directory)")
    p.add_argument("--config", help="JSON config file; flags override it")
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--jobs", type=int, default=1,
                   help="parallel attribute trainings")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--root")
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--json", help="also write the report as JSON")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="render accuracy tables from eval JSON")
    p.add_argument("--inputs", nargs="+", required=True)
    p.add_argument("--style", choices=("plain", "averaged"), default="plain")
    p.add_argument("--out")
    p.add_argument("--jsonl", action="store_true",
                   help="inputs are JSON-lines files")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("plot", help="render a training-history SVG chart")
    p.add_argument("--history", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--title", default="training history")
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("gradcheck", help="finite-difference gradient battery")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=verify.DEFAULT_TOL)
    p.add_argument("--h", type=float, default=verify.DEFAULT_H)
    p.add_argument("--cases", help="comma-separated case subset")
    p.add_argument("--inject-fault", action="store_true",
                   help="add a known-broken backward rule; must fail")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except tuple(exc for excs, _ in _EXIT_MAP for exc in excs) as err:
        for excs, code in _EXIT_MAP:
            if isinstance(err, excs):
                print(f"error: {err}", file=sys.stderr)
                return code
        raise


if __name__ == "__main__":
    sys.exit(main())
