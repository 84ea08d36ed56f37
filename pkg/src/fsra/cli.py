"""Batch-oriented command line entry point.

Subcommands: ``synth-data`` (render the paired-view dataset), ``train``,
``eval`` (either retrieval direction, optional pad-robustness sweep),
``heat-dump`` (heat/region grids for one image), and ``sweep`` (train
and evaluate across one hyperparameter). Every run echoes its full
configuration and exits 0 only when the requested artifact was written.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
import traceback
from pathlib import Path

from fsra import config as cfgmod
from fsra.config import RunConfig, apply_overrides, config_from_dict
from fsra.data import SynthSpec, scan_dataset, synth_generate
from fsra.evaluate import ItemSpec, evaluate, extract, robustness_sweep
from fsra.head import FsraModel, export_heat_and_regions
from fsra.trainer import init_params, load_checkpoint, train
from fsra.data import load_image
from fsra.autodiff import Tensor


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fsra",
                                     description="cross-view geo-localization laboratory")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="render a synthetic paired-view dataset")
    p.add_argument("--classes", type=int, default=32)
    p.add_argument("--drone-per-class", type=int, default=8)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--distractors", type=int, default=16)
    p.add_argument("--test-drone-per-class", type=int, default=4)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="retrieval metrics for a trained checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--dataset", required=True, help="evaluation split root")
    p.add_argument("--direction", choices=("d2s", "s2d"), default="d2s")
    p.add_argument("--pad-mode", choices=("BP", "FP"), default=None)
    p.add_argument("--pad-widths", default=None, help="comma-separated pixel widths")
    p.add_argument("--branch-average", action="store_true",
                   help="average per-branch distances instead of concatenating descriptors")
    p.add_argument("--out", default=None, help="output directory (default: checkpoint dir)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("heat-dump", help="export heat and region grids for one image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--regions", type=int, default=3)
    p.add_argument("--out", required=True)
    p.add_argument("--pgm", action="store_true", help="also write P2 graymaps")
    p.set_defaults(func=cmd_heat_dump)

    p = sub.add_parser("sweep", help="train/evaluate across one hyperparameter")
    p.add_argument("--param", choices=("regions", "k", "image-size"), required=True)
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--config", required=True)
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)
    return parser


def _load_run_config(args) -> RunConfig:
    with open(args.config) as fh:
        tree = json.load(fh)
    tree = apply_overrides(tree, args.override)
    cfg = config_from_dict(tree)
    return cfgmod.apply_seed_fallback(cfg)


def cmd_synth_data(args) -> int:
    spec = SynthSpec(classes=args.classes, drone_per_class=args.drone_per_class,
                     image_size=args.size, seed=args.seed,
                     distractor_classes=args.distractors,
                     test_drone_per_class=args.test_drone_per_class)
    out_root = Path(args.out)
    if out_root.exists() and not out_root.is_dir():
        raise NotADirectoryError(f"{out_root} exists and is not a directory")
    synth_generate(spec, out_root)
    manifest_path = out_root / "manifest.json"
    digest = hashlib.sha256(manifest_path.read_bytes()).hexdigest()
    print(f"manifest: {manifest_path}")
    print(f"manifest sha256: {digest}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_run_config(args)
    if not cfg.data_root:
        raise ValueError("config must set data_root")
    index = scan_dataset(cfg.data_root)
    result = train(cfg, index, resume=args.resume)
    print(f"final checkpoint: {result.checkpoint_path}")
    print(f"train log: {result.log_path}")
    return 0


def _model_from_checkpoint(ckpt_path: Path) -> tuple[FsraModel, RunConfig]:
    run_cfg_path = ckpt_path.parent / "run_config.json"
    if not run_cfg_path.exists():
        raise FileNotFoundError(
            f"{run_cfg_path} not found next to the checkpoint; it is written by `fsra train`")
    cfg = config_from_dict(json.loads(run_cfg_path.read_text()))
    index = scan_dataset(cfg.data_root)
    model = FsraModel(cfg.backbone, cfg.regions, num_classes=len(index.classes),
                      head_hidden=cfg.head_hidden, head_dropout=cfg.head_dropout)
    init_params(model, cfg.train.seed)
    load_checkpoint(ckpt_path, model)
    return model, cfg


def _eval_items(index, view: str) -> list[ItemSpec]:
    items = []
    classes = sorted(index.by_view.get(view, {}))
    for class_id in classes:
        for path in index.by_view[view][class_id]:
            items.append(ItemSpec(class_id=class_id, view=view, path=str(path)))
    return items


def cmd_eval(args) -> int:
    ckpt_path = Path(args.ckpt)
    model, cfg = _model_from_checkpoint(ckpt_path)
    index = scan_dataset(args.dataset)
    query_view, gallery_view = ("drone", "satellite") if args.direction == "d2s" \
        else ("satellite", "drone")
    query_items = _eval_items(index, query_view)
    gallery_items = _eval_items(index, gallery_view)
    if not query_items or not gallery_items:
        raise ValueError(f"dataset {args.dataset} lacks {query_view} or {gallery_view} images")

    out_dir = Path(args.out) if args.out else ckpt_path.parent
    out_dir.mkdir(parents=True, exist_ok=True)
    per_branch = args.branch_average
    gallery = extract(model, gallery_items, per_branch=per_branch)
    report = evaluate(extract(model, query_items, per_branch=per_branch), gallery,
                      ks=(1, 5, 10), branch_average=per_branch)

    manifest_hash = None
    for candidate in (Path(args.dataset) / "manifest.json",
                      Path(args.dataset).parent / "manifest.json"):
        if candidate.exists():
            manifest_hash = hashlib.sha256(candidate.read_bytes()).hexdigest()
            break
    payload = {
        "direction": args.direction,
        "checkpoint": str(ckpt_path),
        "config_hash": cfg.hash(),
        "dataset_manifest_sha256": manifest_hash,
        "queries": len(query_items),
        "gallery": len(gallery_items),
        **report.as_dict(),
    }
    report_path = out_dir / "eval_report.json"
    report_path.write_text(json.dumps(payload, indent=1, sort_keys=True))
    print(f"eval report: {report_path}")
    print(f"R@1={report.recall_at[1]:.4f} AP={report.ap:.4f} "
          f"R@Top1%={report.recall_top1pct:.4f}")

    if args.pad_mode:
        if args.pad_widths is None:
            raise ValueError("--pad-mode needs --pad-widths")
        widths = [int(w) for w in args.pad_widths.split(",")]
        csv_path = out_dir / f"robustness_{args.pad_mode}.csv"
        robustness_sweep(model, query_items, gallery, args.pad_mode, widths,
                         ks=(1, 5, 10), csv_path=csv_path)
        print(f"robustness table: {csv_path}")
    return 0


def cmd_heat_dump(args) -> int:
    ckpt_path = Path(args.ckpt)
    model, _ = _model_from_checkpoint(ckpt_path)
    image_path = Path(args.image)
    image = load_image(image_path, size=model.config.image_size)
    paths = export_heat_and_regions(Tensor(image), model, args.regions, args.out,
                                    stem=image_path.stem, write_pgm=args.pgm)
    for key, path in paths.items():
        print(f"{key}: {path}")
    return 0


SWEEP_OVERRIDE_KEYS = {
    "regions": "regions",
    "k": "sampler.k",
    "image-size": "backbone.image_size",
}


def cmd_sweep(args) -> int:
    values = args.values.split(",")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for raw in values:
        value = raw.strip()
        run_out = out_dir / f"{args.param}_{value}"
        overrides = list(args.override)
        overrides.append(f"{SWEEP_OVERRIDE_KEYS[args.param]}={value}")
        overrides.append(f"out_dir={json.dumps(str(run_out))}")
        row = {"param": args.param, "value": value, "R@1_d2s": "nan", "AP_d2s": "nan",
               "R@1_s2d": "nan", "AP_s2d": "nan"}
        try:
            cfg = _load_run_config(argparse.Namespace(config=args.config,
                                                      override=overrides))
            index = scan_dataset(cfg.data_root)
            result = train(cfg, index)
            eval_root = cfg.eval_root or cfg.data_root
            eval_index = scan_dataset(eval_root)
            model, _ = _model_from_checkpoint(result.checkpoint_path)
            for direction, (qv, gv) in (("d2s", ("drone", "satellite")),
                                        ("s2d", ("satellite", "drone"))):
                report = evaluate(extract(model, _eval_items(eval_index, qv)),
                                  extract(model, _eval_items(eval_index, gv)),
                                  ks=(1, 5, 10))
                row[f"R@1_{direction}"] = f"{report.recall_at[1]:.6f}"
                row[f"AP_{direction}"] = f"{report.ap:.6f}"
        except Exception:  # noqa: BLE001 - sweep continues, failure marked
            traceback.print_exc(file=sys.stderr)
            print(f"sweep point {args.param}={value} failed; continuing", file=sys.stderr)
        rows.append(row)

    csv_path = out_dir / "sweep.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["param", "value", "R@1_d2s", "AP_d2s",
                                                "R@1_s2d", "AP_s2d"])
        writer.writeheader()
        writer.writerows(rows)
    print(f"sweep table: {csv_path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
