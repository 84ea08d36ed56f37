#!/usr/bin/env python3
"""Hyperparameter sweeps at toy scale: region count, sampling multiplier, size.

Thin wrapper over the `fsra sweep` subcommand that first renders the
dataset and writes the base config, so the whole study is one command:

    python scripts/run_sweeps.py --out runs/sweeps --param regions --values 0,1,2,3,4
    python scripts/run_sweeps.py --out runs/sweeps --param k --values 1,2,3,5,8
    python scripts/run_sweeps.py --out runs/sweeps --param k --values 1,3,5,8 \
        --override train.batch_size=16
"""

import argparse
import json
from pathlib import Path

from fsra.cli import main as fsra_main
from fsra.data import SynthSpec, synth_generate


def main():
    ap = argparse.ArgumentParser(description=__doc__,
                                 formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", default="runs/sweeps")
    ap.add_argument("--param", choices=("regions", "k", "image-size"), required=True)
    ap.add_argument("--values", required=True)
    ap.add_argument("--epochs", type=int, default=60)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--override", action="append", default=[])
    args = ap.parse_args()

    out = Path(args.out)
    data_root = out / "data"
    if not (data_root / "manifest.json").exists():
        print("rendering synthetic dataset ...")
        synth_generate(SynthSpec(classes=32, drone_per_class=8, image_size=64, seed=7,
                                 distractor_classes=16, test_drone_per_class=4),
                       data_root)

    base_config = {
        "backbone": {"image_size": 64, "patch_size": 8, "embed_dim": 64, "depth": 4,
                     "heads": 4, "mlp_ratio": 4.0, "dropout": 0.1},
        "train": {"epochs": args.epochs, "batch_size": 8, "seed": args.seed,
                  "lr_backbone": 0.01, "lr_heads": 0.03},
        "loss": {"use_triplet": True, "margin": 0.3},
        "sampler": {"k": 3},
        "regions": 3,
        "head_hidden": 64,
        "head_dropout": 0.1,
        "data_root": str(data_root / "train"),
        "eval_root": str(data_root / "test"),
        "out_dir": str(out / "base_run"),
    }
    config_path = out / "base_config.json"
    out.mkdir(parents=True, exist_ok=True)
    config_path.write_text(json.dumps(base_config, indent=1))

    cli_args = ["sweep", "--param", args.param, "--values", args.values,
                "--config", str(config_path), "--out", str(out / f"sweep_{args.param}")]
    for item in args.override:
        cli_args += ["--override", item]
    raise SystemExit(fsra_main(cli_args))


if __name__ == "__main__":
    main()
