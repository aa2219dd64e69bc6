"""Desk-scale CIFAR-10 protocol: 5,000 training and 1,000 held-out images, 20 epochs.

Trains the reduced low-resolution model three ways (product fusion, additive
fusion, BatchNorm variant) and prints one summary line per run.

    python3 scripts/desk_cifar.py --data /path/to/cifar-10-batches-bin --out runs/desk
"""

from __future__ import annotations

import argparse
import json
import os
import time
from pathlib import Path

from polynext.data import find_cifar10, load_cifar10, load_source
from polynext.model import preset
from polynext.training import TrainRecipe, train


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--data", help="cifar-10-batches-bin directory, or 'synthetic' for a dry run")
    ap.add_argument("--out", default="runs/desk")
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--n-train", type=int, default=5000)
    ap.add_argument("--n-val", type=int, default=1000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--runs", default="hadamard,add,bn")
    args = ap.parse_args()

    if args.data and args.data.startswith("synthetic"):
        pool = load_source(args.data, n=args.n_train + args.n_val, seed=args.seed)
    else:
        root = find_cifar10(args.data)
        if root is None:
            raise SystemExit("CIFAR-10 not found: pass --data or set POLYNEXT_CIFAR10")
        pool = load_cifar10(root, "train")
    tr, va = pool.split(args.n_train, args.n_val, seed=args.seed)

    base = preset("desk-lr")
    variants = {"hadamard": base, "add": base.replace(fusion="add"), "bn": base.replace(norm="polybn")}
    recipe = TrainRecipe(epochs=args.epochs, batch_size=96, lr_max=1e-3, weight_decay=0.05, seed=args.seed)
    summary = {}
    for name in args.runs.split(","):
        t0 = time.perf_counter()
        res = train(variants[name], recipe, tr, va, out_dir=Path(args.out) / name,
                    on_epoch=lambda r, n=name: print(f"[{n}] epoch {r['epoch']} loss {r['train_loss']:.4f} "
                                                     f"val {r['val_top1']:.4f}", flush=True))
        m = res.metrics
        summary[name] = {"val_top1": m[-1]["val_top1"], "first_loss": m[0]["train_loss"],
                         "last_loss": m[-1]["train_loss"], "minutes": (time.perf_counter() - t0) / 60}
        print(name, json.dumps(summary[name]), flush=True)
    summary["cpu_count"] = os.cpu_count()
    Path(args.out).mkdir(parents=True, exist_ok=True)
    (Path(args.out) / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")


if __name__ == "__main__":
    main()
