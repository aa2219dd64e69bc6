"""Command line entry point: ``polynext {train,eval,export-circuit,verify}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path



def _config(name: str):
    from .model import ModelConfig, preset

    path = Path(name)
    return ModelConfig.load(path) if path.exists() else preset(name)


def _recipe(args):
    from .training import TrainRecipe

    d = json.loads(Path(args.recipe).read_text()) if args.recipe else {}
    for key in ("epochs", "seed", "lr_max", "weight_decay", "batch_size"):
        value = getattr(args, key, None)
        if value is not None:
            d[key] = value
    return TrainRecipe.from_dict(d)


def cmd_train(args) -> int:
    from .data import load_source
    from .training import train

    cfg = _config(args.config)
    recipe = _recipe(args)
    kw = dict(seed=recipe.seed, classes=cfg.num_classes, resolution=cfg.resolution)
    src = load_source(args.data, split="train", n=args.n_train or 1000, **kw)
    val = load_source(args.data, split="test", n=args.n_val or 200, **kw)
    if args.n_train and len(src) > args.n_train:
        src, _ = src.split(args.n_train, 0, recipe.seed)
    if args.n_val and len(val) > args.n_val:
        val, _ = val.split(args.n_val, 0, recipe.seed)
    result = train(cfg, recipe, src, val, out_dir=args.out, deterministic=args.deterministic,
                   on_epoch=lambda r: print(f"epoch {r['epoch']}: loss {r['train_loss']:.4f} "
                                            f"val {r['val_top1']:.4f}", flush=True))
    print(f"checkpoint: {result.checkpoint}")
    return 0


def cmd_eval(args) -> int:
    from .checkpoint import load_checkpoint, restore_model
    from .data import load_source
    from .training import evaluate

    ckpt = load_checkpoint(args.checkpoint)
    model = restore_model(ckpt, ema=not args.live)
    cfg = ckpt.config
    src = load_source(args.data, split="test", n=args.n or 200, seed=args.seed,
                      classes=cfg.num_classes, resolution=cfg.resolution)
    print(f"top1 {evaluate(model, src):.4f}")
    return 0


def cmd_export(args) -> int:
    from .checkpoint import load_checkpoint, restore_model
    from .circuit import write_circuit, verify_polynomial
    from .folding import export_circuit, fold_inference

    model = restore_model(load_checkpoint(args.checkpoint), ema=not args.live)
    cfg = model.config
    circ = export_circuit(fold_inference(model), (1, cfg.in_channels, cfg.resolution, cfg.resolution),
                          max_nodes=args.max_nodes)
    write_circuit(circ, args.out)
    cert = verify_polynomial(circ)
    print(json.dumps({"ok": cert.ok, "node_count": cert.node_count, "max_degree": cert.max_degree,
                      "mul_depth": cert.mul_depth}))
    return 0 if cert.ok else 1


def cmd_verify(args) -> int:
    from .verify import run_suite

    failed = 0
    for name, ok, detail in run_suite(args.suite, args.seed):
        print(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}")
        failed += not ok
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="polynext")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config", required=True, help="JSON config file or preset name")
    t.add_argument("--data", required=True, help="CIFAR-10 binary directory or 'synthetic[:n]'")
    t.add_argument("--out", required=True)
    t.add_argument("--recipe", help="JSON recipe file")
    t.add_argument("--deterministic", action="store_true")
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr-max", dest="lr_max", type=float)
    t.add_argument("--weight-decay", dest="weight_decay", type=float)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--n-train", type=int)
    t.add_argument("--n-val", type=int)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="top-1 accuracy of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--live", action="store_true", help="use live weights instead of the EMA")
    e.add_argument("--n", type=int, help="synthetic sample count")
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(fn=cmd_eval)

    x = sub.add_parser("export-circuit", help="fold a BatchNorm-variant checkpoint into a circuit")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--out", required=True)
    x.add_argument("--max-nodes", type=int, default=10_000_000)
    x.add_argument("--live", action="store_true")
    x.set_defaults(fn=cmd_export)

    v = sub.add_parser("verify", help="run an invariant suite")
    v.add_argument("--suite", default="all")
    v.add_argument("--seed", type=int, default=0)
    v.set_defaults(fn=cmd_verify)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
