"""Train a tiny BatchNorm-variant model on synthetic data and export it as a circuit."""

import argparse
from pathlib import Path

import numpy as np

from polynext.circuit import eval_circuit, verify_polynomial, write_circuit
from polynext.data import synthetic_dataset
from polynext.folding import export_circuit, fold_inference
from polynext.model import ModelConfig
from polynext.training import TrainRecipe, evaluate, train


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="runs/toy_circuit")
    ap.add_argument("--epochs", type=int, default=5)
    args = ap.parse_args()
    out = Path(args.out)
    cfg = ModelConfig(channels=(8, 16), cells=(1, 1), stacks=(1, 1), mixers=("polyconv", "polyattn"),
                      norm="polybn", num_classes=4, resolution=16, name="toy-bn")
    data = synthetic_dataset(0, classes=4, resolution=16, n=512)
    val = synthetic_dataset(1, classes=4, resolution=16, n=128)
    res = train(cfg, TrainRecipe(epochs=args.epochs, batch_size=32, lr_max=3e-3), data, val, out_dir=out)
    model = res.eval_model()
    folded = fold_inference(model)
    circ = export_circuit(folded, (1, 3, 16, 16))
    write_circuit(circ, out / "toy.circuit")
    cert = verify_polynomial(circ)
    x = val.images[:8]
    err = np.abs(eval_circuit(circ, x.reshape(8, -1)) - folded(x)).max()
    print(f"val top-1 {evaluate(model, val):.3f}; circuit {cert.node_count:,} nodes, degree "
          f"{cert.max_degree}, mul depth {cert.mul_depth}, max abs eval diff {err:.1e}")


if __name__ == "__main__":
    main()
