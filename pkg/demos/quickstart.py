"""Generate a small benchmark, train the network briefly and score it.

    python demos/quickstart.py

Runs in about ten seconds at the default sizes.
"""
import argparse

from istpose.config import RunConfig
from istpose.evalbench import metrics_for, umeyama_variant_eval
from istpose.synthdata import GenConfig, generate_dataset
from istpose.training import predict, train


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--train", type=int, default=400, help="training instances")
    ap.add_argument("--eval", type=int, default=80, help="evaluation instances")
    ap.add_argument("--max-rot", type=float, default=60.0, help="rotation cap in degrees")
    args = ap.parse_args()

    gen = dict(n_points=64, n_model_points=256, max_rotation_deg=args.max_rot)
    train_set = generate_dataset(GenConfig(count=args.train, seed=1, **gen))
    eval_set = generate_dataset(GenConfig(count=args.eval, seed=2, **gen))

    cfg = RunConfig(n_points=64, d=16, hidden=32, batch_size=16, lr=3e-3, epochs=args.epochs)
    model, _, history = train(cfg, train_set)
    for rec in history:
        print(f"epoch {rec['epoch']:2d}  total {rec['total']:.4f}  main {rec['L_main']:.4f}")

    direct = metrics_for(predict(model, eval_set), eval_set)
    matched = umeyama_variant_eval(model, eval_set)
    print("direct  ", {k: round(v, 1) for k, v in direct.mean.items()})
    print("umeyama ", {k: round(v, 1) for k, v in matched.mean.items()})


if __name__ == "__main__":
    main()
