"""Train a small LoRA ensemble and a frozen single model, then compare them.

    python3 demos/quickstart.py [--epochs 20] [--members 4]

Prints accuracy, ECE, NLL and OOD AUROC for both models on the synthetic task.
"""

import argparse
import time

from loraens.backbone import ModelConfig
from loraens.data import SyntheticSpec, gen_ood, gen_synthetic
from loraens.ensemble import predict_logits
from loraens.metrics import report_from_logits
from loraens.training import TrainConfig, train_run


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--members", type=int, default=4)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    spec = SyntheticSpec()
    train = gen_synthetic(spec, "train", args.seed)
    test = gen_synthetic(spec, "test", args.seed)
    ood = gen_ood(spec, args.seed)
    recipe = TrainConfig(epochs=args.epochs)

    models = {
        "single (frozen backbone)": ModelConfig(method="single", backbone_trainable=False),
        f"lora x{args.members}": ModelConfig(method="lora", ensemble_size=args.members, rank=4, init_scale=10.0),
    }
    print(f"{'model':26s} {'acc':>6s} {'ece':>6s} {'nll':>6s} {'auroc':>6s} {'time':>6s}")
    for name, cfg in models.items():
        t0 = time.perf_counter()
        model = train_run(cfg, recipe, train, seed=args.seed).model
        rep = report_from_logits(predict_logits(model, test.images), test.labels,
                                 ood_logits=predict_logits(model, ood.images))
        print(f"{name:26s} {rep.accuracy:6.3f} {rep.ece:6.3f} {rep.nll:6.3f} {rep.auroc:6.3f} "
              f"{time.perf_counter() - t0:5.0f}s")


if __name__ == "__main__":
    main()
