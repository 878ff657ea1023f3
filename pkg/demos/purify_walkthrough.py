"""Walk one batch through the whole story: train a small model, attack it
with PGD, then purify with each F3 variant and compare accuracy and how far
the attention moved away from the clean attention.

    python3 demos/purify_walkthrough.py [--epochs 20]
"""
import argparse

import numpy as np

from f3lab import data as D
from f3lab.attacks import AttackConfig, pgd_attack
from f3lab.model import ModelConfig, accuracy_of, train
from f3lab.purify import PurifyConfig, attention_distance, purify, sample_rngs


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--n", type=int, default=100)
    args = ap.parse_args()

    train_ds = D.generate(1000, 0, split="train")
    eval_ds = D.generate(args.n, 0, split="eval")
    print(f"training for {args.epochs} epochs on {len(train_ds)} samples ...")
    model = train(train_ds, args.epochs, 0.03, seed=1, config=ModelConfig(),
                  noise=32 / 255).model

    x, q, y = eval_ds.images, eval_ds.questions, eval_ds.labels
    x_adv = pgd_attack(model, x, q, y, AttackConfig())
    a_clean = model.attention(x, q)

    def row(name, images):
        acc = 100 * accuracy_of(model, images, q, y)
        mse = float(np.mean(attention_distance(a_clean, model.attention(images, q))))
        print(f"{name:<28} accuracy {acc:6.2f}   MSE(A_clean, A) x1e3 {1e3 * mse:8.4f}")

    row("clean", x)
    row("PGD 8/255", x_adv)
    for variant in ("v1", "v2", "v3", "oracle", "rp"):
        cfg = PurifyConfig(variant=variant)
        res = purify(model, cfg, x_adv, q, sample_rngs(0, range(len(x))), x_clean=x)
        row(cfg.label(), res.purified)


if __name__ == "__main__":
    main()
