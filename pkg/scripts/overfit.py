"""Overfit a small network on synthetic phantoms and report eval-mode soft Dice.

    python scripts/overfit.py --pattern cross_skip --steps 300
"""

import argparse
import time

import numpy as np

from ddunet import data as D
from ddunet import trainer as TR
from ddunet.config import TrainConfig
from ddunet.losses import soft_dice_loss
from ddunet.tensor import Tensor
from ddunet.topology import PATTERNS, TopologySpec


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--pattern", choices=PATTERNS, default="cross_skip")
    ap.add_argument("--stages", type=int, default=3)
    ap.add_argument("--base", type=int, default=8)
    ap.add_argument("--cases", type=int, default=4)
    ap.add_argument("--steps", type=int, default=300)
    ap.add_argument("--lr", type=float, default=3e-4)
    ap.add_argument("--batch", type=int, default=2)
    ap.add_argument("--no-prior", action="store_true", help="keep the zero head bias")
    ap.add_argument("--out", default="runs/overfit")
    args = ap.parse_args()

    cfg = TrainConfig(
        topology=TopologySpec(args.pattern, stages=args.stages, base_channels=args.base),
        learning_rate=args.lr,
        batch_size=args.batch,
        epochs=10**6,
        max_steps=args.steps,
        crop_shape=(32, 32, 16),
        patch_depth=16,
        patch_stride=16,
        head_bias_prior=not args.no_prior,
        checkpoint_dir=f"{args.out}/{args.pattern}",
    )
    cases = [D.synth_case(s, (32, 32, 16), kind="hgg") for s in range(args.cases)]
    per_case = []
    for c in cases:
        ps = D.extract_patches(c, cfg.crop_shape, cfg.patch_depth, cfg.patch_stride)
        per_case.append([(img, tgt) for (_, img), tgt in zip(ps.patches, ps.targets)])

    t0 = time.perf_counter()
    net = TR.network_from_checkpoint(TR.load_checkpoint(TR.train(cfg, patches=per_case)))
    elapsed = time.perf_counter() - t0

    dice = []
    for c in cases:
        probs, _ = TR.predict_probs(net, cfg, c)
        _, targets, _ = D.prepare_case(c, cfg.crop_shape)
        per_class, _ = soft_dice_loss(Tensor(probs[None]), targets[None])
        dice.append(1 - per_class.data)
    dice = np.mean(dice, axis=0)
    log = TR.read_loss_log(f"{cfg.checkpoint_dir}/{TR.LOG_NAME}")
    print(f"pattern {args.pattern}: loss {log[0]['total']:.4f} -> {log[-1]['total']:.4f} in {elapsed:.0f}s")
    print(f"soft Dice ET {dice[0]:.4f}  TC {dice[1]:.4f}  WT {dice[2]:.4f}  mean {dice.mean():.4f}")


if __name__ == "__main__":
    main()
