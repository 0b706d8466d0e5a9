"""Short toy joint training run.

Pretrains the small mask separator on unwatermarked stems, measures the
post-separation BER of the reference codec through it, then trains codec and
separator together and measures again on the same held-out items. The
acceptance suite runs the same procedure at full length (600 steps after
2000 pretraining steps); this demo is shorter so it finishes in a few minutes.

    python demos/toy_joint_training.py [steps]
"""
import logging
import sys

from stemmark.joint import (LossWeights, TrainableCodec, TrainConfig, pretrain_separator, probe_ber, probe_items,
                            train_joint)


def main(steps=200):
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    cfg = TrainConfig(steps=steps, attack_start_step=steps // 4, weights=LossWeights(phase2_step=steps // 4),
                      wiring="sep_loss_plus_bce", pretrain_steps=500, pool_size=32, probe_every=max(1, steps // 4),
                      probe_items=4)
    sep = pretrain_separator(cfg)
    held = probe_items(cfg, 8, 77)
    before = probe_ber(TrainableCodec.initial(), sep, held)
    print(f"reference codec, frozen separator: post-separation BER {100 * before:.2f}%")
    res = train_joint(cfg, separator=sep)
    for row in res.curves:
        if row.get("probe_ber", "") != "":
            print(f"  step {row['step']:4d}: probe BER {100 * row['probe_ber']:.2f}%")
    after = probe_ber(res.codec, res.separator, held)
    print(f"after joint training: post-separation BER {100 * after:.2f}%")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 200)
