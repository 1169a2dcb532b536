"""Crafting statistics on the desk extractor: loss decrease, dominance,
and how many target units are inactive at the start point."""

import argparse
from dataclasses import replace

import numpy as np

from tlattack import config as config_mod
from tlattack.attack import craft_set, init_input
from tlattack.experiment import attack_seed, build_teacher, extractor_of, load_corpus, make_split
from tlattack.netcore import forward


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config")
    ap.add_argument("--workers", type=int, default=4)
    args = ap.parse_args()
    cfg = config_mod.load(args.config) if args.config else config_mod.RunConfig()
    split = make_split(cfg, load_corpus(cfg))
    teacher = build_teacher(cfg, split)
    ext = extractor_of(teacher)
    acfg = replace(cfg.attack, seed=attack_seed(cfg))
    crafted = craft_set(ext, acfg, workers=args.workers)
    m = len(crafted)
    acts = np.stack([crafted[i].activation for i in range(m)])
    first = np.array([crafted[i].loss_trajectory[0] for i in range(m)])
    last = np.array([crafted[i].final_loss for i in range(m)])
    # pre-activation of the extractor's last layer at the start point
    start = init_input(acfg.init_mode, ext.input_shape, 0)
    pre, _ = forward(ext, start, upto=len(ext.layers) - 1)
    natural = forward(ext, split.teacher_set.inputs)[0]
    print(f"teacher holdout accuracy      {teacher.meta['holdout_accuracy']:.3f}")
    print(f"terminal < initial loss       {np.mean(last < first):.3f}")
    print(f"dominance (argmax == target)  {np.mean(acts.argmax(1) == np.arange(m)):.3f}")
    print(f"targets inactive at start     {np.mean(pre <= 0):.3f}")
    print(f"targets silent after crafting {np.mean(acts[np.arange(m), np.arange(m)] <= 1e-6):.3f}")
    print(f"natural max activation        mean {natural.max(1).mean():.2f}  max {natural.max():.2f}")
    print(f"crafted target activation     median {np.median(acts[np.arange(m), np.arange(m)]):.1f}")


if __name__ == "__main__":
    main()
