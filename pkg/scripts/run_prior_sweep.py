#!/usr/bin/env python3
"""Train with stochastic prior injection, then sweep priors on held-out scenes.

Prints the four-row table (no priors / K / P / K+P) on a held-out split so the
benefit of camera priors at inference can be read off directly.
"""

import argparse

from uniscale import supervision as sv
from uniscale.evaluation import report_table, sweep_priors, write_reports
from uniscale.model import Model, ModelConfig
from uniscale.scenes import SceneSpec, generate_scene


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n-train", type=int, default=8)
    ap.add_argument("--n-eval", type=int, default=20)
    ap.add_argument("--n-frames", type=int, default=4)
    ap.add_argument("--image-size", type=int, default=64)
    ap.add_argument("--embed-dim", type=int, default=64)
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--peak-lr-fast", type=float, default=1e-2)
    ap.add_argument("--peak-lr-slow", type=float, default=3e-3)
    ap.add_argument("--out-dir", default="runs/prior_sweep")
    args = ap.parse_args()

    train_samples = [generate_scene(SceneSpec(seed=s, n_frames=args.n_frames,
                                              image_size=args.image_size))
                     for s in range(args.n_train)]
    eval_samples = [generate_scene(SceneSpec(seed=1000 + s,
                                             n_frames=args.n_frames,
                                             image_size=args.image_size))
                    for s in range(args.n_eval)]

    model = Model(ModelConfig(image_size=args.image_size,
                              embed_dim=args.embed_dim, seed=0))
    cfg = sv.TrainConfig(steps=args.steps, warmup_steps=100,
                         peak_lr_fast=args.peak_lr_fast,
                         peak_lr_slow=args.peak_lr_slow,
                         weight_decay=0.0, lr_decay="cosine")
    sv.train(model, train_samples, cfg, args.out_dir)

    reports = sweep_priors(model, eval_samples)
    write_reports(reports, args.out_dir, stem="prior_sweep")
    print(report_table(reports))


if __name__ == "__main__":
    main()
