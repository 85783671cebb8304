"""
Plugging the modules into a toy segmenter
=========================================

Trains the four ablation arms on base-class episodes and scores them on
novel classes. Pass a smaller episode count for a quick look, e.g.
``python demos/03_plugin_training.py 150``; the default matches the
acceptance experiment for one seed (a few minutes on one core).
"""

import sys
from dataclasses import replace

from aenet.trainer import ARMS, TrainConfig, bench_similarity, train

n_train = int(sys.argv[1]) if len(sys.argv) > 1 else 500
cfg = TrainConfig(episodes_train=n_train, seed=0)

reports = {}
for name, flags in ARMS.items():
    rep = train(replace(cfg, **flags))
    reports[name] = rep
    print(f"{name:<9} params {rep.n_params:>6}  novel mIoU {rep.novel.miou:.3f}  "
          f"FB-IoU {rep.novel.fb_iou:.3f}  base holdout {rep.base_holdout.miou:.3f}  ({rep.wall_clock:.0f}s)")

sim = bench_similarity(reports["aenet"].model, cfg, 50)
print(f"FG cosine to support prototype: before AE {sim['mean_before']:.3f}, after {sim['mean_after']:.3f}")
