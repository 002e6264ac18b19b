"""Walk one synthetic image through the preprocessing stages and save each.

Usage: python demos/preprocessing_stages.py [out_dir]
"""
import sys
from pathlib import Path

import numpy as np

from histoattn.data import render_patch
from histoattn.formats import write_image
from histoattn.preprocess import (PreprocessConfig, augment, clahe, median_filter, normalize, resize,
                                  zero_pad)

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_preprocess")
cfg = PreprocessConfig()
img = render_patch(np.random.default_rng(7), 0, (96, 96), "100X")
salt = np.random.default_rng(8).random(img.shape) < 0.02
img[salt] = 255

stages = [("0_input", img)]
stages.append(("1_padded", zero_pad(stages[-1][1], cfg.pad)))
stages.append(("2_median", median_filter(stages[-1][1], cfg.median_kernel)))
stages.append(("3_clahe", clahe(stages[-1][1], cfg.clahe_tiles, cfg.clahe_clip_limit)))
stages.append(("4_resized", resize(stages[-1][1], cfg.target_size)))
stages.append(("5_augmented", augment(stages[-1][1], cfg.augment, seed=1)))

for name, a in stages:
    write_image(out / f"{name}.pgm", a)
    print(f"{name:12s} shape {str(a.shape):10s} min {a.min():3d} max {a.max():3d} "
          f"salt pixels {int((a == 255).sum())}")

t = normalize(stages[4][1])
print(f"network input {t.shape}, range [{t.data.min():.3f}, {t.data.max():.3f}]")
print("wrote", out)
