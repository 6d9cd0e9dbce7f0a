"""Random generators shared by several test modules."""

import numpy as np

from ratnet.region import MaskSet, RegionPartition


def random_maskset(rng, max_side=16, max_masks=8):
    h, w = (int(v) for v in rng.integers(1, max_side + 1, size=2))
    n = int(rng.integers(0, max_masks + 1))
    masks = np.zeros((n, h, w), dtype=np.uint8)
    for i in range(n):
        if rng.uniform() < 0.5:
            y0, x0 = rng.integers(0, h), rng.integers(0, w)
            y1, x1 = rng.integers(y0 + 1, h + 1), rng.integers(x0 + 1, w + 1)
            masks[i, y0:y1, x0:x1] = 1
        else:
            masks[i] = rng.uniform(size=(h, w)) < rng.uniform(0.05, 0.9)
    return MaskSet(h, w, masks)


def random_labels(rng, n, max_regions):
    L = int(rng.integers(1, max_regions + 1))
    lab = rng.integers(0, L, size=n)
    return RegionPartition.from_labels(lab.reshape(1, n)).labels.reshape(-1)
