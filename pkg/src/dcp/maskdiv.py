"""Region division of the support grid.

The coarse self-reasoning mask and the down-sampled ground truth split the
grid into four disjoint regions:

* ``alpha``: predicted and annotated foreground (object body)
* ``beta``: annotated foreground the coarse mask missed (boundary / hard parts)
* ``gamma``: predicted and annotated background
* ``delta``: background the coarse mask wrongly fired on (distractors)
"""

from dataclasses import dataclass

import numpy as np

from dcp.errors import ValidationError
from dcp.kernels import divide_kernel

REGION_KINDS = ("alpha", "beta", "gamma", "delta")


def as_binary_mask(mask, name="mask"):
    """Return ``mask`` as a 2-D int64 array, raising if it is not over {0, 1}."""
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise ValidationError(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.shape[0] == 0 or arr.shape[1] == 0:
        raise ValidationError(f"{name} has an empty dimension: {arr.shape}")
    if arr.dtype == bool:
        return arr.astype(np.int64)
    if not np.isin(arr, (0, 1)).all():
        raise ValidationError(f"{name} must contain only 0 and 1")
    return arr.astype(np.int64)


def nearest_indices(src, dst):
    # floor(i * src / dst); same rule as torch's "nearest" interpolation
    return (np.arange(dst) * src) // dst


def downsample_mask(mask, target_h, target_w):
    """Nearest-neighbour resize of a binary mask to ``target_h`` x ``target_w``."""
    m = as_binary_mask(mask)
    if int(target_h) <= 0 or int(target_w) <= 0:
        raise ValidationError(f"target size must be positive, got {target_h}x{target_w}")
    rows = nearest_indices(m.shape[0], int(target_h))
    cols = nearest_indices(m.shape[1], int(target_w))
    return m[np.ix_(rows, cols)]


@dataclass(frozen=True)
class RegionPartition:
    alpha: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray
    delta: np.ndarray

    def __getitem__(self, kind):
        if kind not in REGION_KINDS:
            raise KeyError(kind)
        return getattr(self, kind)

    def as_dict(self):
        return {k: getattr(self, k) for k in REGION_KINDS}

    def check(self, gt):
        """Raise ``AssertionError`` if any partition invariant is broken."""
        gt = as_binary_mask(gt, "gt")
        regions = [self.alpha, self.beta, self.gamma, self.delta]
        for r in regions:
            assert r.shape == gt.shape
            assert np.isin(r, (0, 1)).all()
        assert (sum(regions) == 1).all()
        assert np.array_equal(self.alpha + self.beta, gt)
        assert np.array_equal(self.gamma + self.delta, 1 - gt)
        for i in range(4):
            for j in range(i + 1, 4):
                assert not (regions[i] * regions[j]).any()


def divide(pred_aux, gt):
    """Split the grid into the four proxy regions from the coarse and true masks."""
    pred = as_binary_mask(pred_aux, "pred_aux")
    gt = as_binary_mask(gt, "gt")
    if pred.shape != gt.shape:
        raise ValidationError(f"shape mismatch: pred_aux {pred.shape} vs gt {gt.shape}")
    alpha, beta, gamma, delta = divide_kernel(np.ascontiguousarray(pred), np.ascontiguousarray(gt))
    return RegionPartition(alpha, beta, gamma, delta)


# RGB colours used by the region overlay
REGION_COLOURS = {
    "alpha": (230, 60, 60),
    "beta": (250, 200, 40),
    "gamma": (60, 90, 200),
    "delta": (60, 200, 90),
}


def render_partition(partition, scale=1):
    """Colour-code the four regions into an ``H x W x 3`` uint8 image."""
    h, w = partition.alpha.shape
    img = np.zeros((h, w, 3), np.uint8)
    for kind, colour in REGION_COLOURS.items():
        img[partition[kind] == 1] = colour
    if scale > 1:
        img = img.repeat(scale, axis=0).repeat(scale, axis=1)
    return img
