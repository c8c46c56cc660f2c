"""Masked average pooling of support features into proxies and prototypes."""

from dataclasses import dataclass

import numpy as np

from dcp.errors import ValidationError
from dcp.kernels import masked_pool_kernel
from dcp.maskdiv import REGION_KINDS, as_binary_mask

PROTOTYPE_KINDS = ("foreground", "background")
GUIDANCE_KINDS = REGION_KINDS + PROTOTYPE_KINDS

# short names used by configs and the network ("f", "b", ...)
SHORT_NAMES = {
    "f": "foreground",
    "b": "background",
    "alpha": "alpha",
    "beta": "beta",
    "gamma": "gamma",
    "delta": "delta",
}


@dataclass(frozen=True)
class GuidanceVector:
    values: np.ndarray
    kind: str
    valid: bool

    def __post_init__(self):
        if self.kind not in GUIDANCE_KINDS:
            raise ValidationError(f"unknown guidance kind {self.kind!r}")
        if self.valid and not np.isfinite(self.values).all():
            raise ValidationError(f"{self.kind} vector is valid but not finite")


@dataclass(frozen=True)
class GuidanceSet:
    proxies: dict
    prototypes: dict

    def __getitem__(self, kind):
        kind = SHORT_NAMES.get(kind, kind)
        if kind in self.proxies:
            return self.proxies[kind]
        return self.prototypes[kind]

    def items(self):
        yield from self.proxies.items()
        yield from self.prototypes.items()

    def __len__(self):
        return len(self.proxies) + len(self.prototypes)


def _check_features(features):
    f = np.asarray(features)
    if f.ndim != 3:
        raise ValidationError(f"features must be C x H x W, got shape {f.shape}")
    return f


def masked_average_pool(features, mask, kind="foreground"):
    """Average the feature columns selected by ``mask``.

    An empty mask yields an invalid zero vector instead of dividing by zero.
    """
    f = _check_features(features)
    m = as_binary_mask(mask)
    if f.shape[1:] != m.shape:
        raise ValidationError(f"spatial mismatch: features {f.shape[1:]} vs mask {m.shape}")
    values, count = masked_pool_kernel(np.ascontiguousarray(f, dtype=np.float64), np.ascontiguousarray(m))
    return GuidanceVector(np.asarray(values), kind, bool(count > 0))


def derive_guidance(features, partition, gt):
    """Pool the four region proxies and the foreground/background prototypes."""
    gt = as_binary_mask(gt, "gt")
    proxies = {k: masked_average_pool(features, partition[k], k) for k in REGION_KINDS}
    prototypes = {
        "foreground": masked_average_pool(features, (gt == 1).astype(np.int64), "foreground"),
        "background": masked_average_pool(features, (gt == 0).astype(np.int64), "background"),
    }
    return GuidanceSet(proxies, prototypes)


def _mean_valid(vectors):
    valid = [v for v in vectors if v.valid]
    kind = vectors[0].kind
    if not valid:
        return GuidanceVector(np.zeros_like(vectors[0].values), kind, False)
    return GuidanceVector(np.mean([v.values for v in valid], axis=0), kind, True)


def aggregate_shots(sets):
    """Combine per-shot guidance sets by averaging each kind over its valid shots."""
    sets = list(sets)
    if not sets:
        raise ValidationError("need at least one guidance set")
    proxies = {k: _mean_valid([s.proxies[k] for s in sets]) for k in REGION_KINDS}
    prototypes = {k: _mean_valid([s.prototypes[k] for s in sets]) for k in PROTOTYPE_KINDS}
    return GuidanceSet(proxies, prototypes)
