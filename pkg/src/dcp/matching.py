"""Query-side matching: dense comparison, cosine activation and fusion layouts."""

import logging
from dataclasses import dataclass

import numpy as np

from dcp.errors import ValidationError
from dcp.kernels import cosine_kernel
from dcp.pooling import GUIDANCE_KINDS, SHORT_NAMES

log = logging.getLogger(__name__)

# order in which single-decoder fusion stacks the maps
SINGLE_ORDER = ("foreground", "background", "alpha", "beta", "gamma", "delta")
FG_BRANCH = ("foreground", "alpha", "beta")
BG_BRANCH = ("background", "gamma", "delta")


@dataclass(frozen=True)
class ActivationMap:
    values: np.ndarray
    source_kind: str


@dataclass(frozen=True)
class RefinedFeatures:
    foreground_branch: np.ndarray
    background_branch: np.ndarray


def _features(x):
    f = np.asarray(x, dtype=np.float64)
    if f.ndim != 3:
        raise ValidationError(f"features must be C x H x W, got shape {f.shape}")
    return f


def _vector(vector, channels):
    values = np.asarray(vector.values, dtype=np.float64)
    if values.shape != (channels,):
        raise ValidationError(f"vector length {values.shape} does not match {channels} query channels")
    return values


def expand_concat(query_features, vector):
    """Tile ``vector`` over the query grid and append it after the query channels."""
    f = _features(query_features)
    v = _vector(vector, f.shape[0])
    if not vector.valid:
        v = np.zeros_like(v)
    tiled = np.broadcast_to(v[:, None, None], f.shape)
    return np.concatenate([f, tiled], axis=0)


def cosine_activation(query_features, vector):
    """Per-pixel cosine similarity between ``vector`` and each query column.

    Invalid vectors and zero-norm columns give 0 at the affected pixels.
    """
    f = _features(query_features)
    v = _vector(vector, f.shape[0])
    if not vector.valid:
        return ActivationMap(np.zeros(f.shape[1:]), vector.kind)
    values, zero_cols = cosine_kernel(np.ascontiguousarray(f), np.ascontiguousarray(v))
    if zero_cols:
        log.debug("cosine_activation(%s): %d zero-norm positions set to 0", vector.kind, zero_cols)
    return ActivationMap(np.asarray(values), vector.kind)


def _lookup(maps, kind):
    for key in (kind, *[s for s, full in SHORT_NAMES.items() if full == kind]):
        if key in maps:
            m = maps[key]
            return m.values if isinstance(m, ActivationMap) else np.asarray(m, dtype=np.float64)
    raise ValidationError(f"missing activation map for {kind!r}")


def _stack(tmp, maps, kinds):
    tmp = _features(tmp)
    planes = [_lookup(maps, k) for k in kinds]
    for p in planes:
        if p.shape != tmp.shape[1:]:
            raise ValidationError(f"activation map shape {p.shape} does not match grid {tmp.shape[1:]}")
    return np.concatenate([tmp, np.stack(planes)], axis=0)


def fuse_parallel(tmp_fg, tmp_bg, maps):
    """Build the two decoder inputs of the parallel decoder structure."""
    return RefinedFeatures(_stack(tmp_fg, maps, FG_BRANCH), _stack(tmp_bg, maps, BG_BRANCH))


def fuse_single(tmp_fg, maps):
    """Single-decoder layout: foreground comparison grid followed by all six maps."""
    return _stack(tmp_fg, maps, SINGLE_ORDER)


def fuse_tile_concat(query_features, guidance):
    """Query features followed by tiled copies of all six guidance vectors."""
    f = _features(query_features)
    blocks = [f]
    for kind in SINGLE_ORDER:
        v = guidance[kind]
        values = _vector(v, f.shape[0]) if v.valid else np.zeros(f.shape[0])
        blocks.append(np.broadcast_to(values[:, None, None], f.shape))
    return np.concatenate(blocks, axis=0)


def activation_maps(query_features, guidance):
    """All six cosine maps for a guidance set, keyed by full kind name."""
    return {kind: cosine_activation(query_features, guidance[kind]) for kind in GUIDANCE_KINDS}


def save_refined(path, refined):
    np.savez(path, foreground_branch=refined.foreground_branch, background_branch=refined.background_branch)


def load_refined(path):
    with np.load(path) as data:
        return RefinedFeatures(data["foreground_branch"], data["background_branch"])
