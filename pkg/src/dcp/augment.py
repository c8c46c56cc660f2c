"""Training-time episode augmentation.

Colour changes are drawn once per episode and applied to every image in it,
so support and query stay comparable while a class's absolute colour stops
being a reliable cue across episodes. Flips are drawn per image.
"""

from dataclasses import replace
from itertools import permutations

import numpy as np

_CHANNEL_ORDERS = list(permutations(range(3)))


def _colour(image, order, gain):
    img = np.asarray(image)[..., list(order)].astype(np.float32) * gain
    return np.clip(img, 0, 255).astype(np.uint8)


def _flip(rng, image, mask, label=None):
    if rng.random() < 0.5:
        image = image[:, ::-1]
        mask = None if mask is None else mask[:, ::-1]
        label = None if label is None else label[:, ::-1]
    return np.ascontiguousarray(image), mask if mask is None else np.ascontiguousarray(mask), \
        label if label is None else np.ascontiguousarray(label)


def augment_episode(episode, seed):
    """Return a colour-permuted, randomly flipped copy of ``episode``."""
    rng = np.random.default_rng(seed)
    order = _CHANNEL_ORDERS[rng.integers(len(_CHANNEL_ORDERS))]
    gain = rng.uniform(0.8, 1.2, size=3).astype(np.float32)
    support = []
    for image, mask in episode.support:
        image, mask, _ = _flip(rng, _colour(image, order, gain), mask)
        support.append((image, mask))
    q_img, q_mask, q_label = _flip(rng, _colour(episode.query_image, order, gain), episode.query_mask,
                                   episode.query_label)
    return replace(episode, support=support, query_image=q_img, query_mask=q_mask, query_label=q_label)
