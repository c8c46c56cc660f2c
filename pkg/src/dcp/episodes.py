"""Fold splits and the episodic sampler."""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from dcp.data import DEFAULT_MIN_FG_AREA, SyntheticShapes
from dcp.errors import SamplingError, ValidationError


@dataclass(frozen=True)
class FoldSplit:
    dataset: str
    fold_index: int
    train_classes: frozenset
    test_classes: frozenset

    def classes_for(self, phase):
        if phase == "train":
            return self.train_classes
        if phase == "test":
            return self.test_classes
        raise ValidationError(f"phase must be 'train' or 'test', got {phase!r}")


def make_split(dataset, fold_index):
    """Class split for one cross-validation fold.

    pascal5i: fold i tests classes 5i+1..5i+5. coco20i: fold i tests the
    interleaved classes 4k+i+1. synthetic: fold i tests 3i+1..3i+3.
    """
    if not 0 <= fold_index <= 3:
        raise ValidationError(f"fold_index must be in 0..3, got {fold_index}")
    if dataset == "pascal5i":
        all_classes = range(1, 21)
        test = {5 * fold_index + j for j in range(1, 6)}
    elif dataset == "coco20i":
        all_classes = range(1, 81)
        test = {4 * k + fold_index + 1 for k in range(20)}
    elif dataset == "synthetic":
        all_classes = range(1, SyntheticShapes.n_classes + 1)
        test = {3 * fold_index + j for j in range(1, 4)}
    else:
        raise ValidationError(f"unknown dataset {dataset!r}")
    return FoldSplit(dataset, fold_index, frozenset(set(all_classes) - test), frozenset(test))


@dataclass
class Episode:
    support: list  # K (image, mask) pairs
    query_image: np.ndarray
    query_mask: Optional[np.ndarray]
    class_id: int
    episode_seed: int
    support_ids: tuple = ()
    query_id: Optional[str] = None
    query_label: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def k_shot(self):
        return len(self.support)


def binarize(label, class_id):
    return (np.asarray(label) == class_id).astype(np.int64)


class EpisodeSampler:
    """Draws episodes from ``dataset`` restricted to one side of ``split``.

    Images whose target-class area is below ``min_fg_area`` pixels are not
    used for that class. ``None`` takes the dataset's own default.
    """

    def __init__(self, dataset, split, min_fg_area=None):
        self.dataset = dataset
        self.split = split
        if min_fg_area is None:
            min_fg_area = getattr(dataset, "default_min_fg_area", DEFAULT_MIN_FG_AREA)
        self.min_fg_area = int(min_fg_area)
        self._by_class = {}
        for image_id in dataset.image_ids:
            for c, area in dataset.areas(image_id).items():
                if area >= self.min_fg_area and area > 0:
                    self._by_class.setdefault(c, []).append(image_id)

    def usable_images(self, class_id):
        return list(self._by_class.get(class_id, ()))

    def sample(self, phase, k_shot, rng_seed):
        if k_shot < 1:
            raise ValidationError("k_shot must be >= 1")
        pool = sorted(self.split.classes_for(phase))
        if not pool:
            raise SamplingError(f"no classes available for phase {phase!r}")
        rng = np.random.default_rng(rng_seed)
        class_id = int(pool[rng.integers(len(pool))])
        images = self._by_class.get(class_id, [])
        if len(images) < k_shot + 1:
            raise SamplingError(
                f"class {class_id} has {len(images)} usable images, need {k_shot + 1} for a {k_shot}-shot episode"
            )
        picks = rng.choice(len(images), size=k_shot + 1, replace=False)
        query_id = images[picks[0]]
        support_ids = tuple(images[i] for i in picks[1:])
        support = [(self.dataset.image(i), binarize(self.dataset.label(i), class_id)) for i in support_ids]
        query_label = self.dataset.label(query_id)
        return Episode(
            support=support,
            query_image=self.dataset.image(query_id),
            query_mask=binarize(query_label, class_id),
            class_id=class_id,
            episode_seed=int(rng_seed),
            support_ids=support_ids,
            query_id=query_id,
            query_label=query_label,
        )


def _default_dataset(split):
    if split.dataset != "synthetic":
        raise ValidationError(f"pass a dataset explicitly for {split.dataset!r}")
    return SyntheticShapes()


def sample_episode(split, phase, k_shot, rng_seed, dataset=None, min_fg_area=None):
    sampler = EpisodeSampler(dataset if dataset is not None else _default_dataset(split), split, min_fg_area)
    return sampler.sample(phase, k_shot, rng_seed)


def episode_seeds(run_seed, n):
    return [int(s) for s in np.random.SeedSequence(run_seed).generate_state(n, dtype=np.uint32)] if n else []


def build_eval_suite(split, n_episodes, k_shot, run_seed, dataset=None, min_fg_area=None, sampler=None):
    """``n_episodes`` test-phase episodes, reproducible from ``run_seed``."""
    if n_episodes < 0:
        raise ValidationError("n_episodes must be >= 0")
    if sampler is None:
        sampler = EpisodeSampler(dataset if dataset is not None else _default_dataset(split), split, min_fg_area)
    return [sampler.sample("test", k_shot, s) for s in episode_seeds(run_seed, n_episodes)]


def training_seed(seed, step, slot):
    """Episode seed for batch slot ``slot`` of optimisation step ``step``."""
    return int(np.random.SeedSequence([seed, step, slot]).generate_state(1, dtype=np.uint32)[0])
