import numpy as np
import pytest

from dcp.data import FolderDataset, SyntheticShapes, write_dataset
from dcp.episodes import EpisodeSampler, build_eval_suite, make_split, sample_episode
from dcp.errors import SamplingError, ValidationError


@pytest.mark.parametrize("name,n,per_fold", [("pascal5i", 20, 5), ("coco20i", 80, 20), ("synthetic", 12, 3)])
def test_fold_splits(name, n, per_fold):
    tests = []
    for fold in range(4):
        s = make_split(name, fold)
        assert not (s.train_classes & s.test_classes)
        assert len(s.test_classes) == per_fold
        assert s.train_classes | s.test_classes == set(range(1, n + 1))
        tests.append(s.test_classes)
    assert set().union(*tests) == set(range(1, n + 1))


def test_pascal_fold_classes():
    assert make_split("pascal5i", 1).test_classes == {6, 7, 8, 9, 10}
    assert sorted(make_split("coco20i", 0).test_classes)[:3] == [1, 5, 9]


def test_bad_fold():
    with pytest.raises(ValidationError):
        make_split("pascal5i", 4)


def test_same_seed_same_episode(sampler):
    a = sampler.sample("train", 2, 99)
    b = sampler.sample("train", 2, 99)
    assert (a.class_id, a.query_id, a.support_ids) == (b.class_id, b.query_id, b.support_ids)
    assert np.array_equal(a.query_image, b.query_image)


def test_k_shot_arity(sampler):
    ep = sampler.sample("train", 5, 7)
    assert ep.k_shot == 5 and len(ep.support_ids) == 5
    assert ep.query_id not in ep.support_ids
    assert len(set(ep.support_ids)) == 5


def test_masks_binary_and_nonempty(sampler):
    for seed in range(30):
        ep = sampler.sample("train", 1, seed)
        for _, m in ep.support:
            assert set(np.unique(m)) <= {0, 1} and m.sum() > 0
        assert set(np.unique(ep.query_mask)) <= {0, 1} and ep.query_mask.sum() > 0
        assert np.array_equal(ep.query_mask, (ep.query_label == ep.class_id).astype(int))


def test_phase_class_pools(sampler, split0):
    for seed in range(50):
        assert sampler.sample("test", 1, seed).class_id in split0.test_classes
        assert sampler.sample("train", 1, seed).class_id not in split0.test_classes


def test_too_few_images_names_class(split0):
    ds = SyntheticShapes(images_per_class=2, seed=0)
    sampler = EpisodeSampler(ds, split0, min_fg_area=10**6)
    with pytest.raises(SamplingError, match="class"):
        sampler.sample("test", 1, 0)


def test_min_area_filter(small_dataset, split0):
    strict = EpisodeSampler(small_dataset, split0, min_fg_area=300)
    loose = EpisodeSampler(small_dataset, split0, min_fg_area=0)
    for c in split0.test_classes:
        assert set(strict.usable_images(c)) <= set(loose.usable_images(c))
        for i in strict.usable_images(c):
            assert small_dataset.areas(i)[c] >= 300


def test_eval_suite(small_dataset, split0):
    a = build_eval_suite(split0, 20, 1, run_seed=0, dataset=small_dataset)
    b = build_eval_suite(split0, 20, 1, run_seed=0, dataset=small_dataset)
    c = build_eval_suite(split0, 20, 1, run_seed=1, dataset=small_dataset)
    assert len(a) == 20
    assert [e.query_id for e in a] == [e.query_id for e in b]
    assert [(e.query_id, e.support_ids) for e in a] != [(e.query_id, e.support_ids) for e in c]
    assert build_eval_suite(split0, 0, 1, 0, dataset=small_dataset) == []


def test_eval_suite_thousand(split0):
    ds = SyntheticShapes(images_per_class=6, seed=1)
    assert len(build_eval_suite(split0, 1000, 1, 5, dataset=ds)) == 1000


def test_module_level_sampler_defaults_to_synthetic(split0):
    ep = sample_episode(split0, "test", 1, 4)
    assert ep.class_id in split0.test_classes


def test_folder_roundtrip(tmp_path, split0):
    ds = SyntheticShapes(images_per_class=3, seed=5)
    write_dataset(ds, tmp_path)
    assert (tmp_path / "images").is_dir() and (tmp_path / "annotations").is_dir()
    back = FolderDataset(tmp_path)
    assert back.classes == ds.classes
    i = ds.image_ids[4]
    assert np.array_equal(back.image(i), ds.image(i))
    assert np.array_equal(back.label(i), ds.label(i))
    assert back.areas(i) == ds.areas(i)
    a = EpisodeSampler(ds, split0, 0).sample("train", 1, 3)
    b = EpisodeSampler(back, split0, 0).sample("train", 1, 3)
    assert (a.class_id, a.query_id) == (b.class_id, b.query_id)


def test_synthetic_is_deterministic():
    a, b = SyntheticShapes(4, seed=2), SyntheticShapes(4, seed=2)
    assert np.array_equal(a.image(17), b.image(17))
    assert not np.array_equal(a.image(17), SyntheticShapes(4, seed=3).image(17))


def test_companion_distractors():
    ds = SyntheticShapes(images_per_class=10, seed=5, companion_prob=1.0)
    plain = SyntheticShapes(images_per_class=10, seed=5)
    hues = {c: ds._style[c][0] for c in ds.classes}
    for c in ds.classes:
        assert hues[ds.companion(c)] == hues[c]
        assert ds._style[ds.companion(c)][3] != ds._style[c][3]
        assert ds.companion(ds.companion(c)) == c

    def rate(dataset):
        hits = 0
        for i, image_id in enumerate(dataset.image_ids):
            primary = dataset.classes[i // dataset.images_per_class]
            hits += dataset.companion(primary) in dataset.areas(image_id)
        return hits / len(dataset.image_ids)

    assert rate(ds) >= 0.9
    assert rate(plain) < 0.5


def test_augmentation_keeps_masks_aligned(sampler):
    from dcp.augment import augment_episode

    ep = sampler.sample("train", 2, 11)
    for seed in range(8):
        aug = augment_episode(ep, seed)
        assert aug.query_image.shape == ep.query_image.shape
        flipped = np.array_equal(aug.query_mask, ep.query_mask[:, ::-1])
        assert flipped or np.array_equal(aug.query_mask, ep.query_mask)
        assert np.array_equal(aug.query_label, ep.query_label[:, ::-1] if flipped else ep.query_label)
        assert aug.class_id == ep.class_id
        assert np.array_equal(augment_episode(ep, seed).query_image, aug.query_image)
