import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dcp.errors import ValidationError
from dcp.maskdiv import divide, downsample_mask, render_partition


def binary_grids(max_side=12):
    shape = st.tuples(st.integers(1, max_side), st.integers(1, max_side))
    return shape.flatmap(lambda s: st.tuples(arrays(np.int64, s, elements=st.integers(0, 1)),
                                             arrays(np.int64, s, elements=st.integers(0, 1))))


class TestDownsample:
    def test_two_by_two_to_one_picks_top_left(self):
        assert downsample_mask([[1, 1], [0, 0]], 1, 1).tolist() == [[1]]
        assert downsample_mask([[0, 1], [1, 1]], 1, 1).tolist() == [[0]]

    def test_identity_size(self, rng):
        m = (rng.random((7, 5)) < 0.5).astype(int)
        assert np.array_equal(downsample_mask(m, 7, 5), m)

    def test_constant_mask(self):
        assert np.array_equal(downsample_mask(np.ones((8, 8), int), 4, 4), np.ones((4, 4)))

    def test_matches_torch_nearest(self, rng):
        import torch
        import torch.nn.functional as F

        m = (rng.random((37, 23)) < 0.4).astype(np.int64)
        ref = F.interpolate(torch.from_numpy(m).float()[None, None], size=(9, 6), mode="nearest")[0, 0]
        assert np.array_equal(downsample_mask(m, 9, 6), ref.numpy().astype(np.int64))

    def test_rejects_non_binary(self):
        with pytest.raises(ValidationError):
            downsample_mask([[0, 2]], 1, 1)

    @pytest.mark.parametrize("h,w", [(0, 3), (3, 0)])
    def test_rejects_zero_target(self, h, w):
        with pytest.raises(ValidationError):
            downsample_mask(np.ones((4, 4), int), h, w)


class TestDivide:
    def test_perfect_prediction(self, rng):
        gt = (rng.random((6, 6)) < 0.5).astype(np.int64)
        part = divide(gt, gt)
        assert np.array_equal(part.alpha, gt)
        assert not part.beta.any()
        assert np.array_equal(part.gamma, 1 - gt)
        assert not part.delta.any()

    def test_empty_prediction_gives_beta_equal_gt(self, rng):
        gt = (rng.random((5, 7)) < 0.5).astype(np.int64)
        part = divide(np.zeros_like(gt), gt)
        assert not part.alpha.any()
        assert np.array_equal(part.beta, gt)
        assert np.array_equal(part.gamma, 1 - gt)
        assert not part.delta.any()

    def test_hand_worked_example(self):
        part = divide([[1, 0], [1, 0]], [[1, 1], [0, 0]])
        assert part.alpha.tolist() == [[1, 0], [0, 0]]
        assert part.beta.tolist() == [[0, 1], [0, 0]]
        assert part.gamma.tolist() == [[0, 0], [0, 1]]
        assert part.delta.tolist() == [[0, 0], [1, 0]]

    def test_shape_mismatch(self):
        with pytest.raises(ValidationError):
            divide(np.zeros((2, 2), int), np.zeros((2, 3), int))

    def test_non_binary(self):
        with pytest.raises(ValidationError):
            divide([[0, 3]], [[0, 1]])

    def test_integer_dtype(self):
        part = divide([[1, 0]], [[1, 1]])
        assert part.alpha.dtype == np.int64

    @settings(max_examples=300, deadline=None)
    @given(binary_grids())
    def test_partition_invariants(self, pair):
        pred, gt = pair
        part = divide(pred, gt)
        part.check(gt)
        assert (part.beta >= 0).all() and (part.delta >= 0).all()

    @settings(max_examples=100, deadline=None)
    @given(binary_grids())
    def test_self_division(self, pair):
        _, gt = pair
        part = divide(gt, gt)
        assert np.array_equal(part.alpha, gt)
        for r in (part.beta, part.gamma, part.delta):
            assert not (r * gt).any()


def test_render_partition_colours_every_pixel():
    part = divide([[1, 0], [1, 0]], [[1, 1], [0, 0]])
    img = render_partition(part, scale=3)
    assert img.shape == (6, 6, 3)
    assert (img.reshape(-1, 3).sum(axis=1) > 0).all()
