import numpy as np
import pytest

from featx.preprocess import (
    center_crop,
    five_crop,
    labels_to_grid,
    resize_minor_axis,
    standard_resize,
)


def test_resize_minor_axis_landscape():
    img = np.zeros((100, 300, 3), np.uint8)
    out = resize_minor_axis(img, 224)
    assert out.shape[0] == 224  # minor axis is height
    assert out.shape[1] == 672


def test_standard_resize_square_output():
    img = np.zeros((123, 456, 3), np.uint8)
    out = standard_resize(img, 224)
    assert out.shape == (224, 224, 3)
    out_eval = standard_resize(img, 320)
    assert out_eval.shape == (320, 320, 3)


def test_center_crop_values():
    img = np.arange(36, dtype=np.uint8).reshape(6, 6)
    out = center_crop(img, 2)
    assert np.array_equal(out, img[2:4, 2:4])


def test_five_crop_shapes_and_order():
    img = np.arange(8 * 8 * 3, dtype=np.uint8).reshape(8, 8, 3)
    crops = five_crop(img)
    assert len(crops) == 5
    assert all(c.shape == (4, 4, 3) for c in crops)
    assert np.array_equal(crops[0], img[:4, :4])
    assert np.array_equal(crops[1], img[:4, 4:])
    assert np.array_equal(crops[2], img[4:, :4])
    assert np.array_equal(crops[3], img[4:, 4:])
    assert np.array_equal(crops[4], img[2:6, 2:6])


def test_labels_nearest_keeps_class_ids():
    labels = np.zeros((64, 64), np.uint8)
    labels[:, 32:] = 7
    grid = labels_to_grid(labels, 8, 8)
    assert set(np.unique(grid)) == {0, 7}
    assert grid.shape == (8, 8)


def test_five_crop_rejects_tiny():
    with pytest.raises(ValueError):
        five_crop(np.zeros((1, 5, 3), np.uint8))
