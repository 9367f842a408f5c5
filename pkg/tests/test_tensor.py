import math

import numpy as np
import pytest

from rafsim.tensor import METHODS, apply_upsample, build_upsample_op, resize


def bilinear_loop(img, dh, dw):
    """Scalar-loop reference: half-pixel centres, clamped borders."""
    h, w, c = img.shape
    out = np.zeros((dh, dw, c))
    for i in range(dh):
        y = min(max((i + 0.5) * h / dh - 0.5, 0.0), h - 1)
        y0 = int(math.floor(y))
        y1 = min(y0 + 1, h - 1)
        fy = y - y0
        for j in range(dw):
            x = min(max((j + 0.5) * w / dw - 0.5, 0.0), w - 1)
            x0 = int(math.floor(x))
            x1 = min(x0 + 1, w - 1)
            fx = x - x0
            for ch in range(c):
                top = (1 - fx) * img[y0, x0, ch] + fx * img[y0, x1, ch]
                bot = (1 - fx) * img[y1, x0, ch] + fx * img[y1, x1, ch]
                out[i, j, ch] = (1 - fy) * top + fy * bot
    return out


# values produced by bilinear_loop, checked by hand for the first row
GRID_2x2_TO_4x4 = np.array(
    [
        [0.0, 0.25, 0.75, 1.0],
        [0.5, 0.75, 1.25, 1.5],
        [1.5, 1.75, 2.25, 2.5],
        [2.0, 2.25, 2.75, 3.0],
    ]
)


def test_oracle_fixture_matches_loop():
    img = np.array([[0.0, 1.0], [2.0, 3.0]])[..., None]
    np.testing.assert_allclose(bilinear_loop(img, 4, 4)[..., 0], GRID_2x2_TO_4x4, atol=1e-15)


def test_bilinear_2x2_to_4x4():
    img = np.array([[0.0, 1.0], [2.0, 3.0]])[..., None]
    np.testing.assert_allclose(resize(img, 4, 4)[..., 0], GRID_2x2_TO_4x4, atol=1e-12)


@pytest.mark.parametrize("method", METHODS)
def test_constant_image_is_preserved(method):
    img = np.full((5, 7, 2), 7.0)
    for dh, dw in [(5, 7), (3, 4), (11, 9), (1, 1)]:
        np.testing.assert_allclose(resize(img, dh, dw, method), 7.0, atol=1e-12)


def test_bilinear_same_size_is_exact_identity():
    img = np.array([[1.0, 2.0], [3.0, 4.0]])[..., None]
    assert np.array_equal(resize(img, 2, 2), img)
    rng = np.random.default_rng(0)
    big = rng.normal(size=(9, 6, 3))
    assert np.array_equal(resize(big, 9, 6), big)


def test_bilinear_matches_loop_on_random_images():
    rng = np.random.default_rng(1)
    for _ in range(10):
        h, w = rng.integers(1, 9, size=2)
        dh, dw = rng.integers(1, 13, size=2)
        img = rng.normal(size=(h, w, 2))
        np.testing.assert_allclose(resize(img, dh, dw), bilinear_loop(img, dh, dw), atol=1e-12)


def test_resize_rejects_bad_arguments():
    img = np.zeros((4, 4, 1))
    with pytest.raises(ValueError):
        resize(img, 0, 3)
    with pytest.raises(ValueError):
        resize(img, 2, 2, "lanczos")
    with pytest.raises(ValueError):
        resize(np.zeros((4, 4)), 2, 2)


def test_area_downscale_by_two_is_block_mean():
    rng = np.random.default_rng(2)
    img = rng.normal(size=(8, 6, 1))
    expect = img.reshape(4, 2, 3, 2, 1).mean(axis=(1, 3))
    np.testing.assert_allclose(resize(img, 4, 3, "area"), expect, atol=1e-12)


def test_bicubic_reproduces_linear_ramps_in_the_interior():
    # Catmull-Rom interpolates linear functions exactly away from the clamped border
    ramp = np.tile(np.arange(10.0)[None, :, None], (10, 1, 1))
    out = resize(ramp, 10, 20, "bicubic")[..., 0]
    x = (np.arange(20) + 0.5) * 0.5 - 0.5
    np.testing.assert_allclose(out[:, 4:16], np.tile(x[4:16], (10, 1)), atol=1e-12)


def test_identity_operator():
    op = build_upsample_op(3, 4, 3, 4)
    np.testing.assert_array_equal(op.dense(), np.eye(12))
    x = np.random.default_rng(3).normal(size=(12, 2))
    assert np.array_equal(apply_upsample(op, x), x)


def test_one_pixel_to_3x3():
    op = build_upsample_op(1, 1, 3, 3)
    out = apply_upsample(op, np.array([[2.5]]))
    np.testing.assert_array_equal(out, np.full((9, 1), 2.5))


def test_operator_rows_match_loop_weights():
    op = build_upsample_op(2, 2, 4, 4).dense()
    for p in range(4):
        basis = np.zeros((2, 2, 1))
        basis.flat[p] = 1.0
        np.testing.assert_allclose(op[:, p], bilinear_loop(basis, 4, 4).ravel(), atol=1e-15)


def test_operator_structure():
    for src, dst in [((2, 2), (4, 4)), ((6, 8), (12, 16)), ((8, 6), (12, 9)), ((3, 5), (7, 11))]:
        op = build_upsample_op(*src, *dst)
        m = op.matrix
        np.testing.assert_allclose(np.asarray(m.sum(axis=1)).ravel(), 1.0, atol=1e-12)
        assert m.data.min() >= 0
        assert np.diff(m.indptr).max() <= 4


def test_apply_matches_dense_matvec():
    rng = np.random.default_rng(4)
    op = build_upsample_op(2, 2, 5, 3)
    x = rng.normal(size=(4, 3))
    np.testing.assert_allclose(apply_upsample(op, x), op.dense() @ x, atol=1e-12)
    np.testing.assert_array_equal(apply_upsample(op, np.zeros((4, 3))), 0.0)


def test_apply_matches_resize_exactly_on_50_images():
    rng = np.random.default_rng(5)
    for _ in range(50):
        sh, sw = rng.integers(1, 9, size=2)
        dh, dw = sh + rng.integers(0, 9), sw + rng.integers(0, 9)
        img = rng.normal(size=(sh, sw, 3))
        op = build_upsample_op(sh, sw, dh, dw)
        flat = apply_upsample(op, img.reshape(-1, 3))
        assert np.array_equal(flat, resize(img, dh, dw).reshape(-1, 3))


def test_operator_rejects_downscale_and_bad_shapes():
    with pytest.raises(ValueError):
        build_upsample_op(4, 4, 2, 4)
    op = build_upsample_op(2, 2, 4, 4)
    with pytest.raises(ValueError):
        apply_upsample(op, np.zeros((5, 1)))


def test_spectral_norm_matches_dense():
    op = build_upsample_op(4, 3, 8, 6)
    assert op.spectral_norm() == pytest.approx(np.linalg.svd(op.dense(), compute_uv=False)[0])
