import numpy as np
import pytest

from marvel.autodiff import DimensionError, Tensor, precision
from marvel.params import ModelConfig, ModelParams
from marvel.vision import GridImage, ImageFormatError, grid_features, patchify, project, read_image, write_image

CFG = ModelConfig(vocab_size=10, d_model=8, d_vis=8, vis_heads=2, vis_ff=16)


def test_patchify_shape():
    patches = patchify(np.zeros((28, 28, 1)), 4)
    assert patches.shape == (49, 16)


def test_constant_image_gives_identical_patches():
    patches = patchify(np.full((28, 28, 3), 0.25), 4)
    assert np.all(patches == patches[0])


def test_bright_pixel_only_changes_first_patch():
    img = np.zeros((28, 28, 1))
    img[0, 0, 0] = 1.0
    patches = patchify(img, 4)
    assert patches[0, 0] == 1.0
    assert np.count_nonzero(patches) == 1


def test_patch_order_row_major_channel_minor():
    img = np.arange(28 * 28 * 2, dtype=float).reshape(28, 28, 2)
    patches = patchify(img, 4)
    # patch 8 = grid row 1, column 1; its first two values are pixel (4, 4) channels 0 and 1
    np.testing.assert_array_equal(patches[8, :2], img[4, 4])
    np.testing.assert_array_equal(patches[8, 2:4], img[4, 5])
    np.testing.assert_array_equal(patches[8, 8:10], img[5, 4])


@pytest.mark.parametrize("shape,patch", [((28, 27, 1), 4), ((32, 32, 1), 4), ((28, 28, 1), 3)])
def test_bad_geometry_rejected(shape, patch):
    with pytest.raises(DimensionError):
        patchify(np.zeros(shape), patch)


def test_grid_features_shape_and_determinism():
    p = ModelParams.initialize(CFG, seed=2)
    img = np.random.default_rng(0).uniform(size=(28, 28, 3))
    a = grid_features(img, p, CFG).data
    b = grid_features(img.copy(), p, CFG).data
    assert a.shape == (1, 49, 8)
    assert np.array_equal(a, b)


def test_patch_permutation_equivariance_without_positions():
    p = ModelParams.initialize(CFG, seed=2)
    p["vision.pos_emb"].data[:] = 0
    rng = np.random.default_rng(1)
    img = rng.uniform(size=(28, 28, 3)).astype(np.float32)
    swapped = img.copy()
    # swap patch 0 (rows 0-3, cols 0-3) with patch 10 (grid row 1, col 3)
    swapped[0:4, 0:4], swapped[4:8, 12:16] = img[4:8, 12:16], img[0:4, 0:4]
    a = grid_features(img, p, CFG).data[0]
    b = grid_features(swapped, p, CFG).data[0]
    np.testing.assert_allclose(b[0], a[10], atol=1e-5)
    np.testing.assert_allclose(b[10], a[0], atol=1e-5)
    np.testing.assert_allclose(b[1:10], a[1:10], atol=1e-5)


def test_identity_and_zero_projection():
    p = ModelParams.initialize(CFG)
    h = Tensor(np.random.default_rng(0).standard_normal((49, 8)))
    p["proj.w"].data = np.eye(8, dtype=np.float32)
    np.testing.assert_allclose(project(h, p).data, h.data)
    p["proj.w"].data[:] = 0
    p["proj.b"].data = np.arange(8, dtype=np.float32)
    assert np.all(project(h, p).data == np.arange(8))


def test_projection_matches_hand_oracle_and_is_affine():
    rng = np.random.default_rng(3)
    with precision("f64"):
        p = ModelParams.initialize(CFG, seed=4)
        p["proj.b"].data = rng.standard_normal(8)
        h1, h2 = rng.standard_normal((49, 8)), rng.standard_normal((49, 8))
        W, b = p["proj.w"].data, p["proj.b"].data
        oracle = np.array([[sum(h1[i, k] * W[k, j] for k in range(8)) + b[j] for j in range(8)]
                           for i in range(49)])
        np.testing.assert_allclose(project(Tensor(h1), p).data, oracle, atol=1e-6)
        al, be = 0.7, -1.9
        lhs = project(Tensor(al * h1 + be * h2), p).data
        rhs = al * project(Tensor(h1), p).data + be * project(Tensor(h2), p).data - (al + be - 1) * b
        np.testing.assert_allclose(lhs, rhs, atol=1e-5)


def test_projection_dimension_mismatch():
    p = ModelParams.initialize(CFG)
    with pytest.raises(DimensionError):
        project(Tensor(np.zeros((49, 5))), p)


def test_image_file_roundtrip(tmp_path):
    img = GridImage.from_array(np.random.default_rng(0).uniform(size=(28, 28, 3)))
    write_image(tmp_path / "a.img", img)
    raw = (tmp_path / "a.img").read_bytes()
    assert raw[:4] == b"IMGF" and len(raw) == 16 + 4 * 28 * 28 * 3
    back = read_image(tmp_path / "a.img")
    assert np.array_equal(back.pixels, img.pixels)


def test_image_file_errors(tmp_path):
    (tmp_path / "x.img").write_bytes(b"JUNK" + bytes(12))
    with pytest.raises(ImageFormatError):
        read_image(tmp_path / "x.img")
    (tmp_path / "y.img").write_bytes(b"IMGF" + (2).to_bytes(4, "little") * 3 + bytes(4))
    with pytest.raises(ImageFormatError):
        read_image(tmp_path / "y.img")
