import io

import numpy as np
import pytest
from PIL import Image
from scipy.fft import dctn, idctn

from jadnet.errors import DimensionError, ParameterError
from jadnet.sanitize import (BASE_CHROMA, BASE_LUMA, DCT, CorruptionSpec, FlatJpeg, corrupt, gaussian_blur,
                             gaussian_l2_delta, jpeg_roundtrip, jpeg_ste, quality_to_tables, reconstruction_mse)

QUALITIES = [1, 5, 10, 30, 49, 50, 51, 75, 90, 99, 100]


def reference_codec(img, q):
    """Block-by-block codec written from the textbook definitions."""
    t = quality_to_tables(q)
    h, w, c = img.shape
    pix = img * 255.0
    if c == 3:
        r, g, b = pix[..., 0], pix[..., 1], pix[..., 2]
        y = 0.299 * r + 0.587 * g + 0.114 * b
        planes = [y - 128, (b - y) / 1.772, (r - y) / 1.402]
        tables = [t.luma, t.chroma, t.chroma]
    else:
        planes, tables = [pix[..., 0] - 128], [t.luma]
    out = []
    for p, tab in zip(planes, tables):
        pp = np.pad(p, ((0, -h % 8), (0, -w % 8)), mode="edge")
        rec = np.empty_like(pp)
        for i in range(0, pp.shape[0], 8):
            for j in range(0, pp.shape[1], 8):
                co = dctn(pp[i:i + 8, j:j + 8], norm="ortho") / tab
                co = np.sign(co) * np.floor(np.abs(co) + 0.5)
                rec[i:i + 8, j:j + 8] = idctn(co * tab, norm="ortho")
        out.append(rec[:h, :w])
    if c == 3:
        y, cb, cr = out[0] + 128, out[1], out[2]
        r = y + 1.402 * cr
        b = y + 1.772 * cb
        g = (y - 0.299 * r - 0.114 * b) / 0.587
        rgb = np.stack([r, g, b], axis=-1)
    else:
        rgb = (out[0] + 128)[..., None]
    return np.clip(rgb, 0, 255) / 255


class TestTables:
    def test_quality_50_is_base(self):
        t = quality_to_tables(50)
        assert np.array_equal(t.luma, BASE_LUMA) and np.array_equal(t.chroma, BASE_CHROMA)

    def test_quality_1_saturates(self):
        t = quality_to_tables(1)
        assert (t.luma == 255).all() and (t.chroma == 255).all()

    def test_quality_100_is_ones(self):
        t = quality_to_tables(100)
        assert (t.luma == 1).all() and (t.chroma == 1).all()

    def test_monotone_in_quality(self):
        prev = quality_to_tables(1)
        for q in range(2, 101):
            cur = quality_to_tables(q)
            assert (cur.luma <= prev.luma).all() and (cur.chroma <= prev.chroma).all()
            prev = cur

    def test_entries_in_range(self):
        for q in range(1, 101):
            t = quality_to_tables(q)
            assert t.luma.min() >= 1 and t.luma.max() <= 255 and t.chroma.min() >= 1 and t.chroma.max() <= 255

    def test_matches_libjpeg(self):
        blank = Image.fromarray(np.zeros((8, 8, 3), np.uint8))
        for q in range(1, 101):
            buf = io.BytesIO()
            blank.save(buf, "JPEG", quality=q)
            tabs = Image.open(buf).quantization
            t = quality_to_tables(q)
            assert np.array_equal(np.reshape(tabs[0], (8, 8)), t.luma), q
            assert np.array_equal(np.reshape(tabs[1], (8, 8)), t.chroma), q

    @pytest.mark.parametrize("q", [0, 101, -5, 50.5])
    def test_invalid_quality(self, q):
        with pytest.raises(ParameterError):
            quality_to_tables(q)
        with pytest.raises(ParameterError):
            jpeg_roundtrip(np.zeros((8, 8, 1)), q)


class TestCodec:
    def test_dct_matrix_is_orthonormal_dct2(self):
        assert np.allclose(DCT @ DCT.T, np.eye(8), rtol=0, atol=1e-14)
        blk = np.random.default_rng(0).standard_normal((8, 8))
        assert np.allclose(DCT @ blk @ DCT.T, dctn(blk, norm="ortho"), atol=1e-12)

    @pytest.mark.parametrize("c", [1, 3])
    @pytest.mark.parametrize("q", QUALITIES)
    def test_mid_gray_is_exact(self, q, c):
        x = np.full((13, 21, c), 128 / 255)
        assert np.array_equal(jpeg_roundtrip(x, q), x)

    @pytest.mark.parametrize("shape", [(8, 8, 1), (16, 16, 1), (13, 11, 1), (16, 16, 3), (9, 17, 3)])
    @pytest.mark.parametrize("q", [10, 50, 75, 95])
    def test_matches_reference(self, shape, q):
        img = np.random.default_rng(q).random(shape)
        assert np.allclose(jpeg_roundtrip(img, q), reference_codec(img, q), rtol=0, atol=1e-9)

    def test_quality_100_error_gray(self):
        rng = np.random.default_rng(1)
        worst = max(np.abs(jpeg_roundtrip(img, 100) - img).max() for img in rng.random((50, 16, 16, 1)))
        assert worst <= 2 / 255

    def test_quality_100_error_color_within_rounding_bound(self):
        # unit steps in Y/Cb/Cr: per-plane error <= 0.5 * 8 levels, mixed by the inverse colour matrix
        rng = np.random.default_rng(2)
        worst = max(np.abs(jpeg_roundtrip(img, 100) - img).max() for img in rng.random((50, 16, 16, 3)))
        assert worst <= 4 * (1 + 1.402) / 255

    def test_mse_non_increasing_in_quality(self):
        imgs = np.random.default_rng(3).random((10, 16, 16, 3))
        mse = [reconstruction_mse(imgs, q) for q in (10, 30, 50, 70, 90)]
        assert all(a >= b for a, b in zip(mse, mse[1:]))

    def test_output_range(self):
        imgs = np.random.default_rng(4).choice([0.0, 1.0], (5, 16, 16, 3))
        out = jpeg_roundtrip(imgs, 10)
        assert out.min() >= 0 and out.max() <= 1

    def test_per_image_quality(self):
        imgs = np.random.default_rng(5).random((3, 8, 8, 1))
        out = jpeg_roundtrip(imgs, [10, 50, 90])
        for k, q in enumerate([10, 50, 90]):
            assert np.array_equal(out[k], jpeg_roundtrip(imgs[k], q))

    def test_bad_shapes(self):
        with pytest.raises(DimensionError):
            jpeg_roundtrip(np.zeros((8, 8)), 50)
        with pytest.raises(DimensionError):
            jpeg_roundtrip(np.zeros((8, 8, 2)), 50)


class TestSte:
    def test_forward_matches_codec(self):
        imgs = np.random.default_rng(6).random((4, 12, 12, 3))
        out, _ = jpeg_ste(imgs, 60)
        assert np.array_equal(out, jpeg_roundtrip(imgs, 60))

    @pytest.mark.parametrize("shape", [(16, 16, 1), (13, 10, 3)])
    def test_gradient_of_sum_is_ones(self, shape):
        x = np.random.default_rng(7).random(shape)
        out, vjp = jpeg_ste(x, 75)
        assert np.allclose(vjp(np.ones_like(out)), 1.0, atol=1e-12)

    def test_backward_is_adjoint_of_linear_path(self):
        # with rounding and clamping removed the codec is linear up to its offsets: check <J u, v> = <u, J^T v>
        rng = np.random.default_rng(8)
        _, vjp = jpeg_ste(np.zeros((11, 9, 3)), 75)
        u, v = rng.standard_normal((2, 11, 9, 3))
        from jadnet.sanitize import _blocks, _decode_levels, _encode_levels, _pad, _unblocks

        def linear(z):
            lv = _pad(_encode_levels(z[None]) + np.array([128.0, 0, 0]))
            rec = _unblocks(DCT.T @ (DCT @ _blocks(lv) @ DCT.T) @ DCT)[:, :11, :9]
            return (_decode_levels(rec - np.array([128.0, 0, 0])) / 255)[0]

        assert np.sum(linear(u) * v) == pytest.approx(np.sum(u * vjp(v)), rel=1e-12)

    def test_agrees_with_true_codec_directionally(self):
        # the codec is piecewise constant, so probe it with finite steps along random directions
        yy, xx = np.mgrid[0:16, 0:16] / 15
        img = (0.3 + 0.4 * np.sin(2 * xx + yy) * np.cos(yy))[..., None]
        weight = (np.cos(3 * xx) + yy)[..., None]
        _, vjp = jpeg_ste(img, 75)
        g = vjp(weight)
        rng = np.random.default_rng(9)
        h = 0.05
        pairs = []
        for _ in range(40):
            d = rng.standard_normal(img.shape)
            fd = (np.sum(jpeg_roundtrip(img + h * d, 75) * weight) - np.sum(jpeg_roundtrip(img - h * d, 75) * weight))
            pairs.append((fd / (2 * h), np.sum(g * d)))
        a, b = np.array(pairs).T
        assert a @ b / (np.linalg.norm(a) * np.linalg.norm(b)) > 0.9

    def test_flat_adapter(self):
        imgs = np.random.default_rng(10).random((3, 8, 8, 1))
        san, vjp = FlatJpeg((8, 8, 1), 50)(imgs.reshape(3, -1))
        assert np.array_equal(san, jpeg_roundtrip(imgs, 50).reshape(3, -1))
        assert vjp(np.ones((3, 64))).shape == (3, 64)


class TestCorrupt:
    img = np.random.default_rng(11).random((16, 16, 3))

    @pytest.mark.parametrize("kind", ["uniform_linf", "gaussian_l2", "salt_pepper", "gaussian_blur", "laplacian"])
    def test_zero_magnitude_is_identity(self, kind):
        assert np.array_equal(corrupt(self.img, CorruptionSpec(kind, 0.0, 1)), self.img)

    def test_gaussian_l2_norm_is_exact(self):
        d = gaussian_l2_delta((16, 16, 3), 0.37, np.random.default_rng(0))
        assert abs(np.linalg.norm(d) - 0.37) <= 1e-12

    def test_uniform_linf_budget(self):
        for seed in range(20):
            out = corrupt(self.img, CorruptionSpec("uniform_linf", 8 / 255, seed))
            assert np.abs(out - self.img).max() <= 8 / 255

    def test_salt_pepper_values(self):
        x = np.full((32, 32, 1), 0.5)
        out = corrupt(x, CorruptionSpec("salt_pepper", 0.2, 3))
        changed = out != 0.5
        assert set(np.unique(out[changed])) <= {0.0, 1.0}
        assert 0.1 < changed.mean() < 0.3
        assert (corrupt(x, CorruptionSpec("salt_pepper", 1.0, 3)) != 0.5).all()

    def test_blur_preserves_constants_and_mean(self):
        flat = np.full((10, 10, 1), 0.3)
        assert np.allclose(gaussian_blur(flat, 1.5), 0.3, atol=1e-15)
        out = corrupt(self.img, CorruptionSpec("gaussian_blur", 1.0))
        assert out.std() < self.img.std()

    def test_jpeg_kind(self):
        assert np.array_equal(corrupt(self.img, CorruptionSpec("jpeg", 40)), jpeg_roundtrip(self.img, 40))

    def test_seeded(self):
        a = corrupt(self.img, CorruptionSpec("laplacian", 0.05, 9))
        b = corrupt(self.img, CorruptionSpec("laplacian", 0.05, 9))
        c = corrupt(self.img, CorruptionSpec("laplacian", 0.05, 10))
        assert np.array_equal(a, b) and not np.array_equal(a, c)
        assert a.min() >= 0 and a.max() <= 1

    @pytest.mark.parametrize("kind,mag", [("rotate", 1.0), ("uniform_linf", -0.1), ("salt_pepper", 1.5),
                                          ("jpeg", 0)])
    def test_invalid_specs(self, kind, mag):
        with pytest.raises(ParameterError):
            CorruptionSpec(kind, mag)

    def test_single_image_only(self):
        with pytest.raises(DimensionError):
            corrupt(np.zeros((2, 8, 8, 1)), CorruptionSpec("uniform_linf", 0.1))
