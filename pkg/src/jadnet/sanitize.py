"""Lossy JPEG pixel round trip, its straight-through variant, and image corruptions.

Images are float64 arrays in [0, 1] shaped ``(H, W, C)`` or ``(N, H, W, C)``
with C in {1, 3}. Only the transform is modelled; no bitstream is produced.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, ParameterError

BLOCK = 8

BASE_LUMA = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.int64)

BASE_CHROMA = np.array([
    [17, 18, 24, 47, 99, 99, 99, 99],
    [18, 21, 26, 66, 99, 99, 99, 99],
    [24, 26, 56, 99, 99, 99, 99, 99],
    [47, 66, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
], dtype=np.int64)


def _dct_matrix(n: int = BLOCK) -> np.ndarray:
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    D = np.cos(np.pi * (2 * i + 1) * k / (2 * n)) * np.sqrt(2.0 / n)
    D[0] /= np.sqrt(2.0)
    return D


DCT = _dct_matrix()

# BT.601 full range, built from Kr/Kb so forward and inverse agree to rounding
_KR, _KB = 0.299, 0.114
_KG = 1.0 - _KR - _KB
RGB_TO_YCC = np.array([
    [_KR, _KG, _KB],
    [-_KR / (2 * (1 - _KB)), -_KG / (2 * (1 - _KB)), 0.5],
    [0.5, -_KG / (2 * (1 - _KR)), -_KB / (2 * (1 - _KR))],
])
YCC_TO_RGB = np.array([
    [1.0, 0.0, 2 * (1 - _KR)],
    [1.0, -2 * _KB * (1 - _KB) / _KG, -2 * _KR * (1 - _KR) / _KG],
    [1.0, 2 * (1 - _KB), 0.0],
])


@dataclass(frozen=True)
class QuantTables:
    luma: np.ndarray
    chroma: np.ndarray


def _check_quality(q) -> np.ndarray:
    qa = np.asarray(q)
    if qa.dtype.kind not in "iu" and not np.all(np.equal(np.mod(qa, 1), 0)):
        raise ParameterError(f"quality must be an integer, got {q}")
    qa = qa.astype(np.int64)
    if np.any(qa < 1) or np.any(qa > 100):
        raise ParameterError(f"quality must be in [1, 100], got {q}")
    return qa


def _scale_table(base: np.ndarray, q: np.ndarray) -> np.ndarray:
    scale = np.where(q < 50, 5000 // np.maximum(q, 1), 200 - 2 * q)
    scaled = (base * scale[..., None, None] + 50) // 100
    return np.clip(scaled, 1, 255)


def quality_to_tables(q: int) -> QuantTables:
    qa = _check_quality(q)
    if qa.ndim:
        raise ParameterError("quality_to_tables takes a single quality")
    return QuantTables(_scale_table(BASE_LUMA, qa), _scale_table(BASE_CHROMA, qa))


def _as_batch(x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim not in (3, 4):
        raise DimensionError(f"expected (H, W, C) or (N, H, W, C), got {x.shape}")
    if x.shape[-1] not in (1, 3):
        raise DimensionError(f"expected 1 or 3 channels, got {x.shape[-1]}")
    return (x[None], True) if x.ndim == 3 else (x, False)


def _pad(a: np.ndarray) -> np.ndarray:
    h, w = a.shape[1:3]
    ph, pw = -h % BLOCK, -w % BLOCK
    if ph or pw:
        a = np.pad(a, ((0, 0), (0, ph), (0, pw), (0, 0)), mode="edge")
    return a


def _pad_adjoint(g: np.ndarray, h: int, w: int) -> np.ndarray:
    out = g[:, :h, :w].copy()
    out[:, :, w - 1] += g[:, :h, w:].sum(axis=2)
    out[:, h - 1, :] += g[:, h:, :w].sum(axis=1)
    out[:, h - 1, w - 1] += g[:, h:, w:].sum(axis=(1, 2))
    return out


def _blocks(a: np.ndarray) -> np.ndarray:
    n, H, W, C = a.shape
    return a.reshape(n, H // BLOCK, BLOCK, W // BLOCK, BLOCK, C).transpose(0, 1, 3, 5, 2, 4)


def _unblocks(b: np.ndarray) -> np.ndarray:
    n, hb, wb, C = b.shape[:4]
    return b.transpose(0, 1, 4, 2, 5, 3).reshape(n, hb * BLOCK, wb * BLOCK, C)


def _dct2(b):
    return DCT @ b @ DCT.T


def _idct2(b):
    return DCT.T @ b @ DCT


def _round_half_away(v: np.ndarray) -> np.ndarray:
    return np.copysign(np.floor(np.abs(v) + 0.5), v)


def _tables_for(q: np.ndarray, n: int, channels: int) -> np.ndarray:
    """Quant tables shaped (n, 1, 1, C, 8, 8) for broadcasting against blocks."""
    q = np.broadcast_to(q, (n,))
    luma = _scale_table(BASE_LUMA, q).astype(np.float64)
    if channels == 1:
        tabs = luma[:, None]
    else:
        chroma = _scale_table(BASE_CHROMA, q).astype(np.float64)
        tabs = np.stack([luma, chroma, chroma], axis=1)
    return tabs[:, None, None]


def _encode_levels(xb: np.ndarray) -> np.ndarray:
    """[0,1] pixels -> level-shifted (Y, Cb, Cr) or gray samples."""
    pix = xb * 255.0
    if xb.shape[-1] == 3:
        ycc = pix @ RGB_TO_YCC.T
        ycc[..., 0] -= 128.0
        return ycc
    return pix - 128.0


def _decode_levels(lv: np.ndarray) -> np.ndarray:
    """Inverse of :func:`_encode_levels` up to clamping; returns [0,255] samples."""
    if lv.shape[-1] == 3:
        y = lv.copy()
        y[..., 0] += 128.0
        return y @ YCC_TO_RGB.T
    return lv + 128.0


def jpeg_roundtrip(x, q) -> np.ndarray:
    """Encode and decode through the lossy JPEG transform at quality ``q``.

    ``q`` may be a single quality or one per image of a batch.
    """
    xb, single = _as_batch(x)
    qa = _check_quality(q)
    n, h, w, c = xb.shape
    lv = _pad(_encode_levels(xb))
    coef = _dct2(_blocks(lv))
    Q = _tables_for(qa, n, c)
    coef = _round_half_away(coef / Q) * Q
    rec = _unblocks(_idct2(coef))[:, :h, :w]
    out = np.clip(_decode_levels(rec), 0.0, 255.0) / 255.0
    return out[0] if single else out


def jpeg_ste_vjp(g: np.ndarray) -> np.ndarray:
    """Backward pass of the codec with rounding and clamping taken as identity."""
    gb, single = _as_batch(g)
    n, h, w, c = gb.shape
    gl = gb / 255.0
    if c == 3:
        gl = gl @ YCC_TO_RGB
    gl = np.pad(gl, ((0, 0), (0, -h % BLOCK), (0, -w % BLOCK), (0, 0)))
    # adjoint of the inverse DCT is the forward DCT and vice versa
    gl = _unblocks(_idct2(_dct2(_blocks(gl))))
    gl = _pad_adjoint(gl, h, w)
    if c == 3:
        gl = gl @ RGB_TO_YCC
    gl = gl * 255.0
    return gl[0] if single else gl


def jpeg_ste(x, q):
    """Codec forward pass plus a straight-through backward map."""
    return jpeg_roundtrip(x, q), jpeg_ste_vjp


class FlatJpeg:
    """Adapts the STE codec to flat network inputs: ``s(x) -> (x_san, vjp)``."""

    def __init__(self, image_shape, q):
        self.image_shape = tuple(image_shape)
        self.q = q

    def __call__(self, x_flat):
        n = x_flat.shape[0]
        imgs = x_flat.reshape((n,) + self.image_shape)
        san = jpeg_roundtrip(imgs, self.q).reshape(n, -1)

        def vjp(g):
            return jpeg_ste_vjp(g.reshape((n,) + self.image_shape)).reshape(n, -1)

        return san, vjp


def reconstruction_mse(x, q) -> float:
    x = np.asarray(x, dtype=np.float64)
    return float(np.mean((jpeg_roundtrip(x, q) - x) ** 2))


# ---------------------------------------------------------------------------
# corruptions

CORRUPTIONS = ("uniform_linf", "gaussian_l2", "salt_pepper", "gaussian_blur", "jpeg", "laplacian")


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str
    magnitude: float
    seed: int = 0

    def __post_init__(self):
        if self.kind not in CORRUPTIONS:
            raise ParameterError(f"unknown corruption {self.kind!r}")
        if not np.isfinite(self.magnitude) or self.magnitude < 0:
            raise ParameterError(f"magnitude must be finite and >= 0, got {self.magnitude}")
        if self.kind == "salt_pepper" and self.magnitude > 1:
            raise ParameterError("salt-and-pepper probability must be in [0, 1]")
        if self.kind == "jpeg":
            _check_quality(self.magnitude)


def gaussian_l2_delta(shape, rho: float, rng: np.random.Generator) -> np.ndarray:
    """Gaussian direction rescaled to an exact l2 norm of ``rho``."""
    d = rng.standard_normal(shape)
    norm = np.linalg.norm(d)
    return d * (rho / norm) if norm > 0 else d * 0.0


def _blur_kernel(sigma: float) -> np.ndarray:
    if sigma == 0:
        return np.ones(1)
    r = max(1, int(np.ceil(3 * sigma)))
    t = np.arange(-r, r + 1)
    k = np.exp(-0.5 * (t / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    k = _blur_kernel(sigma)
    r = len(k) // 2
    if r == 0:
        return img.copy()
    out = img
    for axis in (0, 1):
        pad = [(0, 0)] * img.ndim
        pad[axis] = (r, r)
        p = np.pad(out, pad, mode="edge")
        n = img.shape[axis]
        acc = np.zeros_like(img)
        for j, kj in enumerate(k):
            acc += kj * np.take(p, np.arange(j, j + n), axis=axis)
        out = acc
    return out


def corrupt(x, spec: CorruptionSpec) -> np.ndarray:
    """Apply one non-adversarial corruption to a single (H, W, C) image."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise DimensionError(f"corrupt takes one (H, W, C) image, got {x.shape}")
    rng = np.random.default_rng(spec.seed)
    m = spec.magnitude
    if spec.kind == "uniform_linf":
        out = x + rng.uniform(-m, m, x.shape) if m > 0 else x.copy()
    elif spec.kind == "gaussian_l2":
        out = x + gaussian_l2_delta(x.shape, m, rng)
    elif spec.kind == "laplacian":
        out = x + rng.laplace(0.0, m, x.shape) if m > 0 else x.copy()
    elif spec.kind == "salt_pepper":
        u = rng.random(x.shape[:2])
        out = x.copy()
        out[u < m / 2] = 0.0
        out[(u >= m / 2) & (u < m)] = 1.0
    elif spec.kind == "gaussian_blur":
        out = gaussian_blur(x, m)
    else:
        out = jpeg_roundtrip(x, int(m))
    return np.clip(out, 0.0, 1.0)
