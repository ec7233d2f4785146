"""Image/depth perturbations with invertible geometric bookkeeping.

Coordinates are ``(row, col)`` with pixel centres on integers. Every geometric
op is stored as a 3x3 homogeneous matrix mapping augmented-frame coordinates to
the coordinates in the frame it was sampled from, so a chain ``A1, A2, ...``
composes to ``A1 @ A2 @ ...``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from scipy import ndimage

from .dataset import DepthSample
from .exceptions import ArgumentError, ConfigurationError

S_FM = (
    "AutoContrast", "Brightness", "Color", "Contrast", "Equalize", "Identity", "Posterize",
    "Rotate", "Sharpness", "ShearX", "ShearY", "Solarize", "TranslateX", "TranslateY",
)
S_GEO = (
    "AutoContrast", "Brightness", "Color", "Contrast", "Equalize", "Identity", "Posterize",
    "Sharpness", "Solarize",
)
AUGMENT_SETS = {"s_fm": S_FM, "s_geo": S_GEO}
GEOMETRIC_OPS = frozenset({"Rotate", "ShearX", "ShearY", "TranslateX", "TranslateY"})

MAX_LEVEL = 10
MAX_ROTATE_DEG = 30.0
MAX_SHEAR = 0.3
MAX_TRANSLATE_FRAC = 0.3
MAX_ENHANCE = 0.9          # enhance factors span 1 +- 0.9
MIN_POSTERIZE_BITS = 4
CUTOUT_AREA = 0.10
CUTOUT_FILL = 0.5

_MASK_TOL = 1e-6


# --- geometry ---------------------------------------------------------------

@dataclass
class GeometricRecord:
    matrix: np.ndarray  # (2, 3) augmented (r, c, 1) -> original (r, c)
    mask: np.ndarray    # (H, W) bool, False where the view sampled outside the original

    @classmethod
    def identity(cls, height, width):
        return cls(np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]), np.ones((height, width), bool))

    @property
    def is_identity(self):
        return bool(np.array_equal(self.matrix, [[1, 0, 0], [0, 1, 0]]) and self.mask.all())

    def homogeneous(self):
        return np.vstack([self.matrix, [0.0, 0.0, 1.0]])


def _homogeneous(linear, offset):
    m = np.eye(3)
    m[:2, :2] = linear
    m[:2, 2] = offset
    return m


def _about_centre(linear, height, width):
    centre = np.array([(height - 1) / 2.0, (width - 1) / 2.0])
    linear = np.asarray(linear, dtype=np.float64)
    return _homogeneous(linear, centre - linear @ centre)


def rotation_matrix(degrees, height, width):
    t = math.radians(degrees)
    # rows grow downwards, so this turns image content counter-clockwise for degrees > 0
    return _about_centre([[math.cos(t), math.sin(t)], [-math.sin(t), math.cos(t)]], height, width)


def shear_matrix(axis, amount, height, width):
    if axis == "x":
        return _about_centre([[1.0, 0.0], [amount, 1.0]], height, width)
    return _about_centre([[1.0, amount], [0.0, 1.0]], height, width)


def translation_matrix(d_row, d_col):
    """Content moves by ``(d_row, d_col)`` pixels."""
    return _homogeneous(np.eye(2), [-d_row, -d_col])


def invert_affine(matrix):
    m = np.asarray(matrix, dtype=np.float64)[:2]
    linear, offset = m[:, :2], m[:, 2]
    det = np.linalg.det(linear)
    if abs(det) < 1e-8:
        raise RuntimeError(f"geometric record is not invertible (det={det:g})")
    inv = np.linalg.inv(linear)
    return np.hstack([inv, (-inv @ offset)[:, None]])


def _grid(height, width, matrix):
    rr, cc = np.meshgrid(np.arange(height, dtype=np.float64), np.arange(width, dtype=np.float64), indexing="ij")
    m = np.asarray(matrix, dtype=np.float64)
    rows = m[0, 0] * rr + m[0, 1] * cc + m[0, 2]
    cols = m[1, 0] * rr + m[1, 1] * cc + m[1, 2]
    return rows, cols


def _inbounds(rows, cols, height, width):
    eps = 1e-9
    return (rows >= -eps) & (rows <= height - 1 + eps) & (cols >= -eps) & (cols <= width - 1 + eps)


def bilinear_sample(values, rows, cols, fill=0.0):
    """Sample ``values[..., H, W]`` at float ``rows``/``cols`` of shape ``(H', W')``.

    Works on torch tensors (differentiable) and numpy arrays. Points outside the
    grid get ``fill``. Integer coordinates reproduce the input exactly.
    """
    as_numpy = not torch.is_tensor(values)
    v = torch.from_numpy(np.ascontiguousarray(values)) if as_numpy else values
    h, w = v.shape[-2:]
    r = torch.as_tensor(rows, dtype=torch.float64)
    c = torch.as_tensor(cols, dtype=torch.float64)
    inside = torch.as_tensor(_inbounds(np.asarray(r), np.asarray(c), h, w))
    r0f, c0f = torch.floor(r), torch.floor(c)
    fr = (r - r0f).to(v.dtype)
    fc = (c - c0f).to(v.dtype)
    r0 = r0f.long().clamp(0, h - 1)
    c0 = c0f.long().clamp(0, w - 1)
    r1 = (r0 + 1).clamp(max=h - 1)
    c1 = (c0 + 1).clamp(max=w - 1)
    top = v[..., r0, c0] * (1 - fc) + v[..., r0, c1] * fc
    bottom = v[..., r1, c0] * (1 - fc) + v[..., r1, c1] * fc
    out = top * (1 - fr) + bottom * fr
    out = torch.where(inside, out, torch.as_tensor(fill, dtype=v.dtype))
    if as_numpy:
        return out.numpy(), inside.numpy()
    return out, inside


def warp(values, matrix, fill=0.0):
    """Resample ``values[..., H, W]`` so output pixel p takes ``values`` at ``matrix @ p``."""
    h, w = np.shape(values)[-2:]
    rows, cols = _grid(h, w, matrix)
    return bilinear_sample(values, rows, cols, fill)


def _warp_mask(mask, matrix):
    sampled, inside = warp(np.asarray(mask, dtype=np.float64), matrix)
    return inside & (sampled >= 1.0 - _MASK_TOL)


def realign_prediction(pred, rec: GeometricRecord):
    """Bring a prediction made on an augmented view back to the original frame.

    ``pred`` is ``(..., H, W)`` (numpy or torch; torch stays differentiable).
    Returns ``(aligned, valid)`` where ``valid`` combines the record's mask with
    the in-bounds mask of the inverse warp.
    """
    h, w = np.shape(pred)[-2:]
    if rec.mask.shape != (h, w):
        raise ArgumentError(f"prediction {h}x{w} does not match record {rec.mask.shape}")
    if rec.is_identity:
        valid = np.ones((h, w), bool)
        return pred, (torch.from_numpy(valid) if torch.is_tensor(pred) else valid)
    inverse = invert_affine(rec.matrix)
    aligned, inside = warp(pred, inverse)
    valid = np.asarray(inside) & _warp_mask(rec.mask, inverse)
    return aligned, (torch.from_numpy(valid) if torch.is_tensor(pred) else valid)


# --- photometric helpers ----------------------------------------------------

def _gray(img):
    return img @ np.array([0.299, 0.587, 0.114], dtype=img.dtype)


def _blend(img, degenerate, factor):
    return np.clip(img * factor + degenerate * (1.0 - factor), 0.0, 1.0).astype(img.dtype)


def adjust_brightness(img, factor):
    return _blend(img, np.zeros_like(img), factor)


def adjust_color(img, factor):
    return _blend(img, _gray(img)[..., None], factor)


def adjust_contrast(img, factor):
    return _blend(img, np.full_like(img, _gray(img).mean()), factor)


def adjust_sharpness(img, factor):
    kernel = np.array([[1, 1, 1], [1, 5, 1], [1, 1, 1]], dtype=np.float64) / 13.0
    smooth = img.astype(np.float64).copy()
    for ch in range(3):
        smooth[..., ch] = ndimage.convolve(img[..., ch].astype(np.float64), kernel, mode="nearest")
    # border pixels keep their value
    smooth[0], smooth[-1], smooth[:, 0], smooth[:, -1] = img[0], img[-1], img[:, 0], img[:, -1]
    return _blend(img, smooth.astype(img.dtype), factor)


def autocontrast(img):
    lo = img.min(axis=(0, 1), keepdims=True)
    hi = img.max(axis=(0, 1), keepdims=True)
    span = hi - lo
    out = np.where(span > 0, (img - lo) / np.where(span > 0, span, 1), img)
    return np.clip(out, 0, 1).astype(img.dtype)


def equalize(img):
    q = np.round(np.clip(img, 0, 1) * 255).astype(np.int64)
    out = np.empty_like(img)
    for ch in range(3):
        hist = np.bincount(q[..., ch].ravel(), minlength=256)
        cdf = np.cumsum(hist)
        nonzero = cdf[hist > 0]
        cdf_min = nonzero[0] if nonzero.size else 0
        denom = cdf[-1] - cdf_min
        if denom == 0:
            out[..., ch] = img[..., ch]
            continue
        lut = np.round((cdf - cdf_min) / denom * 255.0).clip(0, 255)
        out[..., ch] = lut[q[..., ch]] / 255.0
    return out


def posterize(img, bits):
    shift = 8 - int(bits)
    q = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)
    return ((q >> shift) << shift).astype(img.dtype) / img.dtype.type(255)


def solarize(img, threshold):
    return np.where(img >= threshold, 1.0 - img, img).astype(img.dtype)


# --- RandAugment ------------------------------------------------------------

@dataclass(frozen=True)
class AugmentOp:
    """One op with its concrete, op-specific magnitude.

    Units: degrees (Rotate), shear factor (ShearX/Y), pixels (TranslateX/Y),
    bits (Posterize), threshold in [0, 1] (Solarize), enhance factor
    (Brightness/Color/Contrast/Sharpness); unused otherwise.
    """

    name: str
    magnitude: float = 0.0

    @property
    def is_geometric(self):
        return self.name in GEOMETRIC_OPS


@dataclass(frozen=True)
class RandAugmentPolicy:
    set: str = "s_fm"
    n: int = 1
    m: float = 7
    apply_static_cutout: bool = True

    def ops(self):
        if self.set not in AUGMENT_SETS:
            raise ConfigurationError(f"unknown augmentation set {self.set!r}")
        return AUGMENT_SETS[self.set]

    def validate(self):
        self.ops()
        if self.n < 0 or self.m < 0:
            raise ConfigurationError("RandAugment n and m must be >= 0")
        return self


def op_magnitude(name, level, height, width, rng):
    """Concrete magnitude for ``name`` at severity ``level`` (0..10); signs drawn from ``rng``."""
    frac = min(float(level), MAX_LEVEL) / MAX_LEVEL
    sign = 1.0 if rng.random() < 0.5 else -1.0
    if name == "Rotate":
        return sign * MAX_ROTATE_DEG * frac
    if name in ("ShearX", "ShearY"):
        return sign * MAX_SHEAR * frac
    if name == "TranslateX":
        return sign * float(round(MAX_TRANSLATE_FRAC * frac * width))
    if name == "TranslateY":
        return sign * float(round(MAX_TRANSLATE_FRAC * frac * height))
    if name in ("Brightness", "Color", "Contrast", "Sharpness"):
        return 1.0 + sign * MAX_ENHANCE * frac
    if name == "Posterize":
        return float(8 - round((8 - MIN_POSTERIZE_BITS) * frac))
    if name == "Solarize":
        return 1.0 - frac
    if name in ("AutoContrast", "Equalize", "Identity"):
        return 0.0
    raise ConfigurationError(f"unknown augmentation op {name!r}")


def _check_range(op, height, width):
    name, v = op.name, op.magnitude
    limits = {
        "Rotate": MAX_ROTATE_DEG,
        "ShearX": MAX_SHEAR,
        "ShearY": MAX_SHEAR,
        "TranslateX": MAX_TRANSLATE_FRAC * width + 0.5,
        "TranslateY": MAX_TRANSLATE_FRAC * height + 0.5,
        "Brightness": MAX_ENHANCE,
        "Color": MAX_ENHANCE,
        "Contrast": MAX_ENHANCE,
        "Sharpness": MAX_ENHANCE,
    }
    if name in ("Brightness", "Color", "Contrast", "Sharpness"):
        v = v - 1.0
    if name in limits and abs(v) > limits[name] + 1e-9:
        raise ConfigurationError(f"{name} magnitude {op.magnitude} out of range")
    if name == "Posterize" and not MIN_POSTERIZE_BITS <= v <= 8:
        raise ConfigurationError(f"Posterize bits {v} out of range")
    if name == "Solarize" and not 0 <= v <= 1:
        raise ConfigurationError(f"Solarize threshold {v} out of range")


def op_matrix(op, height, width):
    if op.name == "Rotate":
        return rotation_matrix(op.magnitude, height, width)
    if op.name == "ShearX":
        return shear_matrix("x", op.magnitude, height, width)
    if op.name == "ShearY":
        return shear_matrix("y", op.magnitude, height, width)
    if op.name == "TranslateX":
        return translation_matrix(0.0, op.magnitude)
    return translation_matrix(op.magnitude, 0.0)


def apply_photometric(img, op):
    name, v = op.name, op.magnitude
    if name == "Identity":
        return img
    if name == "AutoContrast":
        return autocontrast(img)
    if name == "Equalize":
        return equalize(img)
    if name == "Brightness":
        return adjust_brightness(img, v)
    if name == "Color":
        return adjust_color(img, v)
    if name == "Contrast":
        return adjust_contrast(img, v)
    if name == "Sharpness":
        return adjust_sharpness(img, v)
    if name == "Posterize":
        return posterize(img, v)
    if name == "Solarize":
        return solarize(img, v)
    raise ConfigurationError(f"unknown augmentation op {name!r}")


def apply_chain(image, ops):
    """Apply ``ops`` in order; returns ``(image, GeometricRecord)``."""
    img = np.asarray(image)
    h, w = img.shape[:2]
    composed = np.eye(3)
    mask = np.ones((h, w), bool)
    for op in ops:
        _check_range(op, h, w)
        if not op.is_geometric:
            img = apply_photometric(img, op)
            continue
        m = op_matrix(op, h, w)
        warped, _ = warp(np.moveaxis(img, -1, 0), m)
        img = np.clip(np.moveaxis(warped, 0, -1), 0.0, 1.0).astype(image.dtype)
        mask = _warp_mask(mask, m)
        composed = composed @ m
    return img, GeometricRecord(composed[:2].copy(), mask)


def sample_chain(policy: RandAugmentPolicy, height, width, rng):
    names = policy.validate().ops()
    ops = []
    for _ in range(policy.n):
        name = names[int(rng.integers(len(names)))]
        ops.append(AugmentOp(name, op_magnitude(name, policy.m, height, width, rng)))
    return ops


def cutout_box(height, width, rng, area=CUTOUT_AREA):
    bh = max(1, int(round(math.sqrt(area) * height)))
    bw = max(1, int(round(math.sqrt(area) * width)))
    r0 = int(rng.integers(0, height - bh + 1))
    c0 = int(rng.integers(0, width - bw + 1))
    return r0, r0 + bh, c0, c0 + bw


def rand_augment(x, policy: RandAugmentPolicy, rng):
    """Static CutOut (optional) followed by ``policy.n`` random ops at severity ``policy.m``."""
    img = np.array(x, dtype=np.float32, copy=True)
    h, w = img.shape[:2]
    policy.validate()
    if policy.apply_static_cutout:
        r0, r1, c0, c1 = cutout_box(h, w, rng)
        img[r0:r1, c0:c1] = CUTOUT_FILL
    return apply_chain(img, sample_chain(policy, h, w, rng))


# --- pretraining augmentations ----------------------------------------------

def cutmix_box(height, width, alpha, rng):
    """Rectangle ``(r0, r1, c0, c1)`` of area fraction ``alpha``.

    The width/height aspect is uniform on [0.5, 2] restricted to the range
    where the box fits inside the image.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ArgumentError(f"alpha must be in [0, 1], got {alpha}")
    if alpha == 0.0:
        return 0, 0, 0, 0
    if alpha == 1.0:
        return 0, height, 0, width
    area = alpha * height * width
    # w/h = aspect; need h <= H and w <= W
    lo = max(0.5, area / height ** 2)
    hi = min(2.0, width ** 2 / area)
    aspect = rng.uniform(lo, hi) if lo <= hi else width / height
    bh = min(height, max(1, int(round(math.sqrt(area / aspect)))))
    bw = min(width, max(1, int(round(area / bh))))
    r0 = int(rng.integers(0, height - bh + 1))
    c0 = int(rng.integers(0, width - bw + 1))
    return r0, r0 + bh, c0, c0 + bw


def cutmix(a: DepthSample, b: DepthSample, alpha, rng, return_box=False):
    """Paste a rectangle of ``b`` into ``a``, image and depth alike."""
    if a.image.shape != b.image.shape:
        raise ArgumentError(f"resolution mismatch {a.image.shape} vs {b.image.shape}")
    if a.domain != b.domain:
        raise ArgumentError("cutmix requires samples from the same domain")
    if not (a.labelled and b.labelled):
        raise ArgumentError("cutmix requires labelled samples")
    h, w = a.depth.shape
    r0, r1, c0, c1 = cutmix_box(h, w, alpha, rng)
    image, depth = a.image.copy(), a.depth.copy()
    image[r0:r1, c0:c1] = b.image[r0:r1, c0:c1]
    depth[r0:r1, c0:c1] = b.depth[r0:r1, c0:c1]
    out = DepthSample(image, depth, a.domain, f"{a.id}+{b.id}")
    return (out, (r0, r1, c0, c1)) if return_box else out


def color_jitter(img, brightness=1.0, contrast=1.0, saturation=1.0):
    return adjust_color(adjust_contrast(adjust_brightness(img, brightness), contrast), saturation)


def rotate_sample(s: DepthSample, degrees):
    """Rotate image (bilinear) and depth (nearest) about the centre; rotated-in depth is 0."""
    h, w = s.depth.shape
    m = rotation_matrix(degrees, h, w)
    rows, cols = _grid(h, w, m)
    image, inside = bilinear_sample(np.moveaxis(s.image, -1, 0), rows, cols)
    depth, _ = bilinear_sample(s.depth, np.round(rows), np.round(cols))
    depth = np.where(inside, depth, 0.0).astype(s.depth.dtype)
    image = np.clip(np.moveaxis(image, 0, -1), 0, 1).astype(s.image.dtype)
    return DepthSample(image, depth, s.domain, s.id)


def pretrain_augment(s: DepthSample, rng, jitter=(0.8, 1.2), max_rotation=5.0):
    """Colour jitter on the image, then a joint small rotation of image and depth."""
    if not s.labelled:
        raise ArgumentError(f"sample {s.id} has no depth labels")
    b, c, sat = rng.uniform(jitter[0], jitter[1], size=3)
    angle = rng.uniform(-max_rotation, max_rotation)
    jittered = DepthSample(color_jitter(s.image, b, c, sat), s.depth, s.domain, s.id)
    if angle == 0.0:
        return jittered
    return rotate_sample(jittered, angle)
