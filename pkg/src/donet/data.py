"""Samples, image/mask files, the synthetic lesion generator and augmentation."""

import math
import os
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import pnm
from .errors import DataError, ShapeError
from .layers import avgpool2x2
from .tensor import DEFAULT_DTYPE, Tensor, make_rng

SPLITS = ("train", "val", "test")
MASK_SUFFIX = "_mask"


class GenerationError(DataError):
    pass


@dataclass
class Sample:
    """One image (1, C, H, W) in [0, 1] with its binary mask (1, 1, H, W)."""

    image: Tensor
    mask: Tensor
    id: str

    def __post_init__(self):
        if self.image.shape[0] != 1 or self.mask.shape[:2] != (1, 1):
            raise ShapeError(f"sample {self.id}: expected (1,C,H,W) image and (1,1,H,W) mask")
        if self.image.shape[2:] != self.mask.shape[2:]:
            raise ShapeError(f"sample {self.id}: image {self.image.shape} and "
                             f"mask {self.mask.shape} differ spatially")
        if not np.all((self.mask.data == 0) | (self.mask.data == 1)):
            raise DataError(f"sample {self.id}: mask is not binary")

    @property
    def size(self):
        return self.image.shape[2:]

    def area_fraction(self):
        return float(self.mask.data.mean())


def stack(samples, dtype=DEFAULT_DTYPE):
    """Batch samples into (N, C, H, W) image and (N, 1, H, W) mask tensors."""
    images = np.concatenate([s.image.data for s in samples]).astype(dtype, copy=False)
    masks = np.concatenate([s.mask.data for s in samples]).astype(dtype, copy=False)
    return Tensor(images), Tensor(masks)


# --- files -----------------------------------------------------------------

def load_image(path, dtype=DEFAULT_DTYPE):
    """Read a P5/P6 file as a (1, C, H, W) tensor with values v/255."""
    raw = pnm.read(path)
    arr = raw[None] if raw.ndim == 2 else raw.transpose(2, 0, 1)
    return Tensor((arr.astype(np.float64) / 255.0).astype(dtype)[None])


def load_mask(path, dtype=DEFAULT_DTYPE):
    raw = pnm.read(path)
    if raw.ndim != 2:
        raise DataError(f"{path}: masks must be single-channel PGM")
    if not np.all((raw == 0) | (raw == 255)):
        raise DataError(f"{path}: mask values must be 0 or 255")
    return Tensor((raw == 255).astype(dtype)[None, None])


def _to_bytes(values):
    return np.clip(np.rint(np.asarray(values, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def save_image(image, path):
    arr = image.data if isinstance(image, Tensor) else np.asarray(image)
    arr = arr.reshape(arr.shape[-3:])
    if arr.shape[0] == 1:
        pnm.write(_to_bytes(arr[0]), path)
    elif arr.shape[0] == 3:
        pnm.write(_to_bytes(arr.transpose(1, 2, 0)), path)
    else:
        raise ShapeError(f"cannot save an image with {arr.shape[0]} channels")


def save_mask(mask, path):
    """Write a binary mask as P5 with values {0, 255}."""
    arr = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
    arr = arr.reshape(arr.shape[-2:])
    if not np.all((arr == 0) | (arr == 1)):
        raise DataError("mask must be binary to save")
    pnm.write(np.where(arr == 1, 255, 0).astype(np.uint8), path)


def save_split(samples, root, split):
    folder = os.path.join(root, split)
    os.makedirs(folder, exist_ok=True)
    for s in samples:
        save_image(s.image, os.path.join(folder, f"{s.id}.ppm"))
        save_mask(s.mask, os.path.join(folder, f"{s.id}{MASK_SUFFIX}.pgm"))


def load_split(root, split, dtype=DEFAULT_DTYPE):
    """Load ``<root>/<split>/<id>.ppm`` plus ``<id>_mask.pgm`` pairs sorted by id."""
    folder = os.path.join(root, split)
    if not os.path.isdir(folder):
        raise DataError(f"missing dataset split directory {folder}")
    samples = []
    for name in sorted(os.listdir(folder)):
        stem, ext = os.path.splitext(name)
        if ext not in (".ppm", ".pgm") or stem.endswith(MASK_SUFFIX):
            continue
        mask_path = os.path.join(folder, f"{stem}{MASK_SUFFIX}.pgm")
        if not os.path.exists(mask_path):
            raise DataError(f"image {name} in {folder} has no mask file")
        samples.append(Sample(load_image(os.path.join(folder, name), dtype),
                              load_mask(mask_path, dtype), stem))
    if not samples:
        raise DataError(f"no samples found in {folder}")
    return samples


# --- synthetic lesions -----------------------------------------------------

@dataclass
class SyntheticSpec:
    count: int
    size: tuple = (64, 64)
    area_fraction_range: tuple = (0.003, 0.987)
    blob_irregularity: float = 0.3
    noise_std: float = 0.03
    seed: int = 0
    min_contrast: float = 0.25
    channels: int = 3
    vertices: int = 12

    def validate(self):
        lo, hi = self.area_fraction_range
        if not 0 < lo <= hi < 1:
            raise GenerationError(f"area fraction range must satisfy 0 < min <= max < 1, "
                                  f"got {self.area_fraction_range}")
        h, w = self.size
        if h < 1 or w < 1 or self.count < 0:
            raise GenerationError(f"invalid size {self.size} or count {self.count}")
        if math.ceil(lo * h * w) > math.floor(hi * h * w):
            raise GenerationError(f"no whole-pixel lesion area fits {self.area_fraction_range} "
                                  f"on a {h}x{w} image")
        if not 0 <= self.blob_irregularity < 1:
            raise GenerationError("blob_irregularity must lie in [0, 1)")
        if self.noise_std < 0 or not 0 < self.min_contrast < 1:
            raise GenerationError("noise_std must be >= 0 and min_contrast in (0, 1)")
        if self.channels not in (1, 3) or self.vertices < 3:
            raise GenerationError("channels must be 1 or 3 and vertices >= 3")
        return self


def _smooth_field(rng, h, w, cells=4):
    """Zero-mean low-frequency field in roughly [-1, 1]."""
    coarse = rng.standard_normal((cells + 1, cells + 1))
    rows = np.linspace(0, cells, h)
    cols = np.linspace(0, cells, w)
    grid = np.meshgrid(rows, cols, indexing="ij")
    field = ndimage.map_coordinates(coarse, grid, order=3, mode="nearest")
    return field / max(1.0, float(np.abs(field).max()))


def _radial_profile(rng, vertices, irregularity):
    """Periodic radius multiplier r(theta) from jittered polygon vertices."""
    radii = 1.0 + irregularity * rng.uniform(-1.0, 1.0, vertices)
    offset = rng.uniform(0, 2 * np.pi)
    knots = offset + 2 * np.pi * np.arange(vertices + 1) / vertices
    radii = np.append(radii, radii[0])

    def profile(theta):
        t = np.mod(theta - offset, 2 * np.pi) + offset
        return np.interp(t, knots, radii)

    return profile


def _fit_area(ratio, lo_px, hi_px, target_px):
    """Pick the scale whose pixel count is nearest ``target_px`` within bounds.

    ``ratio`` is each pixel's distance to the centre divided by the blob's
    radius multiplier along that direction, so the blob at scale s is
    ``ratio <= s`` and its area is monotone in s.
    """
    order = np.sort(ratio.ravel())
    # The k smallest ratios are covered exactly when s lies in [order[k-1], order[k]).
    n = order.size
    k = int(np.clip(target_px, lo_px, hi_px))
    # Ties can make an exact count unreachable; walk to the nearest reachable one.
    candidates = []
    for kk in range(k, hi_px + 1):
        if kk == n or order[kk] > order[kk - 1]:
            candidates.append(kk)
            break
    for kk in range(k, lo_px - 1, -1):
        if kk >= 1 and (kk == n or order[kk] > order[kk - 1]):
            candidates.append(kk)
            break
    if not candidates:
        raise GenerationError("could not place a lesion with the requested area")
    best = min(candidates, key=lambda kk: abs(kk - target_px))
    return float(order[best - 1])


def synthetic_sample(spec, index):
    """Generate sample ``index`` of ``spec``; a pure function of (spec, index)."""
    rng = make_rng(spec.seed, index)
    h, w = spec.size
    total = h * w
    lo, hi = spec.area_fraction_range
    lo_px = math.ceil(lo * total)
    hi_px = math.floor(hi * total)
    fraction = math.exp(rng.uniform(math.log(lo), math.log(hi)))
    target_px = fraction * total

    cy = rng.uniform(0.35, 0.65) * (h - 1)
    cx = rng.uniform(0.35, 0.65) * (w - 1)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    profile = _radial_profile(rng, spec.vertices, spec.blob_irregularity)
    ratio = np.hypot(dy, dx) / profile(np.arctan2(dy, dx))
    scale = _fit_area(ratio, lo_px, hi_px, round(target_px))
    mask = (ratio <= scale).astype(np.float64)

    base = rng.uniform(0.6, 0.85, spec.channels)
    tint = rng.uniform(0.9, 1.1, spec.channels)
    background = base[:, None, None] + 0.06 * _smooth_field(rng, h, w)[None]
    contrast = rng.uniform(spec.min_contrast + 0.05, spec.min_contrast + 0.3)
    lesion = (base * tint - contrast)[:, None, None] + 0.04 * _smooth_field(rng, h, w, 6)[None]
    soft = ndimage.gaussian_filter(mask, sigma=0.8, mode="nearest")
    image = background * (1 - soft) + lesion * soft
    image = image + spec.noise_std * rng.standard_normal(image.shape)
    image = np.clip(image, 0.0, 1.0)
    return Sample(Tensor(image[None].astype(DEFAULT_DTYPE)),
                  Tensor(mask[None, None].astype(DEFAULT_DTYPE)),
                  f"synth_{spec.seed}_{index:05d}")


def generate_synthetic(spec):
    spec.validate()
    return [synthetic_sample(spec, i) for i in range(spec.count)]


def lesion_contrast(sample):
    """Mean background intensity minus mean lesion intensity (channel-averaged)."""
    gray = sample.image.data[0].mean(axis=0)
    m = sample.mask.data[0, 0] > 0
    if m.all() or not m.any():
        return float("nan")
    return float(gray[~m].mean() - gray[m].mean())


# --- augmentation ----------------------------------------------------------

@dataclass
class AugmentConfig:
    rotation_degrees: tuple = (-20.0, 20.0)
    hflip_prob: float = 0.5
    crop_fraction: tuple = (0.8, 1.0)
    seed: int = 0

    def validate(self):
        lo, hi = self.rotation_degrees
        if lo > hi or not 0 <= self.hflip_prob <= 1:
            raise DataError("invalid rotation range or flip probability")
        clo, chi = self.crop_fraction
        if not 0 < clo <= chi <= 1:
            raise DataError(f"crop fraction range must lie in (0, 1], got {self.crop_fraction}")
        return self


def _resample(arr, rows, cols, order):
    """Sample every channel of (C, H, W) at the (rows, cols) coordinate grid."""
    grid = np.meshgrid(rows, cols, indexing="ij")
    return np.stack([ndimage.map_coordinates(a, grid, order=order, mode="nearest")
                     for a in arr])


def apply_transform(sample, angle=0.0, flip=False, crop=None):
    """Rotate by ``angle`` degrees, optionally mirror, then crop ``(top, left, ch, cw)`` and resize back."""
    img = sample.image.data[0].astype(np.float64)
    msk = sample.mask.data[0].astype(np.float64)
    h, w = img.shape[1:]
    if angle:
        img = np.stack([ndimage.rotate(a, angle, reshape=False, order=1, mode="nearest")
                        for a in img])
        msk = np.stack([ndimage.rotate(a, angle, reshape=False, order=0, mode="nearest")
                        for a in msk])
    if flip:
        img = img[:, :, ::-1]
        msk = msk[:, :, ::-1]
    if crop is not None and tuple(crop) != (0, 0, h, w):
        top, left, ch, cw = crop
        rows = top + (np.arange(h) + 0.5) * ch / h - 0.5
        cols = left + (np.arange(w) + 0.5) * cw / w - 0.5
        img = _resample(img, rows, cols, order=1)
        msk = _resample(msk, rows, cols, order=0)
    img = np.clip(img, 0.0, 1.0).astype(sample.image.dtype)
    msk = (msk > 0.5).astype(sample.mask.dtype)
    return Sample(Tensor(np.ascontiguousarray(img)[None]),
                  Tensor(np.ascontiguousarray(msk)[None]), sample.id)


def augment(sample, cfg, draw):
    """Random rotation, horizontal flip and crop-then-resize; ``draw`` is a numpy Generator."""
    h, w = sample.size
    angle = float(draw.uniform(*cfg.rotation_degrees))
    flip = bool(draw.random() < cfg.hflip_prob)
    frac = float(draw.uniform(*cfg.crop_fraction))
    ch = min(h, max(1, round(frac * h)))
    cw = min(w, max(1, round(frac * w)))
    top = int(draw.integers(0, h - ch + 1))
    left = int(draw.integers(0, w - cw + 1))
    return apply_transform(sample, angle, flip, (top, left, ch, cw))


def pyramid_inputs(image, stages):
    """``stages`` successively 2x2 average-pooled copies of ``image``."""
    h, w = image.shape[2:]
    step = 2 ** stages
    if h % step or w % step:
        raise ShapeError(f"image {h}x{w} is not divisible by 2**{stages}")
    out = []
    x = image
    for _ in range(stages):
        x = avgpool2x2(x)
        out.append(x)
    return out
