"""Multi-scale patch planning and descriptor extraction.

Images are float arrays in ``[0, 1]``, shaped ``(height, width)`` for gray or
``(height, width, 3)`` for RGB. Patch centres are normalized to ``[0, 1]^2``
by the (resized) image width and height.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .core import (FeatureBag, InvalidInputError, InvalidParameterError,
                   StandardizationStats, cap_norm, standardize, unit_norm)

log = logging.getLogger("nbnlkit.extract")

LONGEST_SIDE = 200


class ExtractionError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# image I/O


def _read_netpbm(data: bytes, path) -> np.ndarray:
    magic = data[:2]
    if magic not in (b"P2", b"P3", b"P5", b"P6"):
        raise InvalidInputError(f"{path}: not a PGM/PPM file")
    channels = 3 if magic in (b"P3", b"P6") else 1
    # header: magic, width, height, maxval, separated by whitespace/comments
    fields, pos = [], 2
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise InvalidInputError(f"{path}: truncated header")
        fields.append(int(data[start:pos]))
    width, height, maxval = fields
    count = width * height * channels
    if magic in (b"P5", b"P6"):
        pos += 1
        dtype = np.dtype(">u2") if maxval > 255 else np.uint8
        raw = np.frombuffer(data, dtype=dtype, count=count, offset=pos)
    else:
        raw = np.array(data[pos:].split()[:count], dtype=np.int64)
        if raw.size != count:
            raise InvalidInputError(f"{path}: truncated pixel data")
    img = raw.astype(np.float64).reshape(height, width, channels) / maxval
    return img[..., 0] if channels == 1 else img


def read_image(path) -> np.ndarray:
    """Load PGM/PPM (parsed directly) or any format Pillow decodes, e.g. PNG."""
    path = Path(path)
    data = path.read_bytes()
    if data[:2] in (b"P2", b"P3", b"P5", b"P6"):
        return _read_netpbm(data, path)
    from PIL import Image

    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB")
        arr = np.asarray(im, dtype=np.float64) / 255.0
    return arr


def write_netpbm(path, image: np.ndarray) -> None:
    """Write an 8-bit binary PGM (gray) or PPM (RGB)."""
    img = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    magic = b"P6" if img.ndim == 3 else b"P5"
    h, w = img.shape[:2]
    with open(path, "wb") as f:
        f.write(magic + f"\n{w} {h}\n255\n".encode())
        f.write(img.tobytes())


def to_gray(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        return image
    return image[..., :3] @ np.array([0.299, 0.587, 0.114])


def _axis_coords(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # half-pixel centre convention, clamped at the borders
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def bilinear_resize(image: np.ndarray, height: int, width: int) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.shape[0] == 0 or image.shape[1] == 0:
        raise InvalidInputError("cannot resize an empty image")
    if (height, width) == image.shape[:2]:
        return image.copy()
    y0, y1, fy = _axis_coords(image.shape[0], height)
    x0, x1, fx = _axis_coords(image.shape[1], width)
    extra = (1,) * (image.ndim - 2)
    fy = fy.reshape((-1, 1) + extra)
    fx = fx.reshape((1, -1) + extra)
    rows = image[y0] * (1 - fy) + image[y1] * fy
    return rows[:, x0] * (1 - fx) + rows[:, x1] * fx


def resize_longest_side(image: np.ndarray, target: int = LONGEST_SIDE) -> np.ndarray:
    """Aspect-preserving bilinear resize so the longer side equals ``target``."""
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape[:2]
    if h == 0 or w == 0:
        raise InvalidInputError(f"image has a zero dimension: {w}x{h}")
    if max(h, w) == target:
        return image
    scale = target / max(h, w)
    nh = max(1, int(round(h * scale)))
    nw = max(1, int(round(w * scale)))
    return bilinear_resize(image, nh, nw)


# ---------------------------------------------------------------------------
# patch planning


@dataclass(frozen=True)
class PatchPlanConfig:
    min_patch: int = 32
    levels: int = 3
    target_patches: int = 100
    include_level0: bool = False
    position_weight: float = 1.0

    def __post_init__(self):
        if self.min_patch < 1 or self.levels < 1 or self.target_patches < 1:
            raise InvalidParameterError("min_patch, levels and target_patches must be >= 1")
        if self.position_weight < 0:
            raise InvalidParameterError("position_weight must be >= 0")

    def level_sizes(self) -> list[int]:
        return [self.min_patch * 2 ** (lv - 1) for lv in range(1, self.levels + 1)]


@dataclass(frozen=True)
class PatchSpec:
    level: int
    x0: int
    y0: int
    width: int
    height: int
    cx: float
    cy: float

    @property
    def size(self) -> int:
        return max(self.width, self.height)

    def crop(self, image: np.ndarray) -> np.ndarray:
        return image[self.y0:self.y0 + self.height, self.x0:self.x0 + self.width]


def grid_count(width: int, height: int, size: int, stride: int) -> int:
    return ((width - size) // stride + 1) * ((height - size) // stride + 1)


def level_stride(width: int, height: int, size: int, budget: float) -> int:
    """Stride for the densest grid with at most ``budget`` patches (never below one patch).

    Among strides giving that count the largest is used, so the grid spreads
    over the whole image.
    """
    limit = max(width, height)
    for stride in range(1, limit + 1):
        n = grid_count(width, height, size, stride)
        if n <= budget:
            while stride < limit and grid_count(width, height, size, stride + 1) == n:
                stride += 1
            return stride
    return limit


def _grid(extent: int, size: int, stride: int) -> list[int]:
    n = (extent - size) // stride + 1
    offset = ((extent - size) - (n - 1) * stride) // 2
    return [offset + i * stride for i in range(n)]


def plan_patches(width: int, height: int, config: PatchPlanConfig) -> list[PatchSpec]:
    """Square patches on a regular grid per level, sizes doubling from ``min_patch``.

    The patch budget is shared across the kept levels in order; a level that
    uses less than its share passes the remainder on to the next level.
    """
    if width < config.min_patch or height < config.min_patch:
        raise InvalidInputError(
            f"image {width}x{height} is smaller than the minimum patch size {config.min_patch}")
    sizes = []
    for lv, size in enumerate(config.level_sizes(), start=1):
        if size > width or size > height:
            warnings.warn(f"dropping level {lv}: patch size {size} exceeds image {width}x{height}",
                          RuntimeWarning, stacklevel=2)
            continue
        sizes.append((lv, size))

    specs = []
    if config.include_level0:
        specs.append(PatchSpec(0, 0, 0, width, height, 0.5, 0.5))
    remaining = float(config.target_patches)
    for i, (lv, size) in enumerate(sizes):
        budget = remaining / (len(sizes) - i)
        stride = level_stride(width, height, size, budget)
        xs = _grid(width, size, stride)
        ys = _grid(height, size, stride)
        for y0 in ys:
            for x0 in xs:
                specs.append(PatchSpec(lv, x0, y0, size, size,
                                       (x0 + size / 2) / width, (y0 + size / 2) / height))
        remaining -= len(xs) * len(ys)
    return specs


# ---------------------------------------------------------------------------
# descriptor extractors


class DescriptorExtractor:
    """Maps patch pixels to a fixed-length descriptor; must be deterministic."""

    name = "base"
    deterministic = True

    def __init__(self, dim: int):
        self.dim = dim

    def __call__(self, pixels: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class DownsampleExtractor(DescriptorExtractor):
    """Gray 8x8 bilinear thumbnail, flattened row-major, mean removed (64-d)."""

    name = "downsample"

    def __init__(self):
        super().__init__(64)

    def __call__(self, pixels):
        g = to_gray(pixels)
        if g.size == 0:
            raise InvalidInputError("empty patch")
        v = bilinear_resize(g, 8, 8).ravel()
        return v - v.mean()


class RandomProjectionExtractor(DescriptorExtractor):
    """Gray 16x16 thumbnail projected by a seeded Gaussian matrix, entries N(0, 1/256)."""

    name = "randproj"

    def __init__(self, dim: int = 64, seed: int = 0):
        if dim < 1:
            raise InvalidParameterError(f"descriptor dimension must be >= 1, got {dim}")
        super().__init__(dim)
        self.seed = seed
        proj = np.random.default_rng(seed).normal(0.0, 1.0 / 16.0, size=(256, dim))
        proj.setflags(write=False)
        self.projection = proj

    def __call__(self, pixels):
        g = to_gray(pixels)
        if g.size == 0:
            raise InvalidInputError("empty patch")
        return bilinear_resize(g, 16, 16).ravel() @ self.projection


def downsample_extractor(pixels: np.ndarray) -> np.ndarray:
    return DownsampleExtractor()(pixels)


def randproj_extractor(pixels: np.ndarray, d_f: int, seed: int = 0) -> np.ndarray:
    return RandomProjectionExtractor(d_f, seed)(pixels)


def make_extractor(name: str, dim: int = 64, seed: int = 0) -> DescriptorExtractor:
    if name == "downsample":
        return DownsampleExtractor()
    if name == "randproj":
        return RandomProjectionExtractor(dim, seed)
    raise InvalidParameterError(f"unknown extractor {name!r}")


# ---------------------------------------------------------------------------
# bag assembly


def raw_descriptors(image: np.ndarray, config: PatchPlanConfig,
                    extractor: DescriptorExtractor) -> tuple[list[PatchSpec], np.ndarray]:
    """Resize, plan, and describe every patch, in plan order."""
    image = resize_longest_side(image)
    h, w = image.shape[:2]
    specs = plan_patches(w, h, config)
    out = np.empty((len(specs), extractor.dim))
    for i, spec in enumerate(specs):
        try:
            out[i] = extractor(spec.crop(image))
        except Exception as exc:
            raise ExtractionError(f"extractor {extractor.name!r} failed on {spec}: {exc}") from exc
    return specs, out


def finish_bag(image_id: str, specs: Sequence[PatchSpec], descriptors: np.ndarray,
               config: PatchPlanConfig, stats: Optional[StandardizationStats] = None,
               label: Optional[int] = None, force_unit_norm: bool = False) -> FeatureBag:
    X = descriptors
    if stats is not None:
        X = standardize(stats, X)
    X = unit_norm(X) if force_unit_norm else cap_norm(X)
    positions = np.array([[s.cx, s.cy] for s in specs])
    if config.position_weight > 0:
        X = np.hstack([X, config.position_weight * positions])
    return FeatureBag(image_id, X, label, positions)


def extract_bag(image, config: PatchPlanConfig, extractor: DescriptorExtractor,
                stats: Optional[StandardizationStats] = None, image_id: str = "",
                label: Optional[int] = None, force_unit_norm: bool = False) -> FeatureBag:
    """Image (array or path) to a bag: resize, plan, describe, standardize, cap, append positions.

    Row ``i`` of the bag corresponds to the ``i``-th planned patch. With a
    positive ``position_weight`` the descriptor gains two trailing columns
    ``position_weight * (cx, cy)``.
    """
    if isinstance(image, (str, Path)):
        image_id = image_id or str(image)
        image = read_image(image)
    if stats is not None and stats.d != extractor.dim:
        raise InvalidInputError(
            f"standardizer dimension {stats.d} does not match extractor dimension {extractor.dim}")
    specs, X = raw_descriptors(image, config, extractor)
    return finish_bag(image_id, specs, X, config, stats, label, force_unit_norm)
