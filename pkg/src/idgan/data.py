"""Procedural dSprites, its decorated variants, and dataset persistence.

Sprites are rasterized from implicit shape functions with 4x4 supersampling,
so any factor grid and resolution gives a deterministic binary dataset.
Variant decoration draws all randomness from the variant's 64-bit seed, in
fixed-size index chunks, so the result never depends on scheduling.
"""
from __future__ import annotations

import logging
import math
import struct
import warnings
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import (
    FormatError,
    InvalidConfigError,
    InvalidInputError,
    InvalidStateError,
    UnsupportedMetricError,
)

log = logging.getLogger(__name__)

DSPRITES_FACTORS = ("shape", "scale", "orientation", "posX", "posY")
CANONICAL_CARDINALITIES = (3, 6, 40, 32, 32)
REDUCED_CARDINALITIES = (3, 6, 10, 16, 16)

SPRITE_HALF_SIZE = 0.15   # half-width of a scale-1 sprite, in image widths
POSITION_MARGIN = 0.15    # sprite centres span [margin, 1 - margin]
SUPERSAMPLE = 4
VARIANT_CHUNK = 4096

VARIANT_KINDS = ("plain", "color", "noisy", "scream", "unknown")


@dataclass(frozen=True)
class FactorSpace:
    names: tuple
    cardinalities: tuple
    grids: tuple

    def __post_init__(self):
        names = tuple(str(n) for n in self.names)
        cards = tuple(int(c) for c in self.cardinalities)
        grids = tuple(np.asarray(g, dtype=np.float64) for g in self.grids)
        if not (len(names) == len(cards) == len(grids)):
            raise InvalidConfigError("names, cardinalities and grids differ in length", "factor_space")
        for name, card, grid in zip(names, cards, grids):
            if card < 1:
                raise InvalidConfigError(f"cardinality {card} < 1", f"factor_space.{name}")
            if grid.shape != (card,):
                raise InvalidConfigError(f"grid has {grid.size} values, expected {card}",
                                         f"factor_space.{name}")
            if card > 1 and not (np.diff(grid) > 0).all():
                raise InvalidConfigError("grid is not strictly increasing", f"factor_space.{name}")
        for g in grids:
            g.setflags(write=False)
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "cardinalities", cards)
        object.__setattr__(self, "grids", grids)

    def __eq__(self, other):
        return (isinstance(other, FactorSpace) and self.names == other.names
                and self.cardinalities == other.cardinalities
                and all(np.array_equal(a, b) for a, b in zip(self.grids, other.grids)))

    def __hash__(self):
        return hash((self.names, self.cardinalities))

    @classmethod
    def dsprites(cls, cardinalities=CANONICAL_CARDINALITIES):
        n_shape, n_scale, n_orient, n_x, n_y = cardinalities
        grids = (
            np.arange(1, n_shape + 1, dtype=np.float64),
            np.linspace(0.5, 1.0, n_scale),
            np.linspace(0.0, 2 * math.pi, n_orient, endpoint=False),
            np.linspace(0.0, 1.0, n_x),
            np.linspace(0.0, 1.0, n_y),
        )
        return cls(DSPRITES_FACTORS, tuple(cardinalities), grids)

    @property
    def num_factors(self):
        return len(self.names)

    @property
    def size(self):
        return math.prod(self.cardinalities)

    def index_to_factors(self, i):
        """Row-major flat index -> factor index vector (vectorized over ``i``)."""
        i = np.asarray(i, dtype=np.int64)
        if ((i < 0) | (i >= self.size)).any():
            raise InvalidInputError(f"index out of range [0, {self.size})")
        return np.stack(np.unravel_index(i, self.cardinalities), axis=-1)

    def factors_to_index(self, v):
        v = np.asarray(v, dtype=np.int64)
        if v.shape[-1] != self.num_factors:
            raise InvalidInputError(f"expected {self.num_factors} factor indices")
        if ((v < 0) | (v >= np.asarray(self.cardinalities))).any():
            raise InvalidInputError("factor index out of range")
        return np.ravel_multi_index(tuple(np.moveaxis(v, -1, 0)), self.cardinalities)

    def factor_values(self, factors):
        """Look up grid values for an (n, K) factor index table."""
        factors = np.asarray(factors)
        return np.stack([self.grids[k][factors[:, k]] for k in range(self.num_factors)], axis=1)

    def factor_position(self, factor):
        if isinstance(factor, str):
            if factor not in self.names:
                raise InvalidInputError(f"unknown factor {factor!r}")
            return self.names.index(factor)
        factor = int(factor)
        if not 0 <= factor < self.num_factors:
            raise InvalidInputError(f"factor index {factor} out of range")
        return factor


@dataclass(frozen=True)
class VariantConfig:
    kind: str = "plain"
    seed: int = 0
    color_levels: int = 8

    def __post_init__(self):
        if self.kind not in VARIANT_KINDS:
            raise InvalidConfigError(f"unknown variant {self.kind!r}", "variant.kind")
        if not 0 <= int(self.seed) < 2**64:
            raise InvalidConfigError("seed must fit in 64 bits", "variant.seed")
        if self.kind == "color" and self.color_levels < 2:
            raise InvalidConfigError("need at least 2 color levels", "variant.color_levels")


@dataclass(frozen=True)
class DatasetHandle:
    """Immutable image collection, optionally indexed by a factor space.

    ``images`` is N x H x W x C uint8; ``factors`` is N x K factor indices or
    ``None`` for ingested natural images.
    """

    images: np.ndarray
    factors: np.ndarray | None
    space: FactorSpace | None
    variant: VariantConfig = field(default_factory=VariantConfig)
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        images = np.asarray(self.images)
        if images.dtype != np.uint8 or images.ndim != 4 or images.shape[-1] not in (1, 3):
            raise InvalidInputError("images must be an N x H x W x C uint8 array with C in {1, 3}")
        images.setflags(write=False)
        object.__setattr__(self, "images", images)
        if (self.factors is None) != (self.space is None):
            raise InvalidInputError("factors and space must be given together")
        if self.factors is not None:
            factors = np.asarray(self.factors, dtype=np.int64)
            if factors.shape != (len(images), self.space.num_factors):
                raise InvalidInputError(f"factor table shape {factors.shape} does not match images")
            if len(images) != self.space.size:
                raise InvalidInputError(f"N={len(images)} != factor space size {self.space.size}")
            if ((factors < 0) | (factors >= np.asarray(self.space.cardinalities))).any():
                raise InvalidInputError("factor index exceeds its cardinality")
            factors.setflags(write=False)
            object.__setattr__(self, "factors", factors)

    def __len__(self):
        return len(self.images)

    @property
    def resolution(self):
        return self.images.shape[1]

    @property
    def channels(self):
        return self.images.shape[-1]

    @property
    def has_factors(self):
        return self.factors is not None

    def require_factors(self, what="this metric"):
        if not self.has_factors:
            raise UnsupportedMetricError(f"{what} needs a dataset with ground-truth factors")
        return self.factors

    def as_float(self, indices=None):
        """Images as float32 N x C x H x W in [0, 1]."""
        imgs = self.images if indices is None else self.images[indices]
        return np.ascontiguousarray(imgs.transpose(0, 3, 1, 2), dtype=np.float32) / 255.0


# --------------------------------------------------------------------------
# Rasterization

def _shape_mask(shape_id, u, v):
    """Inside-test in the unit box [-1, 1]^2 of the sprite frame."""
    if shape_id == 1:      # square
        return np.maximum(np.abs(u), np.abs(v)) <= 1.0
    if shape_id == 2:      # ellipse
        return u * u + (v / 0.55) ** 2 <= 1.0
    # heart: (x^2 + y^2 - 1)^3 - x^2 y^3 <= 0, whose bounding box
    # [-1.139, 1.139] x [-1, 1.236] is mapped onto the unit box
    x = 1.139 * u
    y = -(1.118 * v + 0.118)   # image rows grow downwards; lobes on top
    return (x * x + y * y - 1.0) ** 3 - x * x * y**3 <= 0.0


def _check_resolution(space, resolution):
    if resolution < 16:
        raise InvalidConfigError("resolution must be at least 16", "resolution")
    smallest = 2 * SPRITE_HALF_SIZE * space.grids[1].min() * resolution
    if smallest < 2.0:
        raise InvalidConfigError(
            f"smallest sprite spans {smallest:.2f} px at resolution {resolution}", "resolution")


def render_sprites(space: FactorSpace, indices, resolution: int) -> np.ndarray:
    """Binary masks (n, H, W) for the given flat dataset indices."""
    _check_resolution(space, resolution)
    indices = np.asarray(indices, dtype=np.int64)
    values = space.factor_values(space.index_to_factors(indices))
    shape_id, scale, angle, px, py = values.T
    res = resolution
    s = SUPERSAMPLE
    reach = SPRITE_HALF_SIZE * space.grids[1].max() * math.sqrt(2.0)
    win = int(math.ceil(2 * reach * res)) + 2
    cx = (POSITION_MARGIN + px * (1 - 2 * POSITION_MARGIN)) * res
    cy = (POSITION_MARGIN + py * (1 - 2 * POSITION_MARGIN)) * res
    ox = np.floor(cx - win / 2).astype(np.int64)
    oy = np.floor(cy - win / 2).astype(np.int64)
    sub = ((np.arange(win * s) + 0.5) / s).astype(np.float32)   # pixel units
    cx, cy = cx.astype(np.float32), cy.astype(np.float32)
    gx = ox[:, None, None] + sub[None, None, :] - cx[:, None, None]
    gy = oy[:, None, None] + sub[None, :, None] - cy[:, None, None]
    cos = np.cos(angle).astype(np.float32)[:, None, None]
    sin = np.sin(angle).astype(np.float32)[:, None, None]
    half = (SPRITE_HALF_SIZE * scale * res).astype(np.float32)[:, None, None]
    u = (cos * gx + sin * gy) / half
    v = (-sin * gx + cos * gy) / half
    inside = np.zeros(u.shape, dtype=bool)
    for sid in (1, 2, 3):
        sel = shape_id == sid
        if sel.any():
            inside[sel] = _shape_mask(sid, u[sel], v[sel])
    n = len(indices)
    coverage = inside.reshape(n, win, s, win, s).mean(axis=(2, 4))
    window = coverage >= 0.5
    canvas = np.zeros((n, res + 2 * win, res + 2 * win), dtype=bool)
    rows = oy[:, None] + win + np.arange(win)[None, :]
    cols = ox[:, None] + win + np.arange(win)[None, :]
    canvas[np.arange(n)[:, None, None], rows[:, :, None], cols[:, None, :]] = window
    return canvas[:, win:win + res, win:win + res]


def _render_range(args):
    space, start, stop, resolution, batch = args
    out = np.empty((stop - start, resolution, resolution), dtype=np.uint8)
    for lo in range(start, stop, batch):
        hi = min(lo + batch, stop)
        out[lo - start:hi - start] = render_sprites(space, np.arange(lo, hi), resolution) * np.uint8(255)
    return out


def generate_dsprites(space: FactorSpace | None = None, resolution: int = 64,
                      workers: int = 1, batch: int = 256) -> DatasetHandle:
    """Render one binary image per factor combination, in row-major order."""
    space = space or FactorSpace.dsprites()
    if space.names != DSPRITES_FACTORS:
        raise InvalidConfigError(f"expected factors {DSPRITES_FACTORS}, got {space.names}",
                                 "factor_space.names")
    if space.cardinalities[0] > 3:
        raise InvalidConfigError("only 3 sprite shapes exist", "factor_space.shape")
    _check_resolution(space, resolution)
    n = space.size
    if workers > 1:
        bounds = np.linspace(0, n, workers * 4 + 1).astype(int)
        jobs = [(space, lo, hi, resolution, batch) for lo, hi in zip(bounds[:-1], bounds[1:]) if hi > lo]
        with ProcessPoolExecutor(workers) as pool:
            images = np.concatenate(list(pool.map(_render_range, jobs)))
    else:
        images = _render_range((space, 0, n, resolution, batch))
    factors = space.index_to_factors(np.arange(n))
    return DatasetHandle(images[..., None], factors, space, VariantConfig("plain"))


# --------------------------------------------------------------------------
# Variants

def scream_texture(seed, size=256, components=6):
    """Smooth multi-color texture from low-frequency sinusoids, in [0, 1]."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5C7EA3]))
    yy, xx = np.mgrid[0:size, 0:size] / size
    tex = np.zeros((size, size, 3))
    for ch in range(3):
        for _ in range(components):
            fx, fy = rng.uniform(-4, 4, size=2)
            tex[..., ch] += rng.uniform(0.3, 1.0) * np.sin(
                2 * math.pi * (fx * xx + fy * yy) + rng.uniform(0, 2 * math.pi))
        lo, hi = tex[..., ch].min(), tex[..., ch].max()
        tex[..., ch] = (tex[..., ch] - lo) / (hi - lo)
    return tex


def _decorate_chunk(masks, kind, rng, config, texture):
    n, h, w = masks.shape
    out = np.zeros((n, h, w, 3), dtype=np.uint8)
    if kind == "color":
        levels = config.color_levels
        codes = rng.integers(levels, size=(n, 3))
        dark = (codes == 0).all(1)
        while dark.any():       # an all-black sprite would vanish
            codes[dark] = rng.integers(levels, size=(int(dark.sum()), 3))
            dark = (codes == 0).all(1)
        colors = np.rint(codes / (levels - 1) * 255).astype(np.uint8)
        out[:] = np.where(masks[..., None], colors[:, None, None, :], 0)
    elif kind == "noisy":
        out[:] = rng.integers(0, 256, size=out.shape, dtype=np.uint8)
        out[masks] = 255
    elif kind == "scream":
        t = texture.shape[0]
        ys = rng.integers(0, t - h + 1, size=n)
        xs = rng.integers(0, t - w + 1, size=n)
        for i in range(n):
            patch = texture[ys[i]:ys[i] + h, xs[i]:xs[i] + w]
            out[i] = np.where(masks[i][..., None], 255 - patch, patch)
    return out


def apply_variant(d: DatasetHandle, v: VariantConfig) -> DatasetHandle:
    """Decorate a plain dataset; returns a new 3-channel handle."""
    if d.variant.kind != "plain":
        raise InvalidStateError(f"dataset already carries the {d.variant.kind!r} variant")
    if v.kind == "plain":
        return d
    if v.kind == "unknown":
        raise InvalidConfigError("cannot apply an unknown variant", "variant.kind")
    masks = d.images[..., 0] > 127
    texture = None
    if v.kind == "scream":
        texture = np.rint(scream_texture(v.seed, size=max(256, 2 * d.resolution)) * 255).astype(np.uint8)
    out = np.empty(masks.shape + (3,), dtype=np.uint8)
    chunk_seeds = np.random.SeedSequence(v.seed).spawn(math.ceil(len(d) / VARIANT_CHUNK))
    for c, ss in enumerate(chunk_seeds):
        lo, hi = c * VARIANT_CHUNK, min((c + 1) * VARIANT_CHUNK, len(d))
        out[lo:hi] = _decorate_chunk(masks[lo:hi], v.kind, np.random.default_rng(ss), v, texture)
    return replace(d, images=out, variant=v)


def fixed_factor_indices(space: FactorSpace, factor, value: int, n: int, rng) -> np.ndarray:
    """Flat indices of ``n`` samples with one factor pinned, others uniform."""
    k = space.factor_position(factor)
    if not 0 <= value < space.cardinalities[k]:
        raise InvalidInputError(f"value {value} out of range for factor {space.names[k]}")
    if n < 1:
        raise InvalidInputError("n must be >= 1")
    rng = np.random.default_rng(rng)
    factors = np.stack([rng.integers(c, size=n) for c in space.cardinalities], axis=1)
    factors[:, k] = value
    return space.factors_to_index(factors)


def sample_fixed_factor_batch(d: DatasetHandle, factor, value: int, n: int, seed) -> np.ndarray:
    d.require_factors("fixed-factor sampling")
    return d.images[fixed_factor_indices(d.space, factor, value, n, seed)]


# --------------------------------------------------------------------------
# Persistence

MAGIC = b"IDGN"
VERSION = 1


def dataset_to_bytes(d: DatasetHandle) -> bytes:
    parts = [MAGIC, struct.pack("<B", VERSION)]
    space = d.space
    k = space.num_factors if space is not None else 0
    parts.append(struct.pack("<I", k))
    for i in range(k):
        name = space.names[i].encode("utf-8")
        parts.append(struct.pack("<I", len(name)) + name)
        parts.append(struct.pack("<I", space.cardinalities[i]))
        parts.append(space.grids[i].astype("<f8").tobytes())
    n, h, w, c = d.images.shape
    parts.append(struct.pack("<4I", n, h, w, c))
    parts.append(np.ascontiguousarray(d.images).tobytes())
    if k:
        parts.append(d.factors.astype("<u2").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def save_dataset(d: DatasetHandle, path) -> Path:
    path = Path(path)
    path.write_bytes(dataset_to_bytes(d))
    return path


class _Reader:
    def __init__(self, buf):
        self.buf = memoryview(buf)
        self.pos = 0

    def take(self, n, section):
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated: need {n} bytes at offset {self.pos}", section)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, section):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), section))


def dataset_from_bytes(buf) -> DatasetHandle:
    if len(buf) < 4 + 1 + 4:
        raise FormatError("file too short", "header")
    r = _Reader(buf)
    if bytes(r.take(4, "header")) != MAGIC:
        raise FormatError("bad magic", "header")
    (version,) = r.unpack("<B", "header")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", "header")
    (k,) = r.unpack("<I", "factor-space")
    if k > 64:
        raise FormatError(f"implausible factor count {k}", "factor-space")
    names, cards, grids = [], [], []
    for _ in range(k):
        (ln,) = r.unpack("<I", "factor-space")
        try:
            names.append(bytes(r.take(ln, "factor-space")).decode("utf-8"))
        except UnicodeDecodeError as exc:
            raise FormatError(f"factor name is not UTF-8: {exc}", "factor-space") from None
        (card,) = r.unpack("<I", "factor-space")
        grids.append(np.frombuffer(r.take(8 * card, "factor-space"), dtype="<f8").astype(np.float64))
        cards.append(card)
    n, h, w, c = r.unpack("<4I", "dimensions")
    images = np.frombuffer(r.take(n * h * w * c, "images"), dtype=np.uint8).reshape(n, h, w, c).copy()
    factors = None
    if k:
        factors = np.frombuffer(r.take(2 * n * k, "factor-table"), dtype="<u2").reshape(n, k).astype(np.int64)
    body_end = r.pos
    (crc,) = r.unpack("<I", "checksum")
    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} trailing bytes", "checksum")
    if zlib.crc32(r.buf[:body_end]) != crc:
        raise FormatError("CRC-32 mismatch", "checksum")
    try:
        space = FactorSpace(tuple(names), tuple(cards), tuple(grids)) if k else None
        if c == 1 and np.isin(images, (0, 255)).all():
            variant = VariantConfig("plain")
        else:
            variant = VariantConfig("unknown")
        return DatasetHandle(images, factors, space, variant)
    except (InvalidConfigError, InvalidInputError) as exc:
        raise FormatError(str(exc), "factor-space") from None


def load_dataset(path) -> DatasetHandle:
    return dataset_from_bytes(Path(path).read_bytes())


# --------------------------------------------------------------------------
# Natural images

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


def ingest_image_folder(path, resolution: int = 64) -> DatasetHandle:
    """Center-crop and resize every decodable image; files in name order."""
    from PIL import Image, UnidentifiedImageError

    path = Path(path)
    files = sorted(p for p in path.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    images, skipped = [], []
    for f in files:
        try:
            with Image.open(f) as im:
                im = im.convert("RGB")
                w, h = im.size
                side = min(w, h)
                left, top = (w - side) // 2, (h - side) // 2
                im = im.crop((left, top, left + side, top + side))
                im = im.resize((resolution, resolution), Image.BILINEAR)
                images.append(np.asarray(im, dtype=np.uint8))
        except (UnidentifiedImageError, OSError) as exc:
            skipped.append(f.name)
            warnings.warn(f"skipping undecodable image {f.name}: {exc}")
    if skipped:
        log.warning("skipped %d undecodable files in %s", len(skipped), path)
    if not images:
        raise InvalidInputError(f"no decodable images in {path}")
    return DatasetHandle(np.stack(images), None, None, VariantConfig("unknown"),
                         meta={"source": str(path), "skipped": len(skipped), "skipped_files": skipped})
