"""Synthetic class-by-domain image grid, manifest ingestion and preprocessing.

A grid cell (c, d) holds image pools (train/val/test/reserve) where the
foreground glyph geometry depends only on the class c and the per-sample
jitter, while the background texture family depends only on the domain d.
Classes therefore carry information shared across domains; domains carry
nuisance information shared across classes.

Every pixel is a pure function of (seed, class, domain, pool, index), so two
builds of the same config are bit-identical.  Pixel values are quantized to
the 8-bit grid (k/255) at render time, which makes the PNG manifest
round-trip lossless.
"""

from __future__ import annotations

import csv
import hashlib
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .errors import ManifestError, ResourceBudgetError
from .prng import Stream, derive

POOLS = ("train", "val", "test", "reserve")
POOL_CODE = {name: i for i, name in enumerate(POOLS)}

MAX_TEMPLATE_CLASSES = 10
MAX_DOMAIN_FAMILIES = 5

# Glyph contrast against the background, before 8-bit quantization.
GLYPH_CONTRAST = 0.35
# Brightness ceiling of bright-glyph backgrounds / floor of the inverted one.
_BG_CEIL = 1.0 - GLYPH_CONTRAST

# Per-class stroke templates: (x0, y0, x1, y1) segments in unit coordinates
# (x right, y down), rasterized at any resolution with half-width _STROKE_HW.
# Arrangements are seven-segment-like so any two classes disagree on a large
# fraction of their foreground.
_T = (0.22, 0.22, 0.78, 0.22)
_B = (0.22, 0.78, 0.78, 0.78)
_M = (0.22, 0.50, 0.78, 0.50)
_L = (0.22, 0.22, 0.22, 0.78)
_R = (0.78, 0.22, 0.78, 0.78)
_LU = (0.22, 0.22, 0.22, 0.50)
_V = (0.50, 0.22, 0.50, 0.78)
_D = (0.22, 0.22, 0.78, 0.78)
_A = (0.78, 0.22, 0.22, 0.78)

GLYPH_STROKES = (
    (_T, _B, _L, _R),                       # 0: box
    (_V, (0.30, 0.38, 0.50, 0.22)),         # 1: vertical with serif
    (_T, _A, _B),                           # 2: Z
    (_T, _M, _R),                           # 3
    (_LU, _M, _R),                          # 4
    (_T, _LU, _M, _B),                      # 5
    (_L, _M, _B),                           # 6
    (_T, (0.78, 0.22, 0.35, 0.78)),         # 7
    (_V, _M, _D, _A),                       # 8: asterisk
    (_D, _B),                               # 9
)
_STROKE_HW = 0.06

_JITTER_MAX_SHIFT = 2       # pixels, each axis
_JITTER_MAX_ROT = 15.0      # degrees


@dataclass(frozen=True)
class GridConfig:
    n_classes: int = 10
    n_domains: int = 5
    image_size: int = 16
    samples_per_cell: tuple[int, int, int, int] = (1000, 250, 200, 4000)
    seed: int = 0

    def __post_init__(self):
        if not 2 <= self.n_classes <= MAX_TEMPLATE_CLASSES:
            raise ValueError(
                f"n_classes must be in [2, {MAX_TEMPLATE_CLASSES}] "
                f"(embedded template set), got {self.n_classes}"
            )
        if not 2 <= self.n_domains <= MAX_DOMAIN_FAMILIES:
            raise ValueError(
                f"n_domains must be in [2, {MAX_DOMAIN_FAMILIES}] "
                f"(nuisance family set), got {self.n_domains}"
            )
        if self.image_size < 4:
            raise ValueError(f"image_size must be >= 4, got {self.image_size}")
        if len(self.samples_per_cell) != 4 or any(s < 0 for s in self.samples_per_cell):
            raise ValueError("samples_per_cell must be four non-negative counts")

    @property
    def pool_sizes(self) -> dict[str, int]:
        return dict(zip(POOLS, self.samples_per_cell))


@dataclass(frozen=True)
class Sample:
    pixels: np.ndarray  # float32 [3, H, W], values in [0, 1]
    class_id: int
    domain_id: int
    uid: int


@dataclass(frozen=True)
class PreprocessSpec:
    target_size: int
    center_crop: bool = False
    random_translate_max: float = 0.0
    augment_seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.random_translate_max <= 0.5:
            raise ValueError(
                f"random_translate_max must be in [0, 0.5], got {self.random_translate_max}"
            )
        if self.target_size < 1:
            raise ValueError("target_size must be >= 1")


class _CellPool:
    __slots__ = ("pixels", "uids")

    def __init__(self, pixels: np.ndarray, uids: np.ndarray):
        pixels = np.ascontiguousarray(pixels, dtype=np.float32)
        uids = np.ascontiguousarray(uids, dtype=np.uint64)
        pixels.setflags(write=False)
        uids.setflags(write=False)
        self.pixels = pixels
        self.uids = uids

    def __len__(self) -> int:
        return len(self.uids)


class DatasetGrid:
    """Immutable class-by-domain sample pools.

    Pools are stored as contiguous arrays per (class, domain, pool); the
    arrays are write-protected so no downstream operation can mutate them.
    """

    def __init__(self, n_classes, n_domains, image_size, pools,
                 config: GridConfig | None = None, synthetic: bool = False):
        self.n_classes = n_classes
        self.n_domains = n_domains
        self.image_size = image_size
        self.config = config
        self.synthetic = synthetic
        self._pools: dict[tuple[int, int, str], _CellPool] = {}
        self._uid_index: dict[int, tuple[int, int, str, int]] = {}
        for (c, d, pool), cell in pools.items():
            if pool not in POOLS:
                raise ValueError(f"unknown pool {pool!r}")
            self._pools[(c, d, pool)] = cell
            for row, uid in enumerate(cell.uids):
                key = int(uid)
                if key in self._uid_index:
                    raise ValueError(f"duplicate uid {key} in cell ({c},{d}) pool {pool}")
                self._uid_index[key] = (c, d, pool, row)

    # -- lookups ----------------------------------------------------------

    def cells(self):
        for c in range(self.n_classes):
            for d in range(self.n_domains):
                yield c, d

    def pool(self, class_id, domain_id, pool) -> _CellPool:
        cell = self._pools.get((class_id, domain_id, pool))
        if cell is None:
            return _CellPool(
                np.empty((0, 3, self.image_size, self.image_size), dtype=np.float32),
                np.empty(0, dtype=np.uint64),
            )
        return cell

    def pool_size(self, class_id, domain_id, pool) -> int:
        return len(self.pool(class_id, domain_id, pool))

    def pool_uids(self, class_id, domain_id, pool) -> list[int]:
        return [int(u) for u in self.pool(class_id, domain_id, pool).uids]

    def samples(self, class_id, domain_id, pool) -> list[Sample]:
        cell = self.pool(class_id, domain_id, pool)
        return [
            Sample(pixels=cell.pixels[i], class_id=class_id, domain_id=domain_id,
                   uid=int(cell.uids[i]))
            for i in range(len(cell))
        ]

    def cell(self, class_id, domain_id) -> dict[str, list[Sample]]:
        return {pool: self.samples(class_id, domain_id, pool) for pool in POOLS}

    def locate(self, uid: int) -> tuple[int, int, str, int]:
        try:
            return self._uid_index[int(uid)]
        except KeyError:
            raise KeyError(f"uid {uid} not present in grid") from None

    def sample(self, uid: int) -> Sample:
        c, d, pool, row = self.locate(uid)
        cell = self._pools[(c, d, pool)]
        return Sample(pixels=cell.pixels[row], class_id=c, domain_id=d, uid=int(uid))

    def gather(self, uids) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Pixels, class ids and domain ids for a uid sequence, in order."""
        uids = list(uids)
        n = len(uids)
        out = np.empty((n, 3, self.image_size, self.image_size), dtype=np.float32)
        classes = np.empty(n, dtype=np.int64)
        domains = np.empty(n, dtype=np.int64)
        for i, uid in enumerate(uids):
            c, d, pool, row = self.locate(uid)
            out[i] = self._pools[(c, d, pool)].pixels[row]
            classes[i] = c
            domains[i] = d
        return out, classes, domains

    def pool_digest(self, pool: str) -> str:
        """Content digest of one pool across all cells (test-set hygiene)."""
        h = hashlib.sha256()
        for c, d in self.cells():
            cell = self.pool(c, d, pool)
            h.update(np.ascontiguousarray(cell.uids).tobytes())
            h.update(np.ascontiguousarray(cell.pixels).tobytes())
        return h.hexdigest()


# -- glyph rendering -------------------------------------------------------


def _segment_distance(px, py, seg):
    x0, y0, x1, y1 = seg
    vx, vy = x1 - x0, y1 - y0
    seg_len2 = vx * vx + vy * vy
    if seg_len2 == 0:
        return np.hypot(px - x0, py - y0)
    t = np.clip(((px - x0) * vx + (py - y0) * vy) / seg_len2, 0.0, 1.0)
    return np.hypot(px - (x0 + t * vx), py - (y0 + t * vy))


def template_mask(class_id: int, image_size: int) -> np.ndarray:
    """Rasterize the embedded stroke template of a class as a boolean mask."""
    if not 0 <= class_id < MAX_TEMPLATE_CLASSES:
        raise ValueError(f"class_id {class_id} outside embedded template range")
    coords = (np.arange(image_size) + 0.5) / image_size
    px, py = np.meshgrid(coords, coords)  # py rows = y, px cols = x
    mask = np.zeros((image_size, image_size), dtype=bool)
    for seg in GLYPH_STROKES[class_id]:
        mask |= _segment_distance(px, py, seg) <= _STROKE_HW
    return mask


def _rotate_mask_nn(mask: np.ndarray, degrees: float) -> np.ndarray:
    """Nearest-neighbour rotation about the canvas centre; keeps mask binary."""
    size = mask.shape[0]
    c = (size - 1) / 2.0
    theta = np.deg2rad(degrees)
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    jj, ii = np.meshgrid(np.arange(size), np.arange(size))
    xs = jj - c
    ys = ii - c
    # inverse map: rotate destination coords by -theta
    src_x = np.rint(cos_t * xs + sin_t * ys + c).astype(np.int64)
    src_y = np.rint(-sin_t * xs + cos_t * ys + c).astype(np.int64)
    valid = (src_x >= 0) & (src_x < size) & (src_y >= 0) & (src_y < size)
    out = np.zeros_like(mask)
    out[valid] = mask[src_y[valid], src_x[valid]]
    return out


def _shift_mask(mask: np.ndarray, dy: int, dx: int) -> np.ndarray:
    out = np.zeros_like(mask)
    size = mask.shape[0]
    ys = slice(max(0, dy), min(size, size + dy))
    xs = slice(max(0, dx), min(size, size + dx))
    ys_src = slice(max(0, -dy), min(size, size - dy))
    xs_src = slice(max(0, -dx), min(size, size - dx))
    out[ys, xs] = mask[ys_src, xs_src]
    return out


def glyph_mask(class_id: int, stream: Stream, image_size: int) -> np.ndarray:
    """Jittered foreground mask; consumes exactly three stream draws.

    Depends on the class and the stream only, never on the domain.
    """
    angle = (2.0 * stream.float() - 1.0) * _JITTER_MAX_ROT
    dx = stream.below(2 * _JITTER_MAX_SHIFT + 1) - _JITTER_MAX_SHIFT
    dy = stream.below(2 * _JITTER_MAX_SHIFT + 1) - _JITTER_MAX_SHIFT
    mask = template_mask(class_id, image_size)
    if angle != 0.0:
        mask = _rotate_mask_nn(mask, angle)
    if dx or dy:
        mask = _shift_mask(mask, dy, dx)
    return mask


# -- background families ----------------------------------------------------


def _bg_uniform_noise(stream: Stream, size: int) -> np.ndarray:
    return (stream.floats(size * size) * _BG_CEIL).reshape(size, size)


def _bg_stripes(stream: Stream, size: int) -> np.ndarray:
    period = 3 + stream.below(4)
    phase = stream.float()
    y = np.arange(size)
    vals = 0.5 * _BG_CEIL * (1.0 + np.sin(2.0 * np.pi * (y / period + phase)))
    return np.repeat(vals[:, None], size, axis=1)


def _bg_checkerboard(stream: Stream, size: int) -> np.ndarray:
    tile = 2 + stream.below(3)
    oy = stream.below(tile)
    ox = stream.below(tile)
    tone0 = stream.uniform(0.0, 0.2)
    tone1 = stream.uniform(0.45, _BG_CEIL)
    ii, jj = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    parity = (((ii + oy) // tile) + ((jj + ox) // tile)) % 2
    return np.where(parity == 0, tone0, tone1)


def _bg_value_noise(stream: Stream, size: int) -> np.ndarray:
    coarse = (stream.floats(16) * _BG_CEIL).reshape(4, 4)
    return bilinear_resize(coarse[None], size)[0]


def _bg_inverted_solid(stream: Stream, size: int) -> np.ndarray:
    base = stream.uniform(1.0 - _BG_CEIL + 0.2, 0.95)
    noise = stream.normals(size * size).reshape(size, size) * 0.05
    return np.clip(base + noise, GLYPH_CONTRAST, 1.0)


_BG_FAMILIES = (
    _bg_uniform_noise,
    _bg_stripes,
    _bg_checkerboard,
    _bg_value_noise,
    _bg_inverted_solid,
)
# Families 0..3 composite a brighter glyph; the inverted family a darker one.
_DARK_GLYPH_DOMAINS = frozenset({4})


def _quantize(values: np.ndarray) -> np.ndarray:
    return np.floor(values * 255.0 + 0.5) / np.float32(255.0)


def render_sample(class_id: int, domain_id: int, stream: Stream, *,
                  image_size: int = 16, uid: int = 0) -> Sample:
    """Render one sample from its dedicated stream.

    Draw order is fixed: three jitter draws (shared across domains), then the
    domain family's own draws.  The glyph sits at a fixed +-0.35 contrast to
    the background, brighter for families 0-3 and darker for the inverted
    family.
    """
    if not 0 <= class_id < MAX_TEMPLATE_CLASSES:
        raise ValueError(f"class_id {class_id} out of range")
    if not 0 <= domain_id < MAX_DOMAIN_FAMILIES:
        raise ValueError(f"domain_id {domain_id} out of range")
    mask = glyph_mask(class_id, stream, image_size)
    bg = _BG_FAMILIES[domain_id](stream, image_size)
    img = bg.astype(np.float64)
    if domain_id in _DARK_GLYPH_DOMAINS:
        img[mask] -= GLYPH_CONTRAST
    else:
        img[mask] += GLYPH_CONTRAST
    img = _quantize(np.clip(img, 0.0, 1.0))
    pixels = np.repeat(img[None].astype(np.float32), 3, axis=0)
    pixels.setflags(write=False)
    return Sample(pixels=pixels, class_id=class_id, domain_id=domain_id, uid=uid)


def sample_key(seed: int, class_id: int, domain_id: int, pool: str, index: int) -> int:
    """Stream key and uid of one synthetic sample."""
    return derive(seed, "sample", class_id, domain_id, POOL_CODE[pool], index)


def build_grid(config: GridConfig, memory_budget_bytes: int = 2 << 30) -> DatasetGrid:
    """Materialize the full synthetic grid; deterministic in the config."""
    bytes_per_sample = 3 * config.image_size * config.image_size * 4 + 8
    used = 0
    pools: dict[tuple[int, int, str], _CellPool] = {}
    for c in range(config.n_classes):
        for d in range(config.n_domains):
            for pool, size in config.pool_sizes.items():
                used += size * bytes_per_sample
                if used > memory_budget_bytes:
                    raise ResourceBudgetError(
                        f"grid build exceeds memory budget ({memory_budget_bytes} bytes) "
                        f"at cell ({c},{d}) pool {pool!r}"
                    )
                pixels = np.empty((size, 3, config.image_size, config.image_size),
                                  dtype=np.float32)
                uids = np.empty(size, dtype=np.uint64)
                for i in range(size):
                    key = sample_key(config.seed, c, d, pool, i)
                    s = render_sample(c, d, Stream(key),
                                      image_size=config.image_size, uid=key)
                    pixels[i] = s.pixels
                    uids[i] = key
                pools[(c, d, pool)] = _CellPool(pixels, uids)
    return DatasetGrid(config.n_classes, config.n_domains, config.image_size,
                       pools, config=config, synthetic=True)


# -- manifest I/O -----------------------------------------------------------

MANIFEST_HEADER = ["path", "class_id", "domain_id", "pool"]


def save_manifest(grid: DatasetGrid, out_dir: str, name: str = "manifest.csv") -> str:
    """Export a grid as PNG files plus a manifest CSV; returns the CSV path."""
    image_dir = os.path.join(out_dir, "images")
    os.makedirs(image_dir, exist_ok=True)
    manifest_path = os.path.join(out_dir, name)
    with open(manifest_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_HEADER)
        for c, d in grid.cells():
            for pool in POOLS:
                cell = grid.pool(c, d, pool)
                for i in range(len(cell)):
                    rel = os.path.join("images", f"c{c}_d{d}_{pool}_{i:05d}.png")
                    img8 = np.floor(cell.pixels[i] * 255.0 + 0.5).astype(np.uint8)
                    Image.fromarray(np.moveaxis(img8, 0, -1), mode="RGB").save(
                        os.path.join(out_dir, rel))
                    writer.writerow([rel, c, d, pool])
    return manifest_path


def load_manifest(path: str) -> DatasetGrid:
    """Ingest a manifest CSV of PNG files as a (possibly ragged) grid."""
    base = os.path.dirname(os.path.abspath(path))
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise ManifestError(f"cannot open manifest {path!r}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ManifestError(f"manifest {path!r} is empty") from None
        if [h.strip() for h in header] != MANIFEST_HEADER:
            raise ManifestError(
                f"manifest {path!r} header must be {','.join(MANIFEST_HEADER)}"
            )
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise ManifestError(f"row {lineno}: expected 4 fields, got {len(row)}")
            rel, c_s, d_s, pool = row
            try:
                c, d = int(c_s), int(d_s)
            except ValueError:
                raise ManifestError(
                    f"row {lineno}: non-integer class/domain id {c_s!r},{d_s!r}"
                ) from None
            if c < 0 or d < 0:
                raise ManifestError(f"row {lineno}: negative class/domain id")
            if pool not in POOLS:
                raise ManifestError(f"row {lineno}: unknown pool {pool!r}")
            rows.append((lineno, rel, c, d, pool))
    if not rows:
        raise ManifestError(f"manifest {path!r} contains no samples")

    n_classes = max(r[2] for r in rows) + 1
    n_domains = max(r[3] for r in rows) + 1
    seen_classes = {r[2] for r in rows}
    seen_domains = {r[3] for r in rows}
    missing_c = sorted(set(range(n_classes)) - seen_classes)
    missing_d = sorted(set(range(n_domains)) - seen_domains)
    if missing_c:
        raise ManifestError(f"class id gap: no samples for class ids {missing_c}")
    if missing_d:
        raise ManifestError(f"domain id gap: no samples for domain ids {missing_d}")

    by_cell: dict[tuple[int, int, str], list[np.ndarray]] = {}
    uids: dict[tuple[int, int, str], list[int]] = {}
    image_size = None
    for lineno, rel, c, d, pool in rows:
        full = rel if os.path.isabs(rel) else os.path.join(base, rel)
        try:
            with Image.open(full) as img:
                rgb = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
        except FileNotFoundError:
            raise ManifestError(f"row {lineno}: image file not found: {full!r}") from None
        except OSError as exc:
            raise ManifestError(f"row {lineno}: cannot decode {full!r}: {exc}") from exc
        pixels = np.moveaxis(rgb, -1, 0)
        if image_size is None:
            image_size = pixels.shape[1]
        elif pixels.shape[1] != image_size or pixels.shape[2] != image_size:
            raise ManifestError(
                f"row {lineno}: image size {pixels.shape[1:]} differs from "
                f"first sample ({image_size}x{image_size})"
            )
        by_cell.setdefault((c, d, pool), []).append(pixels)
        uids.setdefault((c, d, pool), []).append(derive(0, "manifest", lineno, rel))

    pools = {
        key: _CellPool(np.stack(imgs), np.array(uids[key], dtype=np.uint64))
        for key, imgs in by_cell.items()
    }
    return DatasetGrid(n_classes, n_domains, image_size, pools, synthetic=False)


# -- preprocessing ----------------------------------------------------------


def _resize_weights(src: int, dst: int) -> np.ndarray:
    """Dense [dst, src] bilinear interpolation matrix, half-pixel centres."""
    w = np.zeros((dst, src))
    scale = src / dst
    pos = (np.arange(dst) + 0.5) * scale - 0.5
    lo = np.floor(pos).astype(int)
    frac = pos - lo
    lo_c = np.clip(lo, 0, src - 1)
    hi_c = np.clip(lo + 1, 0, src - 1)
    rows = np.arange(dst)
    np.add.at(w, (rows, lo_c), 1.0 - frac)
    np.add.at(w, (rows, hi_c), frac)
    return w


def bilinear_resize(images: np.ndarray, target_size: int) -> np.ndarray:
    """Bilinear resize of [..., H, W] arrays to [..., target, target]."""
    h, w = images.shape[-2], images.shape[-1]
    wy = _resize_weights(h, target_size)
    wx = _resize_weights(w, target_size)
    out = np.tensordot(images, wy, axes=([images.ndim - 2], [1]))
    # tensordot moved H to the last axis; bring it back before W
    out = np.moveaxis(out, -1, -2)
    out = np.tensordot(out, wx, axes=([out.ndim - 1], [1]))
    return out


def _center_crop(images: np.ndarray) -> np.ndarray:
    h, w = images.shape[-2], images.shape[-1]
    side = min(h, w)
    oy = (h - side) // 2
    ox = (w - side) // 2
    return images[..., oy:oy + side, ox:ox + side]


def _translate_zero_pad(image: np.ndarray, dy: int, dx: int) -> np.ndarray:
    out = np.zeros_like(image)
    size_y, size_x = image.shape[-2], image.shape[-1]
    if dy >= size_y or dx >= size_x:
        return out
    out[..., dy:, dx:] = image[..., :size_y - dy, :size_x - dx]
    return out


def translation_offset(u: float, translate_max: float, size: int) -> int:
    """Pixel offset for one axis: floor(u * translate_max * size)."""
    return int(u * translate_max * size)


def preprocess(sample: Sample, spec: PreprocessSpec, mode: str,
               stream: Stream | None = None) -> Sample:
    """Crop/resize a sample; train mode adds the random zero-padded shift."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    pixels = np.asarray(sample.pixels, dtype=np.float32)
    if spec.center_crop:
        pixels = _center_crop(pixels)
    if pixels.shape[-1] != spec.target_size or pixels.shape[-2] != spec.target_size:
        pixels = bilinear_resize(pixels.astype(np.float64), spec.target_size)
        pixels = np.clip(pixels, 0.0, 1.0).astype(np.float32)
    if mode == "train" and spec.random_translate_max > 0.0:
        if stream is None:
            stream = Stream(derive(spec.augment_seed, "augment", sample.uid))
        dx = translation_offset(stream.float(), spec.random_translate_max, spec.target_size)
        dy = translation_offset(stream.float(), spec.random_translate_max, spec.target_size)
        pixels = _translate_zero_pad(pixels, dy, dx)
    pixels = np.ascontiguousarray(pixels, dtype=np.float32)
    pixels.setflags(write=False)
    return Sample(pixels=pixels, class_id=sample.class_id,
                  domain_id=sample.domain_id, uid=sample.uid)


def preprocess_batch(pixels: np.ndarray, spec: PreprocessSpec, mode: str,
                     stream: Stream | None = None) -> np.ndarray:
    """Vectorized preprocess over [N, C, H, W]; same transform semantics."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    out = np.asarray(pixels, dtype=np.float32)
    if spec.center_crop:
        out = _center_crop(out)
    if out.shape[-1] != spec.target_size or out.shape[-2] != spec.target_size:
        out = np.clip(bilinear_resize(out.astype(np.float64), spec.target_size),
                      0.0, 1.0).astype(np.float32)
    if mode == "train" and spec.random_translate_max > 0.0:
        if stream is None:
            raise ValueError("train-mode batch preprocessing needs a stream")
        n = out.shape[0]
        us = stream.floats(2 * n)
        shifted = np.zeros_like(out)
        for i in range(n):
            dx = translation_offset(us[2 * i], spec.random_translate_max, spec.target_size)
            dy = translation_offset(us[2 * i + 1], spec.random_translate_max, spec.target_size)
            shifted[i] = _translate_zero_pad(out[i], dy, dx)
        out = shifted
    return out
