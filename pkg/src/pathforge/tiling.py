"""Tissue detection and grid tiling of slide rasters.

Slides are plain 8-bit RGB arrays with a microns-per-pixel value attached.
Tissue is found by thresholding mean HSV saturation over blocks of pixels,
then a non-overlapping grid at the target resolution is kept wherever the
covered tissue fraction is high enough. Tiles are area-averaged down to the
output size and written as JPEG files with a TSV index per slide.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image
from skimage.filters import threshold_otsu

from .errors import InvalidConfigError, InvalidInputError

log = logging.getLogger(__name__)

MAX_MASK_CELLS = 4_000_000
THRESHOLD_MODES = ("fixed-saturation", "otsu-saturation")
# rows of mask cells processed per band, bounds peak memory on big rasters
_BAND_CELLS = 256


@dataclass(frozen=True)
class RasterMeta:
    slide_id: str
    width_px: int
    height_px: int
    mpp: float


@dataclass
class SlideRaster:
    """An in-memory RGB slide. ``pixels`` has shape (height, width, 3), uint8."""

    slide_id: str
    mpp: float
    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.dtype != np.uint8 or px.ndim != 3 or px.shape[2] != 3:
            raise InvalidInputError(
                f"slide {self.slide_id!r}: pixels must be uint8 with shape (h, w, 3), "
                f"got {px.dtype} {px.shape}"
            )
        if not (self.mpp > 0 and math.isfinite(self.mpp)):
            raise InvalidInputError(f"slide {self.slide_id!r}: mpp must be positive, got {self.mpp}")
        self.pixels = np.ascontiguousarray(px)

    @property
    def width_px(self) -> int:
        return self.pixels.shape[1]

    @property
    def height_px(self) -> int:
        return self.pixels.shape[0]

    @property
    def meta(self) -> RasterMeta:
        return RasterMeta(self.slide_id, self.width_px, self.height_px, self.mpp)


@dataclass(frozen=True)
class TilingParams:
    tile_px: int = 224
    target_mpp: float = 0.5
    min_tissue_frac: float = 0.25
    threshold_mode: str = "fixed-saturation"
    saturation_threshold: float = 0.1
    # None picks the smallest factor keeping the mask under MAX_MASK_CELLS
    mask_downsample: int | None = None
    jpeg_quality: int = 95

    def __post_init__(self):
        if self.tile_px < 1:
            raise InvalidConfigError(f"tile_px must be positive, got {self.tile_px}")
        if not 0.0 <= self.min_tissue_frac <= 1.0:
            raise InvalidConfigError(f"min_tissue_frac must lie in [0, 1], got {self.min_tissue_frac}")
        if self.threshold_mode not in THRESHOLD_MODES:
            raise InvalidConfigError(
                f"threshold_mode must be one of {THRESHOLD_MODES}, got {self.threshold_mode!r}"
            )
        if not self.target_mpp > 0:
            raise InvalidConfigError(f"target_mpp must be positive, got {self.target_mpp}")
        if self.mask_downsample is not None and self.mask_downsample < 1:
            raise InvalidConfigError(f"mask_downsample must be >= 1, got {self.mask_downsample}")


@dataclass(frozen=True)
class TissueMask:
    cells: np.ndarray
    downsample_factor: int
    threshold: float

    @property
    def shape(self) -> tuple[int, int]:
        return self.cells.shape


@dataclass(frozen=True)
class TileCoord:
    x: int
    y: int
    size_px: int
    tissue_frac: float = 1.0


@dataclass
class ExtractionResult:
    slide_id: str
    written: list[Path] = field(default_factory=list)
    errors: list[tuple[TileCoord, str]] = field(default_factory=list)


def resample_factor(mpp: float, target_mpp: float) -> int:
    """Integer downsampling factor from slide resolution to target resolution."""
    if target_mpp < mpp * (1 - 1e-9):
        raise InvalidConfigError(
            f"target_mpp {target_mpp} is finer than slide mpp {mpp}; upsampling is not supported"
        )
    ratio = target_mpp / mpp
    factor = round(ratio)
    if factor < 1 or abs(ratio - factor) > 1e-6:
        raise InvalidConfigError(
            f"resample factor {ratio:g} (target_mpp / mpp) is not an integer"
        )
    return int(factor)


def auto_downsample(width: int, height: int, max_cells: int = MAX_MASK_CELLS) -> int:
    f = 1
    while math.ceil(width / f) * math.ceil(height / f) > max_cells:
        f += 1
    return f


def pixel_saturation(pixels: np.ndarray) -> np.ndarray:
    """HSV saturation in [0, 1]; black pixels get zero."""
    mx = pixels.max(axis=-1).astype(np.float64)
    mn = pixels.min(axis=-1).astype(np.float64)
    out = np.zeros_like(mx)
    np.divide(mx - mn, mx, out=out, where=mx > 0)
    return out


def block_mean_saturation(raster: SlideRaster, factor: int) -> np.ndarray:
    """Mean saturation over ``factor`` x ``factor`` pixel blocks (partial blocks at the edges)."""
    h, w = raster.height_px, raster.width_px
    mh, mw = math.ceil(h / factor), math.ceil(w / factor)
    col_starts = np.arange(0, w, factor)
    col_counts = np.diff(np.append(col_starts, w)).astype(np.float64)
    out = np.empty((mh, mw), dtype=np.float64)
    for r0 in range(0, mh, _BAND_CELLS):
        r1 = min(mh, r0 + _BAND_CELLS)
        y0, y1 = r0 * factor, min(h, r1 * factor)
        sat = pixel_saturation(raster.pixels[y0:y1])
        row_starts = np.arange(0, y1 - y0, factor)
        row_counts = np.diff(np.append(row_starts, y1 - y0)).astype(np.float64)
        sums = np.add.reduceat(np.add.reduceat(sat, row_starts, axis=0), col_starts, axis=1)
        out[r0:r1] = sums / np.outer(row_counts, col_counts)
    return out


def detect_tissue(raster: SlideRaster, params: TilingParams = TilingParams()) -> TissueMask:
    """Boolean tissue mask from block-mean HSV saturation.

    In ``otsu-saturation`` mode the threshold comes from Otsu's method over the
    block saturations. When every block has the same saturation Otsu is
    undefined and the fixed ``saturation_threshold`` is used instead.
    """
    if raster.width_px == 0 or raster.height_px == 0:
        raise InvalidInputError(f"slide {raster.slide_id!r} has zero area")
    factor = params.mask_downsample or auto_downsample(raster.width_px, raster.height_px)
    if math.ceil(raster.width_px / factor) * math.ceil(raster.height_px / factor) > MAX_MASK_CELLS:
        raise InvalidConfigError(f"mask_downsample {factor} yields more than {MAX_MASK_CELLS} cells")
    sat = block_mean_saturation(raster, factor)

    threshold = params.saturation_threshold
    if params.threshold_mode == "otsu-saturation":
        if np.ptp(sat) == 0:
            log.info("slide %s: uniform saturation, falling back to fixed threshold", raster.slide_id)
        else:
            threshold = float(threshold_otsu(sat, nbins=256))
    return TissueMask(cells=sat > threshold, downsample_factor=factor, threshold=threshold)


def plan_tiles(mask: TissueMask, raster_meta: RasterMeta | SlideRaster, params: TilingParams = TilingParams()) -> list[TileCoord]:
    """Row-major list of grid tiles whose tissue fraction reaches ``min_tissue_frac``.

    Tissue fraction is the mean of the mask cells a tile touches.
    """
    meta = raster_meta.meta if isinstance(raster_meta, SlideRaster) else raster_meta
    stride = params.tile_px * resample_factor(meta.mpp, params.target_mpp)
    f = mask.downsample_factor

    # summed-area table over mask cells
    sat = np.zeros((mask.shape[0] + 1, mask.shape[1] + 1), dtype=np.int64)
    sat[1:, 1:] = mask.cells.astype(np.int64).cumsum(0).cumsum(1)

    coords = []
    for y in range(0, meta.height_px - stride + 1, stride):
        r0, r1 = y // f, -(-(y + stride) // f)
        for x in range(0, meta.width_px - stride + 1, stride):
            c0, c1 = x // f, -(-(x + stride) // f)
            hits = sat[r1, c1] - sat[r0, c1] - sat[r1, c0] + sat[r0, c0]
            frac = float(hits) / ((r1 - r0) * (c1 - c0))
            if frac >= params.min_tissue_frac:
                coords.append(TileCoord(x, y, stride, frac))
    return coords


def read_tile(raster: SlideRaster, coord: TileCoord, params: TilingParams = TilingParams()) -> np.ndarray:
    """Crop one tile and area-average it down to ``tile_px`` square."""
    x, y, s = coord.x, coord.y, coord.size_px
    if x < 0 or y < 0 or x + s > raster.width_px or y + s > raster.height_px:
        raise InvalidInputError(
            f"tile ({x}, {y}, size {s}) exceeds raster {raster.width_px}x{raster.height_px}"
        )
    factor = resample_factor(raster.mpp, params.target_mpp)
    if s != params.tile_px * factor:
        raise InvalidInputError(f"tile size {s} does not match tile_px {params.tile_px} x factor {factor}")
    crop = raster.pixels[y : y + s, x : x + s]
    if factor == 1:
        return crop.copy()
    blocks = crop.reshape(params.tile_px, factor, params.tile_px, factor, 3)
    return np.rint(blocks.mean(axis=(1, 3))).astype(np.uint8)


def extract_tiles(
    raster: SlideRaster,
    coords: Sequence[TileCoord],
    params: TilingParams,
    root: str | Path,
) -> ExtractionResult:
    """Write tiles to ``<root>/<slide_id>/<x>_<y>.jpg`` plus ``index.tsv``.

    Tiles that fail (out of bounds, wrong size) are logged and recorded in the
    result; the remaining tiles are still written.
    """
    out_dir = Path(root) / raster.slide_id
    out_dir.mkdir(parents=True, exist_ok=True)
    result = ExtractionResult(raster.slide_id)
    rows = ["x\ty\ttissue_frac"]
    for coord in coords:
        try:
            tile = read_tile(raster, coord, params)
        except InvalidInputError as exc:
            log.warning("slide %s: %s", raster.slide_id, exc)
            result.errors.append((coord, str(exc)))
            continue
        path = out_dir / f"{coord.x}_{coord.y}.jpg"
        Image.fromarray(tile).save(path, format="JPEG", quality=params.jpeg_quality)
        result.written.append(path)
        rows.append(f"{coord.x}\t{coord.y}\t{coord.tissue_frac:.6f}")
    (out_dir / "index.tsv").write_text("\n".join(rows) + "\n")
    return result


def read_tile_index(path: str | Path) -> list[TileCoord]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].split("\t") != ["x", "y", "tissue_frac"]:
        raise InvalidInputError(f"{path}: missing x/y/tissue_frac header")
    return [
        TileCoord(int(x), int(y), 0, float(frac))
        for x, y, frac in (line.split("\t") for line in lines[1:] if line)
    ]


# --- synthetic slides -------------------------------------------------------

DEFAULT_STAINS = ((200, 90, 170), (150, 60, 160), (225, 140, 190))


@dataclass(frozen=True)
class SynthSlideSpec:
    slide_id: str = "synthetic"
    width: int = 2048
    height: int = 2048
    mpp: float = 0.5
    coverage: float = 0.3
    n_blobs: int = 4
    stains: tuple[tuple[int, int, int], ...] = DEFAULT_STAINS
    noise: int = 8
    seed: int = 0


def synth_blobs(spec: SynthSlideSpec) -> list[tuple[float, float, float]]:
    """Non-overlapping discs ``(cx, cy, r)`` whose total area is ``coverage`` of the raster.

    Discs sit one per cell of a jittered grid, so their union area is exactly
    ``n_blobs * pi * r**2``.
    """
    if spec.width > 8192 or spec.height > 8192 or spec.width < 1 or spec.height < 1:
        raise InvalidInputError(f"synthetic slide must be between 1 and 8192 px per side")
    if spec.coverage <= 0 or spec.n_blobs == 0:
        return []
    rng = np.random.default_rng(spec.seed)
    cols = math.ceil(math.sqrt(spec.n_blobs))
    rows = math.ceil(spec.n_blobs / cols)
    cw, ch = spec.width / cols, spec.height / rows
    r = math.sqrt(spec.coverage * spec.width * spec.height / (spec.n_blobs * math.pi))
    if 2 * r > min(cw, ch):
        raise InvalidInputError(
            f"coverage {spec.coverage} with {spec.n_blobs} blobs does not fit without overlap"
        )
    blobs = []
    for k in range(spec.n_blobs):
        gx, gy = k % cols, k // cols
        cx = gx * cw + r + rng.uniform(0, cw - 2 * r)
        cy = gy * ch + r + rng.uniform(0, ch - 2 * r)
        blobs.append((cx, cy, r))
    return blobs


def synth_slide(spec: SynthSlideSpec = SynthSlideSpec()) -> SlideRaster:
    """White raster with stained discs from :func:`synth_blobs`; deterministic in ``spec.seed``."""
    blobs = synth_blobs(spec)
    pixels = np.full((spec.height, spec.width, 3), 255, dtype=np.uint8)
    rng = np.random.default_rng([spec.seed, 1])
    for k, (cx, cy, r) in enumerate(blobs):
        x0, x1 = max(0, int(cx - r)), min(spec.width, int(math.ceil(cx + r)) + 1)
        y0, y1 = max(0, int(cy - r)), min(spec.height, int(math.ceil(cy + r)) + 1)
        yy, xx = np.mgrid[y0:y1, x0:x1]
        inside = (xx + 0.5 - cx) ** 2 + (yy + 0.5 - cy) ** 2 <= r * r
        color = np.asarray(spec.stains[k % len(spec.stains)], dtype=np.int16)
        jitter = rng.integers(-spec.noise, spec.noise + 1, size=(y1 - y0, x1 - x0, 3), dtype=np.int16)
        patch = np.clip(color + jitter, 0, 255).astype(np.uint8)
        region = pixels[y0:y1, x0:x1]
        region[inside] = patch[inside]
    return SlideRaster(spec.slide_id, spec.mpp, pixels)


# --- slide files --------------------------------------------------------------


def write_slide(raster: SlideRaster, path: str | Path, organ: str = "unknown") -> Path:
    """Save a raster as lossless PNG with a ``key=value`` ``.meta`` sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(raster.pixels).save(path, format="PNG")
    sidecar = path.with_suffix(".meta")
    sidecar.write_text(f"slide_id={raster.slide_id}\nmpp={raster.mpp!r}\norgan={organ}\n")
    return sidecar


def read_slide_meta(path: str | Path) -> dict[str, str]:
    sidecar = Path(path).with_suffix(".meta")
    if not sidecar.exists():
        raise InvalidInputError(f"missing slide metadata sidecar: {sidecar}")
    meta = {}
    for n, line in enumerate(sidecar.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise InvalidInputError(f"{sidecar}:{n}: expected key=value")
        meta[key.strip()] = value.strip()
    for key in ("slide_id", "mpp"):
        if key not in meta:
            raise InvalidInputError(f"{sidecar}: missing key {key!r}")
    return meta


def read_slide(path: str | Path) -> SlideRaster:
    meta = read_slide_meta(path)
    with Image.open(path) as img:
        pixels = np.asarray(img.convert("RGB"))
    return SlideRaster(meta["slide_id"], float(meta["mpp"]), pixels)
