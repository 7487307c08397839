"""Color prompt augmentation for vehicle rasters.

Detects the dominant body color against a fixed palette and paints a
solid patch of that color into the top-left corner as prior information
for the image encoder. Also owns the raster-to-feature bridge (4x4 block
averages) and PPM (P6) file IO.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DimensionMismatch, EmptyImage, PatchOutOfBounds

IMAGE_SIDE = 32
FEATURE_BLOCKS = 4  # 4x4 grid of 8x8 blocks -> 48 features
DEFAULT_PATCH_SIDE = IMAGE_SIDE // 4


@dataclass(frozen=True)
class Palette:
    """Ordered color table; ids must be 0..n-1 and RGBs unique."""

    entries: tuple[tuple[int, str, tuple[int, int, int]], ...]

    def __post_init__(self):
        if len(self.entries) < 2:
            raise ValueError("palette needs at least 2 entries")
        ids = [e[0] for e in self.entries]
        rgbs = [e[2] for e in self.entries]
        if ids != sorted(set(ids)) or ids != list(range(len(ids))):
            raise ValueError("palette ids must be unique and contiguous from 0")
        if len(set(rgbs)) != len(rgbs):
            raise ValueError("palette RGB values must be unique")

    @property
    def rgb_array(self) -> np.ndarray:
        return np.array([e[2] for e in self.entries], dtype=np.float64)

    def name_of(self, color_id: int) -> str:
        return self.entries[color_id][1]

    def rgb_of(self, color_id: int) -> tuple[int, int, int]:
        return self.entries[color_id][2]

    def id_of(self, name: str) -> int:
        for cid, cname, _ in self.entries:
            if cname == name:
                return cid
        raise KeyError(name)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(e[1] for e in self.entries)


DEFAULT_PALETTE = Palette(entries=(
    (0, "white", (240, 240, 240)),
    (1, "silver", (190, 190, 195)),
    (2, "gray", (128, 128, 128)),
    (3, "black", (20, 20, 20)),
    (4, "red", (200, 30, 30)),
    (5, "blue", (30, 60, 200)),
    (6, "green", (30, 160, 60)),
    (7, "yellow", (230, 200, 40)),
))


@dataclass(frozen=True)
class PatchSpec:
    """Solid square patch anchored at the top-left corner."""

    side: int = DEFAULT_PATCH_SIDE
    fill: tuple[int, int, int] = (0, 0, 0)


def load_palette(path: str | Path) -> Palette:
    records = json.loads(Path(path).read_text())
    entries = tuple((int(r["id"]), str(r["name"]), tuple(int(c) for c in r["rgb"]))
                    for r in records)
    return Palette(entries=entries)


def nearest_palette_ids(pixels: np.ndarray, palette: Palette) -> np.ndarray:
    """Nearest palette id per pixel by squared RGB distance, ties to lowest id."""
    px = np.asarray(pixels, dtype=np.float64).reshape(-1, 3)
    diffs = px[:, None, :] - palette.rgb_array[None, :, :]
    dist = np.einsum("npc,npc->np", diffs, diffs)
    return np.argmin(dist, axis=1)  # argmin takes the first (lowest-id) minimum


def dominant_color(image: np.ndarray, palette: Palette,
                   region_mask: np.ndarray | None = None) -> tuple[int, tuple[int, int, int]]:
    """Modal nearest-palette color over the masked (or whole) image."""
    image = np.asarray(image)
    if image.size == 0:
        raise EmptyImage("image has no pixels")
    if image.ndim != 3 or image.shape[2] != 3:
        raise DimensionMismatch(f"expected HxWx3 raster, got {image.shape}")
    ids = nearest_palette_ids(image, palette)
    if region_mask is not None:
        mask = np.asarray(region_mask, dtype=bool).reshape(-1)
        if mask.shape[0] != ids.shape[0]:
            raise DimensionMismatch("region mask does not match image size")
        ids = ids[mask]
        if ids.size == 0:
            raise EmptyImage("region mask selects no pixels")
    counts = np.bincount(ids, minlength=len(palette.entries))
    cid = int(np.argmax(counts))  # first max -> lowest color_id on ties
    return cid, palette.rgb_of(cid)


def apply_color_patch(image: np.ndarray, rgb: tuple[int, int, int],
                      spec: PatchSpec | None = None) -> np.ndarray:
    """Copy of the image with the top-left side x side block set to rgb."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise DimensionMismatch(f"expected HxWx3 raster, got {image.shape}")
    side = spec.side if spec is not None else DEFAULT_PATCH_SIDE
    if side < 1 or side > image.shape[0] or side > image.shape[1]:
        raise PatchOutOfBounds(f"patch side {side} does not fit in {image.shape[:2]}")
    out = image.copy()
    out[:side, :side, :] = np.asarray(rgb, dtype=image.dtype)
    return out


def image_to_features(image: np.ndarray) -> np.ndarray:
    """4x4 per-channel block means of a 32x32 RGB raster, scaled to [0, 1].

    Feature order: blocks row-major, then r, g, b within each block.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.shape != (IMAGE_SIDE, IMAGE_SIDE, 3):
        raise DimensionMismatch(f"expected {(IMAGE_SIDE, IMAGE_SIDE, 3)}, got {image.shape}")
    b = IMAGE_SIDE // FEATURE_BLOCKS
    blocks = image.reshape(FEATURE_BLOCKS, b, FEATURE_BLOCKS, b, 3)
    means = blocks.mean(axis=(1, 3))  # (4, 4, 3)
    return (means / 255.0).reshape(-1)


def augment_image(image: np.ndarray, palette: Palette,
                  region_mask: np.ndarray | None = None,
                  side: int = DEFAULT_PATCH_SIDE) -> tuple[np.ndarray, int]:
    """Detect the dominant color and paint it as a corner patch."""
    cid, rgb = dominant_color(image, palette, region_mask)
    return apply_color_patch(image, rgb, PatchSpec(side=side, fill=rgb)), cid


def write_ppm(path: str | Path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise DimensionMismatch(f"expected HxWx3 raster, got {image.shape}")
    h, w, _ = image.shape
    header = f"P6\n{w} {h}\n255\n".encode("ascii")
    Path(path).write_bytes(header + image.astype(np.uint8).tobytes())


def read_ppm(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    # header: magic, width, height, maxval, then raw pixels
    parts = []
    pos = 0
    while len(parts) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        parts.append(data[start:pos])
    pos += 1  # single whitespace after maxval
    if parts[0] != b"P6":
        raise ValueError(f"not a P6 ppm file: magic {parts[0]!r}")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise ValueError(f"unsupported maxval {maxval}")
    pixels = np.frombuffer(data[pos:pos + w * h * 3], dtype=np.uint8)
    if pixels.size != w * h * 3:
        raise ValueError("truncated ppm pixel data")
    return pixels.reshape(h, w, 3).copy()
