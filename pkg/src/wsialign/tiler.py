"""Tissue masking and patch-grid selection.

Geometry is fixed: 224 px patches on a 192 px stride (32 px overlap), at most
10,240 patches per slide. Mask thresholds are configurable and travel with
every patch manifest.
"""
from __future__ import annotations

import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

from .errors import CorruptStore, ImageTooSmall

PATCH_PX = 224
STRIDE_PX = 192
OVERLAP_PX = 32
BUDGET = 10_240

assert PATCH_PX - STRIDE_PX == OVERLAP_PX


@dataclass(frozen=True)
class MaskParams:
    saturation_threshold: float = 0.07
    intensity_threshold: float = 0.9
    closing_radius: int = 4
    erosion_radius: int = 2


@dataclass(frozen=True)
class TissueMask:
    bitmap: np.ndarray
    params: MaskParams


@dataclass
class PatchSet:
    slide_id: str
    coords: list[tuple[int, int]]
    n_candidates: int
    pixels: np.ndarray | None = None
    patch_px: int = PATCH_PX
    stride_px: int = STRIDE_PX
    budget: int = BUDGET


def disk(radius: int) -> np.ndarray:
    r = int(radius)
    yy, xx = np.mgrid[-r: r + 1, -r: r + 1]
    return (xx * xx + yy * yy) <= r * r


def hsv_saturation(rgb: np.ndarray) -> np.ndarray:
    """HSV saturation ``(max - min) / max`` of an 8-bit RGB array (0 for black)."""
    rgb = np.asarray(rgb)
    hi = rgb.max(axis=-1).astype(np.float32)
    lo = rgb.min(axis=-1).astype(np.float32)
    return np.divide(hi - lo, hi, out=np.zeros_like(hi), where=hi > 0)


def threshold_tissue(image: np.ndarray, params: MaskParams = MaskParams()) -> np.ndarray:
    """Raw per-pixel tissue test before morphology."""
    rgb = np.asarray(image)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got {rgb.shape}")
    sat = hsv_saturation(rgb)
    intensity = rgb.sum(axis=2, dtype=np.float32) / (3 * 255.0)
    return (sat >= params.saturation_threshold) & (intensity < params.intensity_threshold)


def tissue_mask(image: np.ndarray, params: MaskParams = MaskParams()) -> TissueMask:
    """HSV saturation + intensity threshold, then closing, then erosion.

    Closing runs on an edge-replicated pad so the image border does not eat
    into tissue; the erosion treats everything outside the image as
    background, trimming ``erosion_radius`` px at the border.
    """
    raw = threshold_tissue(image, params)
    m = raw
    if params.closing_radius > 0:
        r = params.closing_radius
        padded = np.pad(m, r, mode="edge")
        padded = ndimage.binary_closing(padded, structure=disk(r))
        m = padded[r:-r, r:-r]
    if params.erosion_radius > 0:
        m = ndimage.binary_erosion(m, structure=disk(params.erosion_radius), border_value=0)
    return TissueMask(np.ascontiguousarray(m, dtype=bool), params)


def grid_positions(length: int, patch: int = PATCH_PX, stride: int = STRIDE_PX) -> np.ndarray:
    return np.arange(0, length - patch + 1, stride)


def tile(mask: TissueMask | np.ndarray, min_tissue_fraction: float = 0.05) -> list[tuple[int, int]]:
    """Grid coordinates whose 224 px window holds enough tissue, row-major (y, then x)."""
    bitmap = mask.bitmap if isinstance(mask, TissueMask) else np.asarray(mask, dtype=bool)
    h, w = bitmap.shape
    if h < PATCH_PX or w < PATCH_PX:
        raise ImageTooSmall(f"mask {w}x{h} smaller than one {PATCH_PX} px patch")
    integral = np.zeros((h + 1, w + 1), np.int64)
    integral[1:, 1:] = bitmap.cumsum(0).cumsum(1)
    xs, ys = grid_positions(w), grid_positions(h)
    y0, x0 = np.meshgrid(ys, xs, indexing="ij")
    y1, x1 = y0 + PATCH_PX, x0 + PATCH_PX
    counts = integral[y1, x1] - integral[y0, x1] - integral[y1, x0] + integral[y0, x0]
    need = min_tissue_fraction * PATCH_PX * PATCH_PX
    keep = (counts >= need) & (counts > 0)
    return [(int(x), int(y)) for y, x in zip(y0[keep], x0[keep])]


def sample_budget(coords: Sequence[tuple[int, int]], budget: int = BUDGET, seed: int = 0) -> list[tuple[int, int]]:
    """Uniform sample without replacement down to ``budget``; input order is kept."""
    if budget <= 0:
        raise ValueError("budget must be positive")
    coords = list(coords)
    if len(coords) <= budget:
        return coords
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(len(coords), size=budget, replace=False))
    return [coords[i] for i in idx]


def extract_pixels(image: np.ndarray, coords: Sequence[tuple[int, int]]) -> np.ndarray:
    out = np.empty((len(coords), PATCH_PX, PATCH_PX, 3), np.uint8)
    for i, (x, y) in enumerate(coords):
        out[i] = image[y: y + PATCH_PX, x: x + PATCH_PX]
    return out


def tile_slide(
    slide_id: str,
    image: np.ndarray,
    params: MaskParams = MaskParams(),
    min_tissue_fraction: float = 0.05,
    budget: int = BUDGET,
    seed: int = 0,
    with_pixels: bool = False,
) -> PatchSet:
    mask = tissue_mask(image, params)
    candidates = tile(mask, min_tissue_fraction)
    coords = sample_budget(candidates, budget, seed)
    pixels = extract_pixels(image, coords) if with_pixels else None
    return PatchSet(slide_id, coords, len(candidates), pixels, budget=budget)


# ----------------------------------------------------------------- manifest

_MANIFEST_MAGIC = "# wsialign-patches v1"


def write_manifest(path: str | Path, patch_sets: Iterable[PatchSet], params: MaskParams,
                   min_tissue_fraction: float = 0.05) -> None:
    """Text header line with the mask parameters, then packed little-endian records.

    Record: u16 id length, utf-8 id, u32 n_candidates, u32 n_sampled,
    n_sampled (u32 x, u32 y) pairs.
    """
    header = " ".join(f"{k}={v}" for k, v in asdict(params).items())
    with open(path, "wb") as fh:
        fh.write(f"{_MANIFEST_MAGIC} {header} min_tissue_fraction={min_tissue_fraction}\n".encode())
        for ps in patch_sets:
            sid = ps.slide_id.encode("utf-8")
            fh.write(struct.pack("<H", len(sid)))
            fh.write(sid)
            fh.write(struct.pack("<II", ps.n_candidates, len(ps.coords)))
            fh.write(np.asarray(ps.coords, dtype="<u4").reshape(-1, 2).tobytes())


def read_manifest(path: str | Path) -> tuple[MaskParams, list[PatchSet]]:
    data = Path(path).read_bytes()
    nl = data.find(b"\n")
    if nl < 0 or not data.startswith(_MANIFEST_MAGIC.encode()):
        raise CorruptStore(f"{path}: not a patch manifest")
    fields = dict(kv.split("=", 1) for kv in data[len(_MANIFEST_MAGIC) + 1: nl].decode().split())
    params = MaskParams(
        float(fields["saturation_threshold"]), float(fields["intensity_threshold"]),
        int(fields["closing_radius"]), int(fields["erosion_radius"]),
    )
    pos, out = nl + 1, []
    try:
        while pos < len(data):
            (n,) = struct.unpack_from("<H", data, pos)
            pos += 2
            sid = data[pos: pos + n].decode("utf-8")
            pos += n
            n_cand, n_samp = struct.unpack_from("<II", data, pos)
            pos += 8
            block = data[pos: pos + 8 * n_samp]
            if len(block) != 8 * n_samp:
                raise CorruptStore(f"{path}: truncated record for {sid}")
            pos += 8 * n_samp
            xy = np.frombuffer(block, dtype="<u4").reshape(-1, 2)
            out.append(PatchSet(sid, [(int(x), int(y)) for x, y in xy], n_cand))
    except struct.error as exc:
        raise CorruptStore(f"{path}: truncated manifest") from exc
    return params, out
