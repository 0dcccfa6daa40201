"""Frozen patch encoder, 2-D sinusoidal position codes, and the embedding store."""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import BadPatchShape, CorruptStore, VersionMismatch
from .tiler import BUDGET, PATCH_PX, STRIDE_PX, hsv_saturation

EMBED_DIM = 384
POS_BASE = 10_000.0
N_STATS = 6
ENCODER_SEED = 384_2023

STORE_MAGIC = b"WSIE"
STORE_VERSION = 1


@dataclass
class PatchEmbedding:
    matrix: np.ndarray  # (n, 384) float32
    coords: np.ndarray  # (n, 2) uint32, pixel (x, y)
    slide_id: str

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float32)
        self.coords = np.asarray(self.coords, dtype=np.uint32).reshape(-1, 2)
        if self.matrix.ndim != 2 or self.matrix.shape[0] != self.coords.shape[0]:
            raise BadPatchShape(f"matrix {self.matrix.shape} does not match coords {self.coords.shape}")
        if self.matrix.shape[0] > BUDGET:
            raise BadPatchShape(f"{self.matrix.shape[0]} patches exceeds budget {BUDGET}")


class ToyPatchEncoder:
    """Seeded random projection of six pooled patch statistics, then tanh.

    The statistics are the mean R, G, B of tissue pixels, the tissue fraction,
    the intensity standard deviation, and the mean absolute first difference
    (a crude high-frequency energy). Weights are drawn once from a fixed seed
    and never updated.
    """

    def __init__(self, dim: int = EMBED_DIM, seed: int = ENCODER_SEED):
        rng = np.random.default_rng(seed)
        self.dim = dim
        self.weight = rng.standard_normal((N_STATS, dim)) * (2.0 / np.sqrt(N_STATS))
        self.bias = rng.uniform(-0.5, 0.5, dim)

    @staticmethod
    def statistics(patches: np.ndarray) -> np.ndarray:
        patches = np.asarray(patches)
        if patches.ndim == 3:
            patches = patches[None]
        if patches.ndim != 4 or patches.shape[1:] != (PATCH_PX, PATCH_PX, 3):
            raise BadPatchShape(f"expected (n, {PATCH_PX}, {PATCH_PX}, 3), got {patches.shape}")
        x = patches.astype(np.float64) / 255.0
        intensity = x.mean(axis=3)
        sat = hsv_saturation(patches)
        tissue = (sat >= 0.07) & (intensity < 0.9)
        n_t = tissue.sum(axis=(1, 2))
        frac = n_t / float(PATCH_PX * PATCH_PX)
        w = np.where(n_t[:, None, None] > 0, tissue, True).astype(np.float64)
        mean_rgb = (x * w[..., None]).sum(axis=(1, 2)) / w.sum(axis=(1, 2))[:, None]
        std_i = intensity.std(axis=(1, 2))
        hf = 0.5 * (np.abs(np.diff(intensity, axis=1)).mean(axis=(1, 2))
                    + np.abs(np.diff(intensity, axis=2)).mean(axis=(1, 2)))
        return np.column_stack([mean_rgb, frac, std_i, hf])

    def project(self, stats: np.ndarray) -> np.ndarray:
        # center the statistics around typical ranges before projecting
        z = (stats - np.array([0.5, 0.5, 0.5, 0.5, 0.1, 0.05])) * np.array([4.0, 4.0, 4.0, 2.0, 10.0, 20.0])
        return np.tanh(z @ self.weight + self.bias).astype(np.float32)

    def __call__(self, patches: np.ndarray) -> np.ndarray:
        return self.project(self.statistics(patches))


_DEFAULT_ENCODER: ToyPatchEncoder | None = None


def default_encoder() -> ToyPatchEncoder:
    global _DEFAULT_ENCODER
    if _DEFAULT_ENCODER is None:
        _DEFAULT_ENCODER = ToyPatchEncoder()
    return _DEFAULT_ENCODER


def embed_patches(pixels: np.ndarray, coords=None, slide_id: str = "", encoder=None) -> PatchEmbedding:
    encoder = encoder or default_encoder()
    pixels = np.asarray(pixels)
    matrix = encoder(pixels)
    if coords is None:
        coords = np.zeros((matrix.shape[0], 2), np.uint32)
    return PatchEmbedding(matrix, coords, slide_id)


def pos_encode(coords, d: int = EMBED_DIM, base: float = POS_BASE) -> np.ndarray:
    """Sine/cosine codes; first ``d/2`` dims encode x, the rest encode y.

    Within each half, dims ``2i`` and ``2i+1`` hold ``sin(p / base**(2i/h))``
    and ``cos(...)`` with ``h = d/2``. Callers choose the coordinate units.
    """
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
    if (coords < 0).any():
        raise ValueError("coordinates must be nonnegative")
    half = d // 2
    inv = base ** (-np.arange(0, half, 2) / half)
    out = np.empty((coords.shape[0], d), np.float64)
    for axis in range(2):
        ang = coords[:, axis: axis + 1] * inv[None, :]
        out[:, axis * half: (axis + 1) * half: 2] = np.sin(ang)
        out[:, axis * half + 1: (axis + 1) * half: 2] = np.cos(ang)
    return out


def grid_units(coords) -> np.ndarray:
    return np.asarray(coords, dtype=np.float64).reshape(-1, 2) / STRIDE_PX


def wsi_input(emb: PatchEmbedding) -> np.ndarray:
    """Patch embeddings with position codes added, as fed to the Q-Former."""
    return (emb.matrix.astype(np.float64) + pos_encode(grid_units(emb.coords))).astype(np.float32)


# -------------------------------------------------------------------- store

_HEADER = struct.Struct("<4sHIIH")


def store_bytes(emb: PatchEmbedding) -> bytes:
    sid = emb.slide_id.encode("utf-8")
    n, d = emb.matrix.shape
    body = (
        _HEADER.pack(STORE_MAGIC, STORE_VERSION, n, d, len(sid))
        + sid
        + np.ascontiguousarray(emb.matrix, dtype="<f4").tobytes()
        + np.ascontiguousarray(emb.coords, dtype="<u4").tobytes()
    )
    return body + struct.pack("<I", zlib.crc32(body))


def write_embeddings(path: str | Path, emb: PatchEmbedding) -> None:
    Path(path).write_bytes(store_bytes(emb))


def read_embeddings(path: str | Path) -> PatchEmbedding:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size + 4:
        raise CorruptStore(f"{path}: truncated")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    magic, version, n, d, id_len = _HEADER.unpack_from(body)
    if magic != STORE_MAGIC:
        raise CorruptStore(f"{path}: bad magic {magic!r}")
    if zlib.crc32(body) != crc:
        raise CorruptStore(f"{path}: checksum mismatch")
    if version != STORE_VERSION:
        raise VersionMismatch(f"{path}: store version {version}, expected {STORE_VERSION}")
    pos = _HEADER.size
    sid = body[pos: pos + id_len].decode("utf-8")
    pos += id_len
    expected = pos + 4 * n * d + 8 * n
    if len(body) != expected:
        raise CorruptStore(f"{path}: payload size {len(body)} != {expected}")
    matrix = np.frombuffer(body, dtype="<f4", count=n * d, offset=pos).reshape(n, d).copy()
    coords = np.frombuffer(body, dtype="<u4", count=2 * n, offset=pos + 4 * n * d).reshape(n, 2).copy()
    return PatchEmbedding(matrix, coords, sid)
