"""Patch extraction, random crops, the generated-sample replay buffer and D minibatches."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .imageio import Image, read_image
from .specklesim import read_manifest
from .tensorcore import ContractError, DimensionError


@dataclass
class PatchSet:
    patches: list[np.ndarray]
    size: int
    quality: str
    offsets: list[tuple[str | None, int, int]] = field(default_factory=list)
    manifest: str | None = None

    def __len__(self) -> int:
        return len(self.patches)

    def stack(self, idx=None) -> np.ndarray:
        """Patches as a float32 [N,1,size,size] array."""
        sel = self.patches if idx is None else [self.patches[i] for i in idx]
        return np.stack(sel)[:, None].astype(np.float32)


def _window_starts(length: int, size: int, stride: int) -> list[int]:
    starts = list(range(0, length - size + 1, stride))
    if starts[-1] != length - size:
        starts.append(length - size)  # clamp a final window to the edge
    return starts


def extract_patches(image: Image, size: int, overlap_fraction: float = 0.5) -> PatchSet:
    """Row-major moving-window patches with the given fractional overlap."""
    if not 0 <= overlap_fraction < 1:
        raise ValueError("overlap_fraction must lie in [0, 1)")
    h, w = image.shape
    if h < size or w < size:
        raise DimensionError(f"image {image.shape} smaller than patch size {size}")
    stride = max(1, int(round(size * (1 - overlap_fraction))))
    ps = PatchSet([], size, image.quality)
    for y in _window_starts(h, size, stride):
        for x in _window_starts(w, size, stride):
            ps.patches.append(image.pixels[y:y + size, x:x + size].copy())
            ps.offsets.append((image.source, y, x))
    return ps


def extract_patch_set(images: list[Image], size: int, overlap_fraction: float = 0.5) -> PatchSet:
    if not images:
        raise ValueError("no images to extract patches from")
    out = PatchSet([], size, images[0].quality)
    for img in images:
        ps = extract_patches(img, size, overlap_fraction)
        out.patches.extend(ps.patches)
        out.offsets.extend(ps.offsets)
    return out


def random_crop(image: Image, size: int, rng: np.random.Generator) -> Image:
    h, w = image.shape
    if h < size or w < size:
        raise DimensionError(f"image {image.shape} smaller than crop size {size}")
    y = int(rng.integers(0, h - size + 1))
    x = int(rng.integers(0, w - size + 1))
    return Image(image.pixels[y:y + size, x:x + size].copy(), image.quality, image.source)


def random_crop_batch(images: list[Image], size: int, batch: int, rng: np.random.Generator) -> np.ndarray:
    """``batch`` crops from randomly chosen images, as float32 [batch,1,size,size]."""
    idx = rng.integers(0, len(images), size=batch)
    return np.stack([random_crop(images[i], size, rng).pixels for i in idx])[:, None].astype(np.float32)


def load_image_set(directory: str | Path, quality: str) -> list[Image]:
    """Images listed in ``directory/manifest.txt``, in manifest order."""
    directory = Path(directory)
    return [read_image(directory / name, quality) for name, _, _ in read_manifest(directory / "manifest.txt")]


class ReplayBuffer:
    """Bounded pool of earlier generator outputs mixed into discriminator batches."""

    def __init__(self, capacity: int = 200, seed: int = 0):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.pool: list[np.ndarray] = []
        self.rng = np.random.default_rng(seed)

    def __len__(self) -> int:
        return len(self.pool)

    def sample(self, k: int) -> list[np.ndarray]:
        k = min(k, len(self.pool))
        if k == 0:
            return []
        idx = self.rng.choice(len(self.pool), size=k, replace=False)
        return [self.pool[i] for i in idx]


def buffer_insert(buf: ReplayBuffer, patches, quality: str = "generated") -> ReplayBuffer:
    """Append while below capacity, then overwrite one random victim per new patch."""
    if quality != "generated":
        raise ContractError("only generator outputs may enter the replay buffer")
    for p in patches:
        p = np.array(p, dtype=np.float32)
        if len(buf.pool) < buf.capacity:
            buf.pool.append(p)
        else:
            buf.pool[int(buf.rng.integers(0, buf.capacity))] = p
    return buf


@dataclass
class DMinibatch:
    images: np.ndarray   # [B,1,H,W]
    labels: np.ndarray   # 1 real, 0 generated
    n_real: int
    n_fresh: int
    n_buffered: int


def assemble_d_minibatch(buf: ReplayBuffer, real_set, fresh_fakes: np.ndarray, batch: int,
                         rng: np.random.Generator) -> DMinibatch:
    """Half real patches, a quarter fresh generator outputs, a quarter from the buffer.

    ``real_set`` is a PatchSet or a [M,1,H,W] array. While the buffer holds fewer
    than ``batch // 4`` patches the shortfall is taken from ``fresh_fakes``.
    """
    if batch % 4:
        raise ContractError(f"discriminator batch {batch} is not divisible by 4")
    quarter = batch // 4
    reals = real_set.stack() if isinstance(real_set, PatchSet) else np.asarray(real_set)
    if len(reals) == 0:
        raise ContractError("real set is empty")
    buffered = buf.sample(quarter)
    n_fresh = batch // 2 - len(buffered)
    if len(fresh_fakes) < n_fresh:
        raise ContractError(f"need {n_fresh} fresh fakes, got {len(fresh_fakes)}")
    half = batch // 2
    real_idx = rng.choice(len(reals), size=half, replace=len(reals) < half)
    parts = [reals[real_idx], np.asarray(fresh_fakes[:n_fresh], dtype=np.float32)]
    if buffered:
        parts.append(np.stack(buffered).reshape(-1, *reals.shape[1:]))
    images = np.concatenate(parts).astype(np.float32)
    labels = np.concatenate([np.ones(batch // 2), np.zeros(batch // 2)]).astype(np.float32)
    return DMinibatch(images, labels, batch // 2, n_fresh, len(buffered))

