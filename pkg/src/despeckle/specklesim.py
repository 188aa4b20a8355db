"""Synthetic B-mode speckle images standing in for the two probe data sets.

A tissue phantom (echogenicity map) modulates circular complex Gaussian
scatterers on a grid ``oversample`` times finer than the output pixels. The
field is filtered by an anisotropic Gaussian PSF, detected (magnitude),
integrated over each output pixel, and log-compressed into [0, 1].

Rows are the axial direction, columns the lateral direction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import fftconvolve

from .imageio import Image, atomic_write_bytes, write_image
from .tensorcore import DimensionError

RAYLEIGH_SNR = math.sqrt(math.pi / (4 - math.pi))


class PlacementError(RuntimeError):
    """Inclusions could not be placed without overlap."""


@dataclass(frozen=True)
class PsfProfile:
    axial_sigma: float
    lateral_sigma: float
    label: str

    def __post_init__(self):
        if self.axial_sigma <= 0 or self.lateral_sigma <= 0:
            raise ValueError("PSF sigmas must be positive")
        if self.label not in ("low_quality", "high_quality"):
            raise ValueError(f"unknown profile label {self.label!r}")

    def support(self) -> int:
        """Largest PSF extent in output pixels."""
        return 2 * math.ceil(3 * max(self.axial_sigma, self.lateral_sigma)) + 1


# Small aperture: coarse lateral resolution. Large aperture: speckle finer than a pixel.
LOW_QUALITY = PsfProfile(axial_sigma=0.5, lateral_sigma=1.5, label="low_quality")
HIGH_QUALITY = PsfProfile(axial_sigma=0.25, lateral_sigma=0.25, label="high_quality")


def check_profile_pair(low: PsfProfile, high: PsfProfile) -> None:
    if not low.lateral_sigma > high.lateral_sigma:
        raise ValueError("low-quality lateral sigma must exceed the high-quality one")


@dataclass(frozen=True)
class Inclusion:
    center: tuple[float, float]
    axes: tuple[float, float]
    contrast: float


@dataclass
class Phantom:
    echogenicity: np.ndarray
    inclusions: list[Inclusion] = field(default_factory=list)
    seed: int = 0
    background: float = 0.5

    @property
    def size(self) -> int:
        return self.echogenicity.shape[0]

    def clear_region(self) -> tuple[int, int, int, int]:
        """Central square (y, x, h, w) kept free of inclusions; a quarter of the area."""
        s = self.size
        return s // 4, s // 4, s // 2, s // 2


_CONTRASTS = np.round(np.linspace(0.1, 1.0, 10), 2)


def make_phantom(size: int, n_inclusions: int, seed: int, background: float = 0.5,
                 max_tries: int = 500) -> Phantom:
    """Constant background with ``n_inclusions`` disjoint elliptical inclusions.

    Inclusion contrasts are distinct and at least 0.1 away from each other and
    from the background. The central quarter of the image is never covered.
    """
    if size < 64:
        raise DimensionError(f"phantom size must be >= 64, got {size}")
    if not 0.1 <= background <= 1.0:
        raise ValueError("background echogenicity must lie in [0.1, 1]")
    rng = np.random.default_rng(seed)
    echo = np.full((size, size), background, dtype=np.float64)
    candidates = [c for c in _CONTRASTS if abs(c - background) >= 0.1 - 1e-9]
    if n_inclusions > len(candidates):
        raise PlacementError(f"at most {len(candidates)} distinct contrasts are available")
    contrasts = rng.choice(candidates, size=n_inclusions, replace=False)
    q0, q1 = size / 4, 3 * size / 4
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    placed: list[Inclusion] = []
    for contrast in contrasts:
        for _ in range(max_tries):
            ay, ax = rng.uniform(size / 20, size / 8, size=2)
            r = max(ay, ax)
            cy, cx = rng.uniform(r + 1, size - r - 1, size=2)
            # keep clear of the central square (distance from center to the square)
            dy = max(q0 - cy, 0.0, cy - q1)
            dx = max(q0 - cx, 0.0, cx - q1)
            if math.hypot(dy, dx) <= r + 2:
                continue
            if any(math.hypot(cy - o.center[0], cx - o.center[1]) <= r + max(o.axes) + 2
                   for o in placed):
                continue
            placed.append(Inclusion((cy, cx), (ay, ax), float(contrast)))
            break
        else:
            raise PlacementError(f"could not place inclusion {len(placed) + 1} of {n_inclusions}")
    for inc in placed:
        (cy, cx), (ay, ax) = inc.center, inc.axes
        inside = ((yy - cy) / ay) ** 2 + ((xx - cx) / ax) ** 2 <= 1.0
        echo[inside] = inc.contrast
    return Phantom(echo, placed, seed, background)


def psf_kernel(profile: PsfProfile, oversample: int) -> np.ndarray:
    """Gaussian PSF on the fine grid, scaled to unit energy (sum of squares 1)."""
    sa = profile.axial_sigma * oversample
    sl = profile.lateral_sigma * oversample
    ra, rl = math.ceil(3 * sa), math.ceil(3 * sl)
    y = np.arange(-ra, ra + 1)[:, None]
    x = np.arange(-rl, rl + 1)[None, :]
    h = np.exp(-0.5 * (y / sa) ** 2 - 0.5 * (x / sl) ** 2)
    return h / np.sqrt((h ** 2).sum())


def simulate_envelope(phantom: Phantom, psf: PsfProfile, seed: int, oversample: int = 4) -> np.ndarray:
    """Detected envelope on the fine grid; its mean square equals the echogenicity."""
    if phantom.size < 4 * psf.support():
        raise DimensionError(
            f"phantom size {phantom.size} is smaller than 4x the PSF support {psf.support()}")
    rng = np.random.default_rng(seed)
    n = phantom.size * oversample
    scat = (rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))) / math.sqrt(2)
    amp = np.sqrt(np.repeat(np.repeat(phantom.echogenicity, oversample, 0), oversample, 1))
    field_ = fftconvolve(scat * amp, psf_kernel(psf, oversample), mode="same")
    return np.abs(field_)


def integrate_pixels(envelope: np.ndarray, oversample: int) -> np.ndarray:
    n = envelope.shape[0] // oversample
    return envelope.reshape(n, oversample, n, oversample).mean(axis=(1, 3))


def log_compress(envelope: np.ndarray, dynamic_range_db: float = 50.0,
                 headroom_db: float = 10.0) -> np.ndarray:
    """Fixed display mapping: [headroom - range, headroom] dB onto [0, 1]."""
    db = 20.0 * np.log10(np.maximum(envelope, 1e-12))
    return np.clip((db - (headroom_db - dynamic_range_db)) / dynamic_range_db, 0.0, 1.0)


def simulate_speckle(phantom: Phantom, psf: PsfProfile, seed: int, oversample: int = 4,
                     dynamic_range_db: float = 50.0) -> Image:
    env = simulate_envelope(phantom, psf, seed, oversample)
    pixels = log_compress(integrate_pixels(env, oversample), dynamic_range_db)
    return Image(pixels.astype(np.float32), psf.label)


def lateral_correlation_width(image: np.ndarray, level: float = 0.5) -> float:
    """Lag (pixels, linearly interpolated) at which the mean lateral autocorrelation falls to ``level``."""
    z = image - image.mean(axis=1, keepdims=True)
    spec = np.fft.rfft(z, n=2 * z.shape[1], axis=1)
    acf = np.fft.irfft(np.abs(spec) ** 2, axis=1)[:, : z.shape[1]].mean(axis=0)
    acf = acf / acf[0]
    below = np.nonzero(acf < level)[0]
    if below.size == 0:
        return float(z.shape[1])
    k = int(below[0])
    return float(k - 1 + (acf[k - 1] - level) / (acf[k - 1] - acf[k]))


def make_dataset(n_images: int, profile: PsfProfile, out_dir: str | Path, seed: int,
                 size: int = 128, max_inclusions: int = 3, fmt: str = "pgm") -> list[tuple[str, int, str]]:
    """Write ``n_images`` simulated images and ``manifest.txt`` into ``out_dir``.

    Returns the manifest entries ``(filename, image_seed, label)``.
    """
    if n_images < 1:
        raise ValueError("n_images must be >= 1")
    if fmt not in ("pgm", "png"):
        raise ValueError(f"unknown image format {fmt!r}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    image_seeds = rng.integers(0, 2**31 - 1, size=n_images)
    entries = []
    for i, s in enumerate(image_seeds):
        s = int(s)
        k = int(np.random.default_rng(s).integers(0, max_inclusions + 1))
        phantom = make_phantom(size, k, s)
        img = simulate_speckle(phantom, profile, s + 1)
        name = f"{profile.label}_{i:04d}.{fmt}"
        write_image(out / name, img.pixels)
        entries.append((name, s, profile.label))
    write_manifest(out / "manifest.txt", entries)
    return entries


def write_manifest(path: Path, entries: list[tuple[str, int, str]]) -> None:
    text = "".join(f"{name}\t{seed}\t{label}\n" for name, seed, label in entries)
    atomic_write_bytes(path, text.encode())


def read_manifest(path: str | Path) -> list[tuple[str, int, str]]:
    entries = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ValueError(f"{path}:{lineno}: expected 3 tab-separated fields")
        entries.append((parts[0], int(parts[1]), parts[2]))
    return entries
