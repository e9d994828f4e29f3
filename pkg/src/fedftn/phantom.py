"""Synthetic multi-site low-count data.

Each subject is a piecewise-smooth activity volume: an elliptical body with a
slowly varying background, a few ellipsoidal organs and occasionally some
small hot lesions.  Values are expected counts per voxel at full count.

Low-count acquisition is emulated in image space: the full-count volume is
thinned to a fraction ``d * gain`` of its counts by Poisson sampling,
rescaled back, and blurred with the site's point spread function.  The
expectation is the blurred full-count volume and the variance grows as
``1 / d``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .errors import ConfigError, DomainError, ShapeError

BACKGROUND_UPTAKE = 0.5
FWHM_TO_SIGMA = 1.0 / (2.0 * np.sqrt(2.0 * np.log(2.0)))


@dataclass(frozen=True)
class SiteProfile:
    site_id: int
    count_levels: tuple
    blur_fwhm_voxels: float = 2.0
    noise_gain: float = 1.0
    intensity_scale: float = 1.0
    voxel_anisotropy: tuple = (1.0, 1.0, 1.0)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "count_levels", tuple(float(d) for d in self.count_levels))
        object.__setattr__(self, "voxel_anisotropy", tuple(float(a) for a in self.voxel_anisotropy))
        if not self.count_levels:
            raise ConfigError(f"site {self.site_id}: count_levels is empty")
        for d in self.count_levels:
            if not 0 < d <= 1:
                raise ConfigError(f"site {self.site_id}: count level {d} outside (0, 1]")
        if self.blur_fwhm_voxels < 0:
            raise ConfigError(f"site {self.site_id}: blur_fwhm_voxels must be >= 0")
        if self.noise_gain <= 0:
            raise ConfigError(f"site {self.site_id}: noise_gain must be > 0")
        if self.intensity_scale <= 0:
            raise ConfigError(f"site {self.site_id}: intensity_scale must be > 0")
        if len(self.voxel_anisotropy) != 3 or min(self.voxel_anisotropy) <= 0:
            raise ConfigError(f"site {self.site_id}: voxel_anisotropy must be three positive reals")

    @property
    def blur_sigma(self) -> tuple:
        s = self.blur_fwhm_voxels * FWHM_TO_SIGMA
        return tuple(s * a for a in self.voxel_anisotropy)


def default_sites(seed: int = 0) -> list:
    """Three sites with distinct count-level sets, blur, gain and voxel geometry."""
    return [
        SiteProfile(1, (0.05, 0.10, 0.20), 2.0, 1.0, 1.0, (1.0, 1.0, 1.0), seed),
        SiteProfile(2, (0.02, 0.05, 0.10), 3.0, 0.6, 1.3, (1.0, 1.0, 1.25), seed),
        SiteProfile(3, (0.02, 0.05, 0.10), 4.0, 1.4, 0.8, (1.1, 1.1, 1.0), seed),
    ]


@dataclass
class Phantom:
    volume: np.ndarray
    background: np.ndarray
    organs: np.ndarray
    lesions: np.ndarray

    @property
    def body(self) -> np.ndarray:
        return self.background | self.organs | self.lesions


@dataclass
class Sample:
    x: np.ndarray
    y: np.ndarray
    d: float
    site_id: int
    subject_id: int

    def as_triple(self) -> tuple:
        return self.x, self.y, self.d


@dataclass
class SiteDataset:
    profile: SiteProfile
    train: list = field(default_factory=list)
    val: list = field(default_factory=list)
    test: list = field(default_factory=list)

    def split(self, name: str) -> list:
        if name not in ("train", "val", "test"):
            raise ConfigError(f"unknown split {name!r}")
        return getattr(self, name)


def _grid(size):
    axes = [np.linspace(-1.0, 1.0, n) for n in size]
    return np.meshgrid(*axes, indexing="ij")


def _rotation(rng) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    return q * np.sign(np.diag(r))


def _ellipsoid(coords, center, radii, rot) -> np.ndarray:
    pts = np.stack([c - c0 for c, c0 in zip(coords, center)], axis=-1) @ rot
    return (pts / np.asarray(radii)) ** 2 @ np.ones(3) <= 1.0


def generate_phantom(subject_seed: int, size: Sequence[int] = (32, 32, 32)) -> Phantom:
    """Deterministic activity volume with region masks."""
    size = tuple(int(s) for s in size)
    if len(size) != 3 or min(size) < 16:
        raise ConfigError(f"phantom size must be three dims >= 16, got {size}")
    rng = np.random.default_rng(subject_seed)
    coords = _grid(size)
    voxel = 2.0 / np.asarray(size)

    body = _ellipsoid(coords, rng.uniform(-0.05, 0.05, 3), rng.uniform([0.75, 0.6, 0.8], [0.9, 0.8, 0.95]),
                      np.eye(3))
    freq = rng.uniform(0.5, 1.5, size=(2, 3))
    phase = rng.uniform(0, 2 * np.pi, size=(2, 3))
    texture = sum(np.cos(np.pi * freq[i, a] * coords[a] + phase[i, a]) for i in range(2) for a in range(3))
    volume = np.where(body, BACKGROUND_UPTAKE * (1.0 + 0.025 * texture), 0.0)

    organs = np.zeros(size, bool)
    for _ in range(rng.integers(2, 6)):
        center = rng.uniform(-0.45, 0.45, 3) * np.array([0.9, 0.75, 0.9])
        mask = _ellipsoid(coords, center, rng.uniform(0.15, 0.32, 3), _rotation(rng)) & body
        volume[mask] = BACKGROUND_UPTAKE * rng.uniform(2.0, 4.0)
        organs |= mask

    lesions = np.zeros(size, bool)
    for _ in range(rng.integers(0, 4)):
        center = rng.uniform(-0.5, 0.5, 3) * np.array([0.9, 0.75, 0.9])
        radius = rng.uniform(1.5, 3.0) * voxel
        mask = _ellipsoid(coords, center, radius, np.eye(3)) & body
        volume[mask] = BACKGROUND_UPTAKE * rng.uniform(6.0, 10.0)
        lesions |= mask

    organs &= ~lesions
    background = body & ~organs & ~lesions
    return Phantom(volume, background, organs, lesions)


def blur(volume: np.ndarray, profile: SiteProfile) -> np.ndarray:
    if profile.blur_fwhm_voxels == 0:
        return np.asarray(volume, dtype=np.float64).copy()
    return ndimage.gaussian_filter(np.asarray(volume, dtype=np.float64), profile.blur_sigma,
                                   mode="constant", truncate=3.0)


def simulate_low_count(y: np.ndarray, d: float, profile: SiteProfile, noise_seed) -> np.ndarray:
    """Poisson-thinned, rescaled and blurred copy of the full-count volume ``y``."""
    if not 0 < d <= 1:
        raise DomainError(f"count level must lie in (0, 1], got {d}")
    y = np.asarray(y, dtype=np.float64)
    if np.any(y < 0) or not np.all(np.isfinite(y)):
        raise DomainError("full-count volume must be finite and non-negative")
    rng = noise_seed if isinstance(noise_seed, np.random.Generator) else np.random.default_rng(noise_seed)
    rate = d * profile.noise_gain
    counts = rng.poisson(y * rate)
    return blur(counts / rate, profile)


def _subject_seed(profile: SiteProfile, subject: int) -> int:
    return int(np.random.SeedSequence([profile.seed, profile.site_id, subject]).generate_state(1)[0])


def _noise_seed(profile: SiteProfile, subject: int, level_index: int) -> int:
    return int(np.random.SeedSequence([profile.seed, profile.site_id, subject, 1 + level_index])
               .generate_state(1)[0])


def activity(profile: SiteProfile, subject: int, size=(32, 32, 32)) -> np.ndarray:
    """Unblurred tracer distribution of one subject as seen by this site."""
    return profile.intensity_scale * generate_phantom(_subject_seed(profile, subject), size).volume


def full_count_volume(profile: SiteProfile, subject: int, size=(32, 32, 32)) -> np.ndarray:
    """Noiseless full-count image: the activity through the site's own resolution.

    This is the expectation of every low-count draw, so the denoising target
    and its inputs share one scanner geometry.
    """
    return blur(activity(profile, subject, size), profile)


def build_site_dataset(profile: SiteProfile, n_subjects: int, split: Sequence[int],
                       size: Sequence[int] = (32, 32, 32), dtype=np.float32) -> SiteDataset:
    """One sample per (subject, count level), subjects partitioned across splits."""
    split = tuple(int(s) for s in split)
    if len(split) != 3 or min(split) < 0 or sum(split) != n_subjects:
        raise ConfigError(f"split {split} must be three non-negative counts summing to {n_subjects}")
    order = np.random.default_rng(np.random.SeedSequence([profile.seed, profile.site_id, 0xDA7A])
                                  ).permutation(n_subjects)
    bounds = np.cumsum((0,) + split)
    dataset = SiteDataset(profile)
    for name, lo, hi in zip(("train", "val", "test"), bounds[:-1], bounds[1:]):
        for subject in sorted(int(s) for s in order[lo:hi]):
            a = activity(profile, subject, size)
            y = blur(a, profile)
            for li, d in enumerate(profile.count_levels):
                x = simulate_low_count(a, d, profile, _noise_seed(profile, subject, li))
                dataset.split(name).append(
                    Sample(x.astype(dtype), y.astype(dtype), d, profile.site_id, subject))
    return dataset


def augment(x: np.ndarray, y: np.ndarray, crop: int, seed, flip: bool = True,
            divisor: int = 1) -> tuple:
    """Paired random crop of edge ``crop`` followed by random flips along each axis."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    x, y = np.asarray(x), np.asarray(y)
    if x.shape != y.shape:
        raise ShapeError(f"paired volumes differ in shape: {x.shape} vs {y.shape}")
    if crop < 1 or any(crop > s for s in x.shape):
        raise ShapeError(f"crop {crop} does not fit volume {x.shape}")
    if crop % divisor:
        raise ShapeError(f"crop {crop} must be divisible by {divisor}")
    offset = [int(rng.integers(0, s - crop + 1)) for s in x.shape]
    flips = rng.random(3) < 0.5 if flip else np.zeros(3, bool)
    window = tuple(slice(o, o + crop) for o in offset)
    xc, yc = x[window], y[window]
    axes = tuple(int(a) for a in np.flatnonzero(flips))
    if axes:
        xc, yc = np.flip(xc, axes), np.flip(yc, axes)
    return np.ascontiguousarray(xc), np.ascontiguousarray(yc)
