#!/usr/bin/env python3
"""
Seeded synthetic B-mode/SWE phantom generator.

A true lesion is hypoechoic in B-mode AND stiff (bright) in SWE. Distractors
carry only one of the two cues, so the label is decidable only by combining
both modalities.
"""

from dataclasses import dataclass
from pathlib import Path
from typing import List, Literal, Optional, Tuple

import numpy as np
from loguru import logger
from pydantic import BaseModel, ConfigDict, field_validator, model_validator

from .errors import ConfigError, DataError
from .videodata import (
    DatasetManifest,
    TrusSample,
    _round_half_up,
    normalize_intensities,
    save_manifest,
    save_sample,
)

MANIFEST_NAME = "manifest.json"
TAPER_VOXELS = 2.0

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15

LesionKind = Literal["true_lesion", "bmode_only_distractor", "swe_only_distractor"]


class PhantomConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    n_samples: int = 160
    positive_fraction: float = 0.5
    dims: Tuple[int, int, int, int] = (16, 32, 32, 1)
    speckle_scale: float = 0.3
    bmode_contrast: float = 0.4
    swe_stiffness_gain: float = 1.0
    lesion_radius_range: Tuple[float, float] = (0.12, 0.2)
    distractor_rate: float = 0.5
    master_seed: int = 0

    @field_validator("n_samples")
    @classmethod
    def _positive_count(cls, v):
        if v < 1:
            raise ValueError("n_samples must be >= 1")
        return v

    @field_validator("positive_fraction")
    @classmethod
    def _open_unit(cls, v):
        if not 0.0 < v < 1.0:
            raise ValueError("positive_fraction must lie in (0, 1)")
        return v

    @field_validator("dims")
    @classmethod
    def _min_dims(cls, v):
        if any(d < m for d, m in zip(v, (4, 8, 8, 1))):
            raise ValueError(f"dims must be at least (4, 8, 8, 1), got {v}")
        return v

    @field_validator("speckle_scale", "swe_stiffness_gain")
    @classmethod
    def _strictly_positive(cls, v):
        if v <= 0:
            raise ValueError("must be > 0")
        return v

    @field_validator("bmode_contrast")
    @classmethod
    def _contrast_range(cls, v):
        if not 0.0 < v < 1.0:
            raise ValueError("bmode_contrast must lie in (0, 1)")
        return v

    @field_validator("distractor_rate")
    @classmethod
    def _rate_range(cls, v):
        if not 0.0 <= v <= 1.0:
            raise ValueError("distractor_rate must lie in [0, 1]")
        return v

    @model_validator(mode="after")
    def _radius_range(self):
        lo, hi = self.lesion_radius_range
        if not 0.0 < lo <= hi:
            raise ValueError(f"lesion_radius_range must satisfy 0 < min <= max, got {self.lesion_radius_range}")
        return self

    @property
    def n_positive(self) -> int:
        return _round_half_up(self.n_samples * self.positive_fraction)


@dataclass(frozen=True)
class LesionSpec:
    center: Tuple[float, float, float]
    radii: Tuple[float, float, float]
    kind: LesionKind

    @property
    def darkens_bmode(self) -> bool:
        return self.kind in ("true_lesion", "bmode_only_distractor")

    @property
    def stiffens_swe(self) -> bool:
        return self.kind in ("true_lesion", "swe_only_distractor")


def _splitmix64(x: int) -> int:
    x = (x + _GOLDEN) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def derive_sample_seed(master_seed: int, index: int) -> int:
    """Counter-based per-sample seed; a bijective mix of (master, index) so order never matters."""
    if index < 0:
        raise ConfigError(f"index must be >= 0, got {index}")
    state = _splitmix64(master_seed & _MASK64)
    return _splitmix64((state + index * _GOLDEN) & _MASK64)


def _check_geometry(config: PhantomConfig):
    T, H, W, _ = config.dims
    r_max = config.lesion_radius_range[1] * min(H, W)
    if 2 * r_max + 1 > min(H, W) - 1:
        raise ConfigError(
            f"lesion radius up to {r_max:.2f} voxels does not fit inside a {H}x{W} frame"
        )


def _sample_lesion(rng: np.random.Generator, config: PhantomConfig, kind: LesionKind) -> LesionSpec:
    T, H, W, _ = config.dims
    lo, hi = config.lesion_radius_range
    plane = min(H, W)
    rh = rng.uniform(lo, hi) * plane
    rw = rng.uniform(lo, hi) * plane
    # temporal extent covers at least half of the frames
    rt_lo = max(T / 4.0, 0.5)
    rt_hi = max(rt_lo, (T - 1) / 2.0 - 0.5)
    rt = rng.uniform(rt_lo, rt_hi)
    center = (
        rng.uniform(rt, T - 1 - rt),
        rng.uniform(rh, H - 1 - rh),
        rng.uniform(rw, W - 1 - rw),
    )
    return LesionSpec(center=center, radii=(rt, rh, rw), kind=kind)


def _taper(lesion: LesionSpec, shape: Tuple[int, int, int]) -> np.ndarray:
    """Raised-cosine ellipsoid profile: 1 in the core, falling to 0 across the outer band."""
    t, h, w = np.meshgrid(*(np.arange(n, dtype=np.float64) for n in shape), indexing="ij")
    ct, ch, cw = lesion.center
    rt, rh, rw = lesion.radii
    rho = np.sqrt(((t - ct) / rt) ** 2 + ((h - ch) / rh) ** 2 + ((w - cw) / rw) ** 2)
    core = max(0.0, 1.0 - TAPER_VOXELS / min(rh, rw))
    band = np.clip((rho - core) / (1.0 - core), 0.0, 1.0)
    return np.where(rho >= 1.0, 0.0, 0.5 * (1.0 + np.cos(np.pi * band)))


def _speckle(rng: np.random.Generator, shape, scale: float) -> np.ndarray:
    """Multiplicative Rayleigh speckle with unit mean."""
    r = rng.rayleigh(scale=1.0, size=shape)
    return 1.0 + scale * (r / np.sqrt(np.pi / 2.0) - 1.0)


def _far_enough(a: LesionSpec, b: LesionSpec) -> bool:
    dh = a.center[1] - b.center[1]
    dw = a.center[2] - b.center[2]
    return np.hypot(dh, dw) > max(a.radii[1], a.radii[2]) + max(b.radii[1], b.radii[2])


def generate_sample(config: PhantomConfig, sample_seed: int, label: int, sample_id: Optional[str] = None) -> TrusSample:
    if label not in (0, 1):
        raise ConfigError(f"label must be 0 or 1, got {label}")
    _check_geometry(config)
    rng = np.random.default_rng(sample_seed)
    T, H, W, C = config.dims
    shape = (T, H, W)

    lesions: List[LesionSpec] = []
    if label == 1:
        lesions.append(_sample_lesion(rng, config, "true_lesion"))
    if rng.random() < config.distractor_rate:
        kind = "bmode_only_distractor" if rng.random() < 0.5 else "swe_only_distractor"
        distractor = _sample_lesion(rng, config, kind)
        for _ in range(20):
            if all(_far_enough(distractor, other) for other in lesions):
                break
            distractor = _sample_lesion(rng, config, kind)
        lesions.append(distractor)

    bmode = np.ones(shape)
    swe = np.ones(shape)
    mask = np.zeros(shape, dtype=np.uint8)
    for lesion in lesions:
        profile = _taper(lesion, shape)
        if lesion.darkens_bmode:
            bmode *= 1.0 - config.bmode_contrast * profile
        if lesion.stiffens_swe:
            swe += config.swe_stiffness_gain * profile
        if lesion.kind == "true_lesion":
            mask |= (profile >= 0.5).astype(np.uint8)
            # tiny radii can leave the half-max contour empty
            mask[tuple(int(round(c)) for c in lesion.center)] = 1

    bmode = bmode[..., None] * _speckle(rng, shape + (C,), config.speckle_scale)
    swe = swe[..., None] * _speckle(rng, shape + (C,), config.speckle_scale)

    return TrusSample(
        id=sample_id or f"phantom_{sample_seed:016x}",
        bmode=normalize_intensities(bmode),
        swe=normalize_intensities(swe),
        label=label,
        lesion_mask=mask,
    )


def generate_dataset(config: PhantomConfig, out_dir) -> DatasetManifest:
    """Write every sample, its mask and the manifest into `out_dir`."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DataError(f"Cannot create output directory {out_dir}: {e}") from e
    _check_geometry(config)

    n_pos = config.n_positive
    entries = []
    for index in range(config.n_samples):
        label = 1 if index < n_pos else 0
        seed = derive_sample_seed(config.master_seed, index)
        sample = generate_sample(config, seed, label, sample_id=f"case_{index:05d}")
        entries.append(save_sample(sample, out_dir))

    manifest = DatasetManifest(entries=entries, master_seed=config.master_seed, split_tag="all", root=out_dir)
    save_manifest(manifest, out_dir / MANIFEST_NAME)
    logger.info(
        f"Generated {config.n_samples} phantom samples ({n_pos} positive) in {out_dir}"
    )
    return manifest
