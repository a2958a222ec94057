#!/usr/bin/env python3
"""
3D Grad-CAM over any backbone or fused stage, heat-map overlays and export.

Colormap stops (h -> RGB):
    0.00 blue   (0, 0, 1)
    0.25 cyan   (0, 1, 1)
    0.50 green  (0, 1, 0)
    0.75 yellow (1, 1, 0)
    1.00 red    (1, 0, 0)
"""

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple

import cv2
import numpy as np
import torch
import torch.nn.functional as F
from loguru import logger

from .errors import ConfigError, DataError
from .network import ModelState, forward, video_to_batch
from .videodata import TrusSample, write_array

COLORMAP_STOPS = np.array([0.0, 0.25, 0.5, 0.75, 1.0])
COLORMAP_RGB = np.array([
    [0.0, 0.0, 1.0],
    [0.0, 1.0, 1.0],
    [0.0, 1.0, 0.0],
    [1.0, 1.0, 0.0],
    [1.0, 0.0, 0.0],
])
FRAME_PATTERN = "frame_{:04d}.png"
ANIMATION_FILE = "overlay.avi"
HEAT_FILE = "heat.trus"


@dataclass
class HeatVolume:
    values: np.ndarray
    upsampled: np.ndarray
    target_layer: str
    target_class: int

    def __post_init__(self):
        if self.values.ndim != 3 or self.upsampled.ndim != 3:
            raise DataError("Heat volumes must be 3-D (T, H, W)")
        if (self.values < 0).any():
            raise DataError("Raw heat values must be non-negative")
        if self.upsampled.size and (self.upsampled.min() < 0 or self.upsampled.max() > 1):
            raise DataError("Upsampled heat must lie in [0, 1]")


@dataclass
class LocalizationResult:
    hit: bool
    peak: Tuple[int, int, int]
    distance: float
    radius: float
    degenerate: bool = False


def _min_max(volume: torch.Tensor) -> torch.Tensor:
    lo, hi = volume.min(), volume.max()
    if hi <= lo:
        return torch.zeros_like(volume)
    return (volume - lo) / (hi - lo)


def cam_from_activations(activations: torch.Tensor, gradients: torch.Tensor, out_shape: Tuple[int, int, int],
                         target_layer: str = "", target_class: int = 1) -> HeatVolume:
    """Grad-CAM from one sample's activation A and gradient dY/dA, both (C, T', H', W')."""
    if activations.shape != gradients.shape or activations.dim() != 4:
        raise DataError(
            f"Activations {tuple(activations.shape)} and gradients {tuple(gradients.shape)} must match as (C, T, H, W)"
        )
    alpha = gradients.mean(dim=(1, 2, 3))
    raw = torch.relu((alpha[:, None, None, None] * activations).sum(dim=0))
    up = F.interpolate(raw[None, None], size=tuple(out_shape), mode="trilinear", align_corners=True)[0, 0]
    up = _min_max(up.clamp_min(0))
    return HeatVolume(
        values=raw.detach().cpu().numpy().astype(np.float64),
        upsampled=up.detach().cpu().numpy().astype(np.float64),
        target_layer=target_layer,
        target_class=target_class,
    )


def grad_cam(model: ModelState, sample: TrusSample, target_layer: Optional[str] = None,
             target_class: int = 1) -> HeatVolume:
    network = model.network
    if target_class not in (0, 1):
        raise ConfigError(f"target_class must be 0 or 1, got {target_class}")
    target_layer = target_layer or network.default_layer()
    valid = network.layer_ids()
    if target_layer not in valid:
        raise ConfigError(f"Unknown layer '{target_layer}'; valid layers: {', '.join(valid)}")

    was_training = network.training
    network.eval()
    param = next(network.parameters())
    try:
        with torch.enable_grad():
            out = forward(
                model,
                video_to_batch(sample.bmode).to(param.device, param.dtype),
                video_to_batch(sample.swe).to(param.device, param.dtype),
            )
            activation = out.layer(target_layer)
            (grad,) = torch.autograd.grad(out.logits[0, target_class], activation, allow_unused=True)
    finally:
        network.train(was_training)
    if grad is None:
        grad = torch.zeros_like(activation)
    heat = cam_from_activations(activation[0], grad[0], sample.bmode.shape[:3], target_layer, target_class)
    logger.debug(f"Grad-CAM on {sample.id} at {target_layer} for class {target_class}")
    return heat


def colormap(h: np.ndarray) -> np.ndarray:
    """Map values in [0, 1] to RGB in [0, 1]; output has a trailing axis of 3."""
    h = np.clip(np.asarray(h, dtype=np.float64), 0.0, 1.0)
    return np.stack([np.interp(h, COLORMAP_STOPS, COLORMAP_RGB[:, c]) for c in range(3)], axis=-1)


def grayscale(video: np.ndarray) -> np.ndarray:
    """(T, H, W, C) -> (T, H, W) channel mean."""
    return np.asarray(video, dtype=np.float64).mean(axis=-1)


def overlay(sample, heat, alpha: float = 0.5) -> np.ndarray:
    """Composite the heat map over grayscale B-mode frames; returns uint8 RGB (T, H, W, 3).

    out = (1 - alpha*h) * gray + alpha*h * colormap(h)
    """
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must lie in [0, 1], got {alpha}")
    video = sample.bmode if isinstance(sample, TrusSample) else np.asarray(sample)
    h = heat.upsampled if isinstance(heat, HeatVolume) else np.asarray(heat, dtype=np.float64)
    gray = grayscale(video)
    if h.shape != gray.shape:
        raise DataError(f"Heat volume {h.shape} does not match video frames {gray.shape}")
    weight = (alpha * h)[..., None]
    out = (1.0 - weight) * gray[..., None] + weight * colormap(h)
    return np.clip(np.round(out * 255.0), 0, 255).astype(np.uint8)


def localization_score(heat, lesion_mask: np.ndarray, dilation_fraction: float = 0.1) -> LocalizationResult:
    """Hit iff the heat argmax (lowest linear index on ties) lies within `radius` voxels of the mask.

    A map with no positive heat has no peak and always scores a miss.
    """
    h = heat.upsampled if isinstance(heat, HeatVolume) else np.asarray(heat)
    if lesion_mask is None:
        raise DataError("Localization needs a lesion mask")
    mask = np.asarray(lesion_mask)
    if mask.shape != h.shape:
        raise DataError(f"Lesion mask {mask.shape} does not match heat volume {h.shape}")
    voxels = np.argwhere(mask > 0)
    if voxels.size == 0:
        raise DataError("Lesion mask is empty; localization needs a lesion")
    peak = tuple(int(i) for i in np.unravel_index(int(np.argmax(h)), h.shape))
    distance = float(np.sqrt(((voxels - np.array(peak)) ** 2).sum(axis=1)).min())
    radius = dilation_fraction * min(h.shape[1], h.shape[2])
    degenerate = not bool((h > 0).any())
    return LocalizationResult(hit=not degenerate and distance <= radius, peak=peak, distance=distance,
                              radius=radius, degenerate=degenerate)


def export_frames(frames: np.ndarray, out_dir, animate: bool = False, fps: int = 4) -> Path:
    """Write frame_%04d.png per frame and, optionally, an MJPG overlay.avi."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DataError(f"Cannot create output directory {out_dir}: {e}") from e
    if frames.ndim != 4 or frames.shape[-1] != 3 or frames.dtype != np.uint8:
        raise DataError(f"Expected uint8 RGB frames (T, H, W, 3), got {frames.dtype} {frames.shape}")

    for index, frame in enumerate(frames):
        path = out_dir / FRAME_PATTERN.format(index)
        if not cv2.imwrite(str(path), cv2.cvtColor(frame, cv2.COLOR_RGB2BGR)):
            raise DataError(f"Cannot write frame {path}")

    if animate:
        path = out_dir / ANIMATION_FILE
        height, width = frames.shape[1:3]
        writer = cv2.VideoWriter(str(path), cv2.VideoWriter_fourcc(*"MJPG"), fps, (width, height))
        if not writer.isOpened():
            raise DataError(f"Cannot open video writer for {path}")
        try:
            for frame in frames:
                writer.write(cv2.cvtColor(frame, cv2.COLOR_RGB2BGR))
        finally:
            writer.release()
    logger.info(f"Exported {len(frames)} overlay frames to {out_dir}")
    return out_dir


def export_heat(heat: HeatVolume, path) -> Path:
    path = Path(path)
    write_array(path, heat.upsampled.astype(np.float32))
    return path
