"""
Adaptive spatial fusion of B-mode and SWE feature maps.

Per voxel, each modality gets a sigmoid attention weight computed from its own
features and the modality mean; a softmax across the two modalities turns the
pair into a convex combination that is shared by all feature channels.
"""

from dataclasses import dataclass
from typing import Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import DataError

NORM_EPS = 1e-5


class WeightMapNorm(nn.Module):
    """Instance normalization of a one-channel weight map over (T, H, W) with learnable affine."""

    def __init__(self, eps: float = NORM_EPS):
        super().__init__()
        self.eps = eps
        self.scale = nn.Parameter(torch.ones(1))
        self.shift = nn.Parameter(torch.zeros(1))

    def forward(self, w: torch.Tensor) -> torch.Tensor:
        # a constant map (including a single voxel) normalizes to the shift
        mean = w.mean(dim=(2, 3, 4), keepdim=True)
        var = w.var(dim=(2, 3, 4), keepdim=True, unbiased=False)
        return (w - mean) / torch.sqrt(var + self.eps) * self.scale + self.shift


class FusionBlockParams(nn.Module):
    """Learnable parameters of one fusion block; calling it runs `asf_forward`."""

    def __init__(self, channels: int, stride: int = 1):
        super().__init__()
        if stride not in (1, 2):
            raise ValueError(f"fusion stride must be 1 or 2, got {stride}")
        self.channels = channels
        self.stride = stride
        self.conv_x = nn.Conv3d(2 * channels, 1, kernel_size=1, stride=stride, bias=True)
        self.conv_e = nn.Conv3d(2 * channels, 1, kernel_size=1, stride=stride, bias=True)
        self.in_x = WeightMapNorm()
        self.in_e = WeightMapNorm()

    def forward(self, f_x: torch.Tensor, f_e: torch.Tensor):
        return asf_forward(StageFeatures(f_x, f_e), self)


@dataclass
class StageFeatures:
    f_x: torch.Tensor
    f_e: torch.Tensor

    def __post_init__(self):
        if self.f_x.shape != self.f_e.shape:
            raise DataError(
                f"Feature shape mismatch: B-mode {tuple(self.f_x.shape)} vs SWE {tuple(self.f_e.shape)}"
            )
        if self.f_x.dim() != 5:
            raise DataError(f"Expected (N, C, T, H, W) features, got {tuple(self.f_x.shape)}")


def _weight_map(conv: nn.Conv3d, norm: WeightMapNorm, mean: torch.Tensor, own: torch.Tensor,
                use_instance_norm: bool) -> torch.Tensor:
    z = conv(torch.cat([mean, own], dim=1))
    if use_instance_norm:
        z = norm(z)
    w = torch.sigmoid(z)
    if w.shape[2:] != own.shape[2:]:
        w = F.interpolate(w, size=own.shape[2:], mode="trilinear", align_corners=True)
    return w


def compute_raw_weights(feats: StageFeatures, params: FusionBlockParams,
                        use_instance_norm: bool = True) -> Tuple[torch.Tensor, torch.Tensor]:
    """Return the one-channel sigmoid weight maps (w_x, w_e)."""
    channels = feats.f_x.shape[1]
    if 2 * channels != params.conv_x.in_channels:
        raise DataError(
            f"Fusion block expects {params.conv_x.in_channels // 2} feature channels, got {channels}"
        )
    mean = 0.5 * (feats.f_x + feats.f_e)
    w_x = _weight_map(params.conv_x, params.in_x, mean, feats.f_x, use_instance_norm)
    w_e = _weight_map(params.conv_e, params.in_e, mean, feats.f_e, use_instance_norm)
    return w_x, w_e


def normalize_weights(w_x: torch.Tensor, w_e: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """Voxel-wise softmax across the two modalities."""
    if w_x.shape != w_e.shape:
        raise DataError(f"Weight map shape mismatch: {tuple(w_x.shape)} vs {tuple(w_e.shape)}")
    hat_x = torch.softmax(torch.stack([w_x, w_e]), dim=0)[0]
    return hat_x, 1.0 - hat_x


def fuse(feats: StageFeatures, hat_x: torch.Tensor, hat_e: torch.Tensor) -> torch.Tensor:
    """fused = hat_x * f_x + hat_e * f_e, weights broadcast over channels."""
    expected = (feats.f_x.shape[0], 1) + tuple(feats.f_x.shape[2:])
    for name, w in (("B-mode", hat_x), ("SWE", hat_e)):
        if tuple(w.shape) != expected:
            raise DataError(f"{name} weight map shape {tuple(w.shape)} does not broadcast to {expected}")
    return hat_x * feats.f_x + hat_e * feats.f_e


def asf_forward(feats: StageFeatures, params: FusionBlockParams):
    """Return (fused, branch_out_x, branch_out_e); fused maps are added back onto each branch."""
    w_x, w_e = compute_raw_weights(feats, params)
    hat_x, hat_e = normalize_weights(w_x, w_e)
    fused = fuse(feats, hat_x, hat_e)
    return fused, feats.f_x + fused, feats.f_e + fused
