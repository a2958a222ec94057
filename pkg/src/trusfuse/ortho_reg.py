"""
Orthogonal regularization of convolution kernels and the combined training loss.

The penalty is R(W) = sum |W W^T - I| over the kernel reshaped to
(out_channels, fan_in); it is added to the mean cross-entropy with weight lambda.
"""

from dataclasses import dataclass
from typing import Iterable, List, Literal

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, DataError

OrthoForm = Literal["absolute", "off_diagonal"]


@dataclass
class KernelMatrix:
    matrix: torch.Tensor
    origin: str = ""

    def __post_init__(self):
        if self.matrix.dim() != 2 or self.matrix.shape[0] < 1 or self.matrix.shape[1] < 1:
            raise ConfigError(f"{self.origin or 'kernel'}: expected a non-empty 2-D matrix, got {tuple(self.matrix.shape)}")


@dataclass
class LossBreakdown:
    total: torch.Tensor
    ce: torch.Tensor
    penalty: torch.Tensor


def kernel_matrix(param: torch.Tensor, origin: str = "") -> KernelMatrix:
    """Reshape a convolution kernel (C_out, C_in, *k) to (C_out, C_in * prod(k))."""
    if param.dim() < 2:
        raise ConfigError(f"{origin or 'parameter'} has rank {param.dim()}; not a convolution kernel")
    return KernelMatrix(matrix=param.reshape(param.shape[0], -1), origin=origin)


def ortho_penalty(kernel, form: OrthoForm = "absolute") -> torch.Tensor:
    w = kernel.matrix if isinstance(kernel, KernelMatrix) else kernel
    gram = w @ w.t()
    eye = torch.eye(w.shape[0], dtype=w.dtype, device=w.device)
    if form == "absolute":
        return (gram - eye).abs().sum()
    if form == "off_diagonal":
        return (gram * (1.0 - eye)).abs().sum()
    raise ConfigError(f"Unknown penalty form '{form}'; expected 'absolute' or 'off_diagonal'")


def kernel_set(network: nn.Module) -> List[KernelMatrix]:
    """Every Conv3d kernel of the backbones and fusion blocks; head and norm affines are excluded."""
    kernels = []
    for name, module in network.named_modules():
        if isinstance(module, nn.Conv3d):
            kernels.append(kernel_matrix(module.weight, origin=f"{name}.weight"))
    return kernels


def penalty_sum(kernels: Iterable[KernelMatrix], form: OrthoForm = "absolute") -> torch.Tensor:
    total = None
    for kernel in kernels:
        term = ortho_penalty(kernel, form)
        total = term if total is None else total + term
    if total is None:
        return torch.zeros(())
    return total


def total_loss(logits: torch.Tensor, labels: torch.Tensor, kernels: Iterable[KernelMatrix],
               ortho_lambda: float, form: OrthoForm = "absolute") -> LossBreakdown:
    """Mean cross-entropy plus lambda times the summed penalty over `kernels`."""
    if logits.shape[0] == 0:
        raise DataError("Cannot compute a loss over an empty batch")
    if ortho_lambda < 0:
        raise ConfigError(f"ortho_lambda must be >= 0, got {ortho_lambda}")
    if not torch.all((labels == 0) | (labels == 1)):
        raise DataError(f"Labels must be binary, got {labels.tolist()}")
    ce = F.cross_entropy(logits, labels.long(), reduction="mean")
    penalty = penalty_sum(kernels, form).to(ce.dtype).to(ce.device)
    if ortho_lambda == 0:
        return LossBreakdown(total=ce, ce=ce, penalty=penalty.detach())
    return LossBreakdown(total=ce + ortho_lambda * penalty, ce=ce, penalty=penalty)
