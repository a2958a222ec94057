#!/usr/bin/env python3
"""
Dual-stream 3D ResNet (bottleneck layout) with hierarchical adaptive spatial fusion.

Three layouts are selected by NetworkConfig:
    dual    two backbones, a fusion block after every stage (or late averaging)
    single  one backbone over B-mode or SWE only
    concat  one backbone over the channel-wise concatenation (early fusion)
"""

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple

import numpy as np
import torch
import torch.nn as nn
from loguru import logger
from pydantic import BaseModel, ConfigDict, field_validator, model_validator

from .errors import ConfigError, DataError
from .fusion import FusionBlockParams, StageFeatures, asf_forward
from .videodata import TrusSample, read_array, write_array

BASE_WIDTH = 64
N_STAGES = 4
CHECKPOINT_FORMAT = "trusfuse-checkpoint/1"
CHECKPOINT_FILE = "checkpoint.json"


class NetworkConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    stage_blocks: Tuple[int, int, int, int] = (3, 4, 6, 3)
    width_multiplier: float = 1.0
    in_channels: int = 1
    num_classes: Literal[2] = 2
    fusion_enabled: bool = True
    single_modality: Optional[Literal["bmode", "swe"]] = None
    concat_baseline: bool = False
    fusion_stride: Literal[1, 2] = 1

    @model_validator(mode="before")
    @classmethod
    def _fusion_only_for_dual(cls, data):
        if isinstance(data, dict) and (data.get("single_modality") or data.get("concat_baseline")):
            if data.get("fusion_enabled") is True:
                raise ValueError("fusion_enabled requires the dual-stream layout")
            data = {**data, "fusion_enabled": False}
        return data

    @field_validator("stage_blocks")
    @classmethod
    def _blocks(cls, v):
        if any(b < 1 for b in v):
            raise ValueError(f"every stage needs at least one block, got {v}")
        return v

    @field_validator("width_multiplier")
    @classmethod
    def _width(cls, v):
        if v <= 0:
            raise ValueError("width_multiplier must be > 0")
        return v

    @field_validator("in_channels")
    @classmethod
    def _channels(cls, v):
        if v < 1:
            raise ValueError("in_channels must be >= 1")
        return v

    @model_validator(mode="after")
    def _one_layout(self):
        if self.single_modality is not None and self.concat_baseline:
            raise ValueError("single_modality and concat_baseline are mutually exclusive")
        return self

    @property
    def layout(self) -> str:
        if self.single_modality is not None:
            return "single"
        if self.concat_baseline:
            return "concat"
        return "dual"

    def scaled(self, channels: int) -> int:
        return max(1, int(round(channels * self.width_multiplier)))


def config_digest(config: NetworkConfig) -> str:
    return hashlib.sha256(config.model_dump_json().encode("utf-8")).hexdigest()


class Bottleneck3d(nn.Module):
    expansion = 4

    def __init__(self, in_channels: int, mid_channels: int, stride: int = 1):
        super().__init__()
        out_channels = mid_channels * self.expansion
        self.conv1 = nn.Conv3d(in_channels, mid_channels, kernel_size=1, bias=False)
        self.bn1 = nn.BatchNorm3d(mid_channels)
        self.conv2 = nn.Conv3d(mid_channels, mid_channels, kernel_size=3, stride=stride, padding=1, bias=False)
        self.bn2 = nn.BatchNorm3d(mid_channels)
        self.conv3 = nn.Conv3d(mid_channels, out_channels, kernel_size=1, bias=False)
        self.bn3 = nn.BatchNorm3d(out_channels)
        self.relu = nn.ReLU()
        self.downsample = None
        if stride != 1 or in_channels != out_channels:
            self.downsample = nn.Sequential(
                nn.Conv3d(in_channels, out_channels, kernel_size=1, stride=stride, bias=False),
                nn.BatchNorm3d(out_channels),
            )

    def forward(self, x):
        identity = x if self.downsample is None else self.downsample(x)
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.relu(self.bn2(self.conv2(out)))
        out = self.bn3(self.conv3(out))
        return self.relu(out + identity)


class ResNet3dBackbone(nn.Module):
    """Stem (3x7x7 conv, stride (1,2,2), max-pool (1,2,2)) followed by four bottleneck stages."""

    def __init__(self, config: NetworkConfig, in_channels: int):
        super().__init__()
        stem_width = config.scaled(BASE_WIDTH)
        self.stem = nn.Sequential(
            nn.Conv3d(in_channels, stem_width, kernel_size=(3, 7, 7), stride=(1, 2, 2),
                      padding=(1, 3, 3), bias=False),
            nn.BatchNorm3d(stem_width),
            nn.ReLU(),
            nn.MaxPool3d(kernel_size=3, stride=(1, 2, 2), padding=1),
        )
        self.out_channels: List[int] = []
        stages = []
        channels = stem_width
        for index, n_blocks in enumerate(config.stage_blocks):
            mid = config.scaled(BASE_WIDTH * 2 ** index)
            stride = 1 if index == 0 else 2
            blocks = [Bottleneck3d(channels, mid, stride)]
            channels = mid * Bottleneck3d.expansion
            blocks += [Bottleneck3d(channels, mid) for _ in range(n_blocks - 1)]
            stages.append(nn.Sequential(*blocks))
            self.out_channels.append(channels)
        self.stages = nn.ModuleList(stages)

    def forward(self, x):
        x = self.stem(x)
        for stage in self.stages:
            x = stage(x)
        return x


@dataclass
class ForwardOutput:
    logits: torch.Tensor
    stage_features: Dict[str, torch.Tensor] = field(default_factory=dict)
    fused_features: Dict[str, torch.Tensor] = field(default_factory=dict)

    def layer(self, layer_id: str) -> torch.Tensor:
        merged = {**self.stage_features, **self.fused_features}
        if layer_id not in merged:
            raise ConfigError(f"Unknown layer '{layer_id}'; valid layers: {', '.join(sorted(merged))}")
        return merged[layer_id]


class TrusNet(nn.Module):
    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.config = config
        self.streams = nn.ModuleDict()
        if config.layout == "dual":
            self.streams["bmode"] = ResNet3dBackbone(config, config.in_channels)
            self.streams["swe"] = ResNet3dBackbone(config, config.in_channels)
        elif config.layout == "single":
            self.streams[config.single_modality] = ResNet3dBackbone(config, config.in_channels)
        else:
            self.streams["concat"] = ResNet3dBackbone(config, 2 * config.in_channels)
        widths = next(iter(self.streams.values())).out_channels
        self.fusion = nn.ModuleList()
        if config.layout == "dual" and config.fusion_enabled:
            self.fusion = nn.ModuleList(FusionBlockParams(c, stride=config.fusion_stride) for c in widths)
        self.head = nn.Linear(widths[-1], config.num_classes)
        self._init_weights()

    def _init_weights(self):
        for m in self.modules():
            if isinstance(m, nn.Conv3d) and m.bias is None:
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
            elif isinstance(m, nn.BatchNorm3d):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)

    def layer_ids(self) -> List[str]:
        ids = [f"{name}.stage{k}" for name in self.streams for k in range(1, N_STAGES + 1)]
        if len(self.fusion):
            ids += [f"fused.stage{k}" for k in range(1, N_STAGES + 1)]
        return ids

    def default_layer(self) -> str:
        if len(self.fusion):
            return f"fused.stage{N_STAGES}"
        return f"{next(iter(self.streams))}.stage{N_STAGES}"

    def forward(self, bmode: Optional[torch.Tensor], swe: Optional[torch.Tensor]) -> ForwardOutput:
        layout = self.config.layout
        if layout == "single":
            x = bmode if self.config.single_modality == "bmode" else swe
            return self._single_stream(self.config.single_modality, x)
        if layout == "concat":
            return self._single_stream("concat", torch.cat([bmode, swe], dim=1))
        return self._dual_stream(bmode, swe)

    def _single_stream(self, name: str, x: torch.Tensor) -> ForwardOutput:
        backbone = self.streams[name]
        out = ForwardOutput(logits=None)
        x = backbone.stem(x)
        for k, stage in enumerate(backbone.stages, start=1):
            x = stage(x)
            out.stage_features[f"{name}.stage{k}"] = x
        out.logits = self.head(x.mean(dim=(2, 3, 4)))
        return out

    def _dual_stream(self, bmode: torch.Tensor, swe: torch.Tensor) -> ForwardOutput:
        out = ForwardOutput(logits=None)
        bx, be = self.streams["bmode"], self.streams["swe"]
        x, e = bx.stem(bmode), be.stem(swe)
        top = None
        for k in range(N_STAGES):
            f_x, f_e = bx.stages[k](x), be.stages[k](e)
            out.stage_features[f"bmode.stage{k + 1}"] = f_x
            out.stage_features[f"swe.stage{k + 1}"] = f_e
            if len(self.fusion):
                fused, x, e = asf_forward(StageFeatures(f_x, f_e), self.fusion[k])
                out.fused_features[f"fused.stage{k + 1}"] = fused
                top = fused
            else:
                x, e = f_x, f_e
                top = 0.5 * (f_x + f_e)
        out.logits = self.head(top.mean(dim=(2, 3, 4)))
        return out


@dataclass
class ModelState:
    config: NetworkConfig
    network: TrusNet
    init_seed: int = 0

    @property
    def config_digest(self) -> str:
        return config_digest(self.config)

    @property
    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.network.parameters())

    def parameters_digest(self) -> str:
        digest = hashlib.sha256()
        for name, tensor in self.network.state_dict().items():
            digest.update(name.encode("utf-8"))
            digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
        return digest.hexdigest()


def build_model(config: NetworkConfig, seed: int = 0) -> ModelState:
    """Deterministically initialize a network for `config`."""
    if not isinstance(config, NetworkConfig):
        raise ConfigError(f"Expected a NetworkConfig, got {type(config).__name__}")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        network = TrusNet(config)
    state = ModelState(config=config, network=network, init_seed=seed)
    logger.debug(f"Built {config.layout} network with {state.parameter_count} parameters")
    return state


def video_to_batch(video: np.ndarray) -> torch.Tensor:
    """(T, H, W, C) array -> (1, C, T, H, W) float tensor."""
    return torch.from_numpy(np.ascontiguousarray(video, dtype=np.float32)).permute(3, 0, 1, 2).unsqueeze(0)


def _check_batch(model: ModelState, name: str, batch: Optional[torch.Tensor]):
    if batch is None:
        raise DataError(f"{name} batch is required by the {model.config.layout} layout")
    if batch.dim() != 5 or batch.shape[1] != model.config.in_channels:
        raise DataError(
            f"{name} batch must be (N, {model.config.in_channels}, T, H, W), got {tuple(batch.shape)}"
        )


def forward(model: ModelState, bmode: Optional[torch.Tensor], swe: Optional[torch.Tensor]) -> ForwardOutput:
    config = model.config
    if config.layout == "single":
        name = config.single_modality
        _check_batch(model, name, bmode if name == "bmode" else swe)
    else:
        _check_batch(model, "bmode", bmode)
        _check_batch(model, "swe", swe)
        if bmode.shape != swe.shape:
            raise DataError(f"B-mode batch {tuple(bmode.shape)} and SWE batch {tuple(swe.shape)} differ")
    return model.network(bmode, swe)


def probability_from_logits(logits: torch.Tensor) -> torch.Tensor:
    """Softmax probability of the positive (csPCa) class."""
    return torch.softmax(logits, dim=-1)[..., 1]


def predict_proba(model: ModelState, sample: TrusSample) -> float:
    network = model.network
    device = next(network.parameters()).device
    dtype = next(network.parameters()).dtype
    was_training = network.training
    network.eval()
    try:
        with torch.no_grad():
            out = forward(
                model,
                video_to_batch(sample.bmode).to(device, dtype),
                video_to_batch(sample.swe).to(device, dtype),
            )
    finally:
        network.train(was_training)
    return float(probability_from_logits(out.logits)[0])


# --- checkpoints ---

def _tensor_file(name: str) -> str:
    return f"{name}.trus"


def save_checkpoint(model: ModelState, directory, optimizer: Optional[torch.optim.Optimizer] = None,
                    extra: Optional[Dict[str, Any]] = None) -> Path:
    """Write parameters (and optimizer momentum) as tensor containers plus a JSON index."""
    directory = Path(directory)
    tensors = {}
    for name, tensor in model.network.state_dict().items():
        # scalars (BatchNorm step counters) are stored as rank-1 arrays
        write_array(directory / "tensors" / _tensor_file(name), tensor.detach().cpu().numpy().reshape(tensor.shape or (1,)))
        tensors[name] = _tensor_file(name)

    optimizer_index = None
    if optimizer is not None:
        state = optimizer.state_dict()
        buffers = {}
        for index, slots in state["state"].items():
            for slot, value in slots.items():
                if torch.is_tensor(value):
                    fname = f"{index}.{slot}.trus"
                    write_array(directory / "optimizer" / fname, value.detach().cpu().numpy())
                    buffers.setdefault(str(index), {})[slot] = fname
        optimizer_index = {"param_groups": state["param_groups"], "buffers": buffers}

    index = {
        "format": CHECKPOINT_FORMAT,
        "config_digest": model.config_digest,
        "config": model.config.model_dump(mode="json"),
        "init_seed": model.init_seed,
        "parameter_count": model.parameter_count,
        "tensors": tensors,
        "optimizer": optimizer_index,
        "extra": extra or {},
    }
    try:
        (directory / CHECKPOINT_FILE).write_text(json.dumps(index, indent=2, sort_keys=True))
    except OSError as e:
        raise DataError(f"Cannot write checkpoint {directory}: {e}") from e
    logger.info(f"Saved checkpoint to {directory}")
    return directory


def read_checkpoint_index(directory) -> Dict[str, Any]:
    path = Path(directory) / CHECKPOINT_FILE
    try:
        index = json.loads(path.read_text())
    except OSError as e:
        raise DataError(f"Cannot read checkpoint {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise DataError(f"Checkpoint index {path} is not valid JSON: {e}") from e
    if index.get("format") != CHECKPOINT_FORMAT:
        raise DataError(f"{path} is not a {CHECKPOINT_FORMAT} checkpoint")
    return index


def load_checkpoint(directory, optimizer: Optional[torch.optim.Optimizer] = None):
    """Return (ModelState, checkpoint index); restores optimizer state when one is given."""
    directory = Path(directory)
    index = read_checkpoint_index(directory)
    try:
        config = NetworkConfig.model_validate(index["config"])
    except ValueError as e:
        raise DataError(f"Checkpoint {directory} holds an invalid network config: {e}") from e
    if config_digest(config) != index["config_digest"]:
        raise DataError(f"Checkpoint {directory}: config digest does not match its config")

    model = build_model(config, seed=index.get("init_seed", 0))
    reference = model.network.state_dict()
    try:
        state_dict = {
            name: torch.from_numpy(read_array(directory / "tensors" / fname)).reshape(reference[name].shape)
            for name, fname in index["tensors"].items()
        }
        model.network.load_state_dict(state_dict, strict=True)
    except KeyError as e:
        raise DataError(f"Checkpoint {directory} holds unknown tensor {e}") from e
    except RuntimeError as e:
        raise DataError(f"Checkpoint {directory} does not fit its config: {e}") from e

    if optimizer is not None:
        restore_optimizer(optimizer, model, directory, index)
    return model, index


def restore_optimizer(optimizer: torch.optim.Optimizer, model: ModelState, directory, index: Dict[str, Any]):
    saved = index.get("optimizer")
    if saved is None:
        raise DataError(f"Checkpoint {directory} holds no optimizer state")
    state = {}
    for param_index, slots in saved["buffers"].items():
        state[int(param_index)] = {
            slot: torch.from_numpy(read_array(Path(directory) / "optimizer" / fname))
            for slot, fname in slots.items()
        }
    optimizer.load_state_dict({"state": state, "param_groups": saved["param_groups"]})


def checkpoint_digest(directory) -> str:
    """Digest over the config digest and every tensor file, in sorted path order.

    The JSON index is left out: it carries wall-time fields of the run history.
    """
    directory = Path(directory)
    digest = hashlib.sha256(read_checkpoint_index(directory)["config_digest"].encode("utf-8"))
    for path in sorted(p for p in directory.rglob("*") if p.is_file() and p.name != CHECKPOINT_FILE):
        digest.update(path.relative_to(directory).as_posix().encode("utf-8"))
        digest.update(path.read_bytes())
    return digest.hexdigest()
