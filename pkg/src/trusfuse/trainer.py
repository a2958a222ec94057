#!/usr/bin/env python3
"""
Training loop: one positive and one negative sample per batch, SGD with momentum
under a poly learning-rate schedule stepped per epoch, checkpoints and a JSON-lines
run history.
"""

import json
import math
import time
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Literal, Optional, Tuple

import numpy as np
import torch
from loguru import logger
from pydantic import BaseModel, ConfigDict, field_validator

from .errors import ConfigError, DataError, NumericError
from .network import ModelState, NetworkConfig, build_model, load_checkpoint, restore_optimizer, save_checkpoint, video_to_batch
from .ortho_reg import LossBreakdown, OrthoForm, kernel_set, total_loss
from .videodata import DEFAULT_CACHE_SIZE, DatasetManifest, SampleStore

HISTORY_FILE = "history.jsonl"
RESOLVED_CONFIG_FILE = "resolved_config.json"
FINAL_CHECKPOINT = "checkpoint"


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    epochs: int = 300
    base_lr: float = 1e-4
    decay_horizon: Optional[int] = None
    poly_power: float = 0.9
    momentum: float = 0.9
    weight_decay: float = 0.0
    ortho_lambda: float = 1e-5
    ortho_form: OrthoForm = "absolute"
    batch_size: Literal[2] = 2
    init_seed: int = 0
    shuffle_seed: int = 0
    checkpoint_every: int = 0
    device: str = "cpu"
    deterministic: bool = True

    @field_validator("epochs")
    @classmethod
    def _epochs(cls, v):
        if v < 1:
            raise ValueError("epochs must be >= 1")
        return v

    @field_validator("base_lr")
    @classmethod
    def _lr(cls, v):
        if v <= 0:
            raise ValueError("base_lr must be > 0")
        return v

    @field_validator("decay_horizon")
    @classmethod
    def _horizon(cls, v):
        if v is not None and v <= 0:
            raise ValueError("decay_horizon must be > 0")
        return v

    @field_validator("ortho_lambda", "momentum", "weight_decay", "checkpoint_every")
    @classmethod
    def _non_negative(cls, v):
        if v < 0:
            raise ValueError("must be >= 0")
        return v

    @property
    def horizon(self) -> int:
        return self.decay_horizon if self.decay_horizon is not None else self.epochs


class EpochRecord(BaseModel):
    epoch: int
    lr: float
    loss: float
    ce: float
    penalty: float
    seconds: float


class RunHistory(BaseModel):
    records: List[EpochRecord] = []

    def append(self, record: EpochRecord):
        self.records.append(record)

    @property
    def last_epoch(self) -> int:
        return self.records[-1].epoch if self.records else -1

    def write_jsonl(self, path) -> Path:
        path = Path(path)
        try:
            path.write_text("".join(r.model_dump_json() + "\n" for r in self.records))
        except OSError as e:
            raise DataError(f"Cannot write history {path}: {e}") from e
        return path

    @classmethod
    def read_jsonl(cls, path) -> "RunHistory":
        path = Path(path)
        try:
            lines = path.read_text().splitlines()
        except OSError as e:
            raise DataError(f"Cannot read history {path}: {e}") from e
        return cls(records=[EpochRecord.model_validate_json(line) for line in lines if line.strip()])


def poly_lr(epoch: int, base_lr: float, decay_horizon: int, power: float) -> float:
    """base_lr * max(0, 1 - epoch / decay_horizon) ** power"""
    if decay_horizon <= 0:
        raise ConfigError(f"decay_horizon must be > 0, got {decay_horizon}")
    if epoch < 0:
        raise ConfigError(f"epoch must be >= 0, got {epoch}")
    return base_lr * max(0.0, 1.0 - epoch / decay_horizon) ** power


def balanced_batches(manifest: DatasetManifest, shuffle_seed: int, epoch: int) -> List[Tuple[str, str]]:
    """(positive id, negative id) pairs; the shorter class list cycles."""
    positives = sorted(e.id for e in manifest.entries if e.label == 1)
    negatives = sorted(e.id for e in manifest.entries if e.label == 0)
    if not positives or not negatives:
        missing = "positive" if not positives else "negative"
        raise DataError(f"Training manifest has no {missing} samples; balanced batches need both classes")
    rng = np.random.default_rng(shuffle_seed + epoch)
    positives = [positives[i] for i in rng.permutation(len(positives))]
    negatives = [negatives[i] for i in rng.permutation(len(negatives))]
    n_pairs = max(len(positives), len(negatives))
    return [(positives[i % len(positives)], negatives[i % len(negatives)]) for i in range(n_pairs)]


def set_deterministic(enabled: bool):
    torch.use_deterministic_algorithms(enabled, warn_only=True)
    if torch.backends.cudnn.is_available():
        torch.backends.cudnn.deterministic = enabled
        torch.backends.cudnn.benchmark = not enabled


class Trainer:
    """Owns one model, its optimizer and the sample store for a training run."""

    def __init__(self, model: ModelState, config: TrainConfig, manifest: DatasetManifest,
                 store: Optional[SampleStore] = None):
        self.model = model
        self.config = config
        self.manifest = manifest
        self.store = store or SampleStore(manifest)
        self.device = torch.device(config.device)
        self.model.network.to(self.device)
        self.optimizer = torch.optim.SGD(
            model.network.parameters(),
            lr=config.base_lr,
            momentum=config.momentum,
            weight_decay=config.weight_decay,
        )
        self.history = RunHistory()
        self.start_epoch = 0

    def batch(self, pair: Tuple[str, str]) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        samples = [self.store.get(sample_id) for sample_id in pair]
        bmode = torch.cat([video_to_batch(s.bmode) for s in samples]).to(self.device)
        swe = torch.cat([video_to_batch(s.swe) for s in samples]).to(self.device)
        labels = torch.tensor([s.label for s in samples], device=self.device)
        return bmode, swe, labels

    def compute_loss(self, pair: Tuple[str, str]) -> LossBreakdown:
        bmode, swe, labels = self.batch(pair)
        out = self.model.network(bmode, swe)
        return total_loss(
            out.logits,
            labels,
            kernel_set(self.model.network),
            self.config.ortho_lambda,
            self.config.ortho_form,
        )

    def set_lr(self, lr: float):
        for group in self.optimizer.param_groups:
            group["lr"] = lr

    def train_epoch(self, epoch: int) -> EpochRecord:
        cfg = self.config
        lr = poly_lr(epoch, cfg.base_lr, cfg.horizon, cfg.poly_power)
        self.set_lr(lr)
        self.model.network.train()
        started = time.perf_counter()
        totals = {"loss": 0.0, "ce": 0.0, "penalty": 0.0}
        pairs = balanced_batches(self.manifest, cfg.shuffle_seed, epoch)
        for step, pair in enumerate(pairs):
            self.optimizer.zero_grad()
            losses = self.compute_loss(pair)
            value = float(losses.total.detach())
            if not math.isfinite(value):
                raise NumericError(
                    f"Non-finite loss {value} at epoch {epoch}, step {step} (batch {pair[0]}, {pair[1]})",
                    epoch=epoch,
                    step=step,
                )
            losses.total.backward()
            self.optimizer.step()
            totals["loss"] += value
            totals["ce"] += float(losses.ce.detach())
            totals["penalty"] += float(losses.penalty.detach())
            logger.debug(f"epoch {epoch} step {step}: loss {value:.6f}")
        n = len(pairs)
        return EpochRecord(
            epoch=epoch,
            lr=lr,
            loss=totals["loss"] / n,
            ce=totals["ce"] / n,
            penalty=totals["penalty"] / n,
            seconds=time.perf_counter() - started,
        )

    def checkpoint(self, directory) -> Path:
        return save_checkpoint(
            self.model,
            directory,
            optimizer=self.optimizer,
            extra={
                "epoch": self.history.last_epoch,
                "train_config": self.config.model_dump(mode="json"),
                "history": [r.model_dump(mode="json") for r in self.history.records],
            },
        )

    def resume(self, checkpoint_dir):
        """Restore parameters, momentum buffers and history; training continues after the saved epoch."""
        restored, index = load_checkpoint(checkpoint_dir)
        if restored.config_digest != self.model.config_digest:
            raise ConfigError(
                f"Checkpoint {checkpoint_dir} was trained with a different network config"
            )
        self.model.network.load_state_dict(restored.network.state_dict())
        restore_optimizer(self.optimizer, self.model, checkpoint_dir, index)
        extra = index.get("extra", {})
        self.history = RunHistory(records=[EpochRecord(**r) for r in extra.get("history", [])])
        self.start_epoch = int(extra.get("epoch", -1)) + 1
        logger.info(f"Resumed from {checkpoint_dir} at epoch {self.start_epoch}")

    def run(self, out_dir, on_epoch: Optional[Callable[[EpochRecord], None]] = None) -> RunHistory:
        out_dir = Path(out_dir)
        run_log = logger.bind(run=out_dir.name)
        for epoch in range(self.start_epoch, self.config.epochs):
            try:
                record = self.train_epoch(epoch)
            except NumericError as e:
                _write_failure(out_dir, e)
                raise
            self.history.append(record)
            self.history.write_jsonl(out_dir / HISTORY_FILE)
            run_log.info(
                f"epoch {epoch}: lr {record.lr:.3e} loss {record.loss:.5f} "
                f"(ce {record.ce:.5f}, penalty {record.penalty:.3f})"
            )
            if on_epoch is not None:
                on_epoch(record)
            every = self.config.checkpoint_every
            if every and (epoch + 1) % every == 0 and epoch + 1 < self.config.epochs:
                self.checkpoint(out_dir / "checkpoints" / f"epoch_{epoch:04d}")
        self.checkpoint(out_dir / FINAL_CHECKPOINT)
        return self.history


def _write_failure(out_dir: Path, error: NumericError):
    payload = {"epoch": error.epoch, "step": error.step, "message": str(error)}
    try:
        (out_dir / "failure.json").write_text(json.dumps(payload, indent=2))
    except OSError:
        logger.exception(f"Cannot record the failing step in {out_dir}")


def write_resolved_config(out_dir, document: Dict) -> Path:
    path = Path(out_dir) / RESOLVED_CONFIG_FILE
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(document, indent=2, sort_keys=True))
    except OSError as e:
        raise DataError(f"Cannot write {path}: {e}") from e
    return path


def train(network_config: NetworkConfig, train_config: TrainConfig, manifest: DatasetManifest, out_dir,
          resume_from=None, input_dims: Optional[Tuple[int, int, int]] = None,
          resolved_config: Optional[Dict] = None, cache_size: int = DEFAULT_CACHE_SIZE,
          on_epoch: Optional[Callable[[EpochRecord], None]] = None) -> Tuple[ModelState, RunHistory]:
    """Train from scratch (or from `resume_from`) and write checkpoint, history and config into `out_dir`."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DataError(f"Cannot create output directory {out_dir}: {e}") from e
    manifest.check_files()
    write_resolved_config(out_dir, resolved_config or {
        "network": network_config.model_dump(mode="json"),
        "training": train_config.model_dump(mode="json"),
    })

    set_deterministic(train_config.deterministic)
    torch.manual_seed(train_config.init_seed)
    model = build_model(network_config, seed=train_config.init_seed)
    trainer = Trainer(model, train_config, manifest, SampleStore(manifest, input_dims, cache_size))
    if resume_from is not None:
        trainer.resume(resume_from)

    logger.info(
        f"Training {network_config.layout} network ({model.parameter_count} parameters) "
        f"on {len(manifest.entries)} samples for {train_config.epochs} epochs"
    )
    history = trainer.run(out_dir, on_epoch=on_epoch)
    model.network.to("cpu")
    return model, history
