"""Unit tests for the schedule, batching and training loop."""
import json
from collections import Counter

import pytest
import torch
import torch.nn as nn
from pydantic import ValidationError

from trusfuse.errors import ConfigError, DataError, NumericError
from trusfuse.network import build_model
from trusfuse.ortho_reg import LossBreakdown, kernel_set, penalty_sum
from trusfuse.trainer import (
    EpochRecord,
    RunHistory,
    TrainConfig,
    Trainer,
    balanced_batches,
    poly_lr,
)
from trusfuse.videodata import DatasetManifest, ManifestEntry


def _manifest(n_pos, n_neg):
    return DatasetManifest(entries=[
        ManifestEntry(id=f"s{i:02d}", bmode_path=f"s{i:02d}_bmode.trus", swe_path=f"s{i:02d}_swe.trus",
                      label=1 if i < n_pos else 0)
        for i in range(n_pos + n_neg)
    ])


@pytest.mark.unit
class TestPolyLr:
    """The poly learning-rate schedule."""

    def test_first_epoch_is_base(self):
        """Epoch 0 runs at the base rate."""
        assert poly_lr(0, 1e-4, 200, 0.9) == 1e-4

    def test_half_horizon(self):
        """Halfway through the horizon the rate is base * 0.5 ** 0.9."""
        assert poly_lr(100, 1e-4, 200, 0.9) == pytest.approx(5.3589e-5, abs=1e-9)

    def test_beyond_horizon(self):
        """Past the horizon the rate stays at zero."""
        assert poly_lr(200, 1e-4, 200, 0.9) == 0.0
        assert poly_lr(250, 1e-4, 200, 0.9) == 0.0

    def test_monotone(self):
        """The rate never increases."""
        rates = [poly_lr(e, 0.01, 30, 0.9) for e in range(30)]
        assert all(a >= b for a, b in zip(rates, rates[1:]))

    def test_invalid_horizon(self):
        """A non-positive horizon is a config error."""
        with pytest.raises(ConfigError):
            poly_lr(0, 1e-4, 0, 0.9)

    def test_negative_epoch(self):
        """Epochs start at zero."""
        with pytest.raises(ConfigError):
            poly_lr(-1, 1e-4, 10, 0.9)


@pytest.mark.unit
class TestTrainConfig:
    """Training config defaults and validation."""

    def test_defaults(self):
        """Defaults follow the published schedule."""
        config = TrainConfig()
        assert (config.epochs, config.base_lr, config.poly_power, config.momentum) == (300, 1e-4, 0.9, 0.9)
        assert config.ortho_lambda == 1e-5 and config.batch_size == 2
        assert config.horizon == 300

    def test_explicit_horizon(self):
        """decay_horizon overrides the epoch count as horizon."""
        assert TrainConfig(epochs=300, decay_horizon=200).horizon == 200

    @pytest.mark.parametrize("kwargs", [
        {"epochs": 0}, {"base_lr": 0.0}, {"decay_horizon": 0}, {"ortho_lambda": -1e-5},
        {"batch_size": 4}, {"ortho_form": "frobenius"}, {"unknown": 1},
    ])
    def test_invalid(self, kwargs):
        """Invalid values are rejected."""
        with pytest.raises(ValidationError):
            TrainConfig(**kwargs)


@pytest.mark.unit
class TestBalancedBatches:
    """One positive and one negative per batch."""

    def test_equal_classes(self):
        """3/3 gives three pairs using every sample once."""
        pairs = balanced_batches(_manifest(3, 3), shuffle_seed=0, epoch=0)
        assert len(pairs) == 3
        assert sorted(p for p, _ in pairs) == ["s00", "s01", "s02"]
        assert sorted(n for _, n in pairs) == ["s03", "s04", "s05"]

    def test_minority_cycles(self):
        """5 positives and 2 negatives give five pairs; negatives repeat 3 and 2 times."""
        pairs = balanced_batches(_manifest(5, 2), shuffle_seed=1, epoch=0)
        assert len(pairs) == 5
        assert sorted(p for p, _ in pairs) == [f"s{i:02d}" for i in range(5)]
        assert sorted(Counter(n for _, n in pairs).values()) == [2, 3]

    def test_deterministic_per_epoch(self):
        """The same seed and epoch give the same order."""
        manifest = _manifest(6, 6)
        assert balanced_batches(manifest, 4, 2) == balanced_batches(manifest, 4, 2)

    def test_epochs_reshuffle(self):
        """Different epochs give different orders."""
        manifest = _manifest(8, 8)
        orders = {tuple(balanced_batches(manifest, 0, epoch)) for epoch in range(5)}
        assert len(orders) > 1

    def test_missing_class(self):
        """A manifest without negatives cannot be batched."""
        with pytest.raises(DataError, match="no negative"):
            balanced_batches(_manifest(3, 0), 0, 0)


@pytest.mark.unit
class TestRunHistory:
    """History persistence."""

    def test_jsonl_roundtrip(self, temp_dir):
        """Records written as JSON lines read back equal."""
        history = RunHistory()
        for epoch in range(3):
            history.append(EpochRecord(epoch=epoch, lr=0.1, loss=1.0, ce=0.9, penalty=10.0, seconds=0.5))
        path = history.write_jsonl(temp_dir / "history.jsonl")
        assert len(path.read_text().splitlines()) == 3
        assert RunHistory.read_jsonl(path) == history
        assert history.last_epoch == 2

    def test_empty_history(self):
        """An empty history has last epoch -1."""
        assert RunHistory().last_epoch == -1


@pytest.mark.unit
class TestTrainer:
    """Training steps on the tiny phantom set."""

    def test_batch_positive_first(self, tiny_dataset, tiny_model, tiny_train_config):
        """A pair becomes a (2, C, T, H, W) batch with labels [1, 0]."""
        trainer = Trainer(tiny_model, tiny_train_config, tiny_dataset)
        pair = balanced_batches(tiny_dataset, 0, 0)[0]
        bmode, swe, labels = trainer.batch(pair)
        assert bmode.shape == swe.shape == (2, 1, 8, 16, 16)
        assert labels.tolist() == [1, 0]

    def test_epoch_updates_parameters(self, tiny_dataset, tiny_model, tiny_train_config):
        """One epoch changes the weights and records the scheduled rate."""
        before = tiny_model.parameters_digest()
        record = Trainer(tiny_model, tiny_train_config, tiny_dataset).train_epoch(0)
        assert record.lr == tiny_train_config.base_lr
        assert record.loss == pytest.approx(record.ce + tiny_train_config.ortho_lambda * record.penalty, rel=1e-5)
        assert tiny_model.parameters_digest() != before

    def test_penalty_changes_first_step(self, tiny_dataset, tiny_network_config):
        """Equal seeds: identical step-0 CE, totals apart by lambda times the initial penalty."""
        pair = balanced_batches(tiny_dataset, 0, 0)[0]
        losses, digests = [], []
        for ortho_lambda in (0.0, 1e-5):
            model = build_model(tiny_network_config, seed=0)
            with torch.no_grad():
                initial_penalty = penalty_sum(kernel_set(model.network)).item()
            config = TrainConfig(epochs=1, base_lr=0.01, ortho_lambda=ortho_lambda)
            trainer = Trainer(model, config, tiny_dataset)
            trainer.optimizer.zero_grad()
            trainer.model.network.train()
            loss = trainer.compute_loss(pair)
            loss.total.backward()
            trainer.optimizer.step()
            losses.append(loss)
            digests.append(model.parameters_digest())

        plain, regularized = losses
        assert regularized.ce.item() == pytest.approx(plain.ce.item(), abs=1e-7)
        assert regularized.penalty.item() == pytest.approx(initial_penalty, rel=1e-6)
        gap = regularized.total.item() - plain.total.item()
        assert gap == pytest.approx(1e-5 * initial_penalty, abs=1e-6)
        assert digests[0] != digests[1]

    def test_zero_loss_leaves_parameters(self, tiny_dataset, tiny_model):
        """With lambda 0 and the loss scaled to zero, a step changes no parameter."""
        config = TrainConfig(epochs=1, base_lr=0.01, ortho_lambda=0.0)
        trainer = Trainer(tiny_model, config, tiny_dataset)
        before = {name: p.detach().clone() for name, p in tiny_model.network.named_parameters()}
        trainer.model.network.train()
        trainer.optimizer.zero_grad()
        (0.0 * trainer.compute_loss(balanced_batches(tiny_dataset, 0, 0)[0]).total).backward()
        trainer.optimizer.step()
        for name, param in tiny_model.network.named_parameters():
            assert torch.equal(param.detach(), before[name]), name

    def test_penalty_gradient_stays_on_kernels(self, tiny_dataset, tiny_model):
        """Without the CE term only convolution kernels get gradient; the head still learns from CE."""
        config = TrainConfig(epochs=1, base_lr=0.01, ortho_lambda=1e-5)
        trainer = Trainer(tiny_model, config, tiny_dataset)
        trainer.model.network.train()
        loss = trainer.compute_loss(balanced_batches(tiny_dataset, 0, 0)[0])
        kernels = {id(m.weight) for m in tiny_model.network.modules() if isinstance(m, nn.Conv3d)}

        penalty_grads = torch.autograd.grad(loss.total - loss.ce, list(tiny_model.network.parameters()),
                                            retain_graph=True, allow_unused=True)
        for (name, param), grad in zip(tiny_model.network.named_parameters(), penalty_grads):
            if id(param) not in kernels:
                assert grad is None or not grad.any(), name

        head = [p for n, p in tiny_model.network.named_parameters() if n.startswith("head.")]
        ce_grads = torch.autograd.grad(loss.ce, head)
        assert any(g.abs().sum() > 0 for g in ce_grads)

    def test_non_finite_loss(self, temp_dir, tiny_dataset, tiny_model, tiny_train_config, monkeypatch):
        """A NaN loss stops training with the failing epoch and step recorded."""
        trainer = Trainer(tiny_model, tiny_train_config, tiny_dataset)
        nan = torch.tensor(float("nan"))
        monkeypatch.setattr(trainer, "compute_loss", lambda pair: LossBreakdown(total=nan, ce=nan, penalty=nan))
        with pytest.raises(NumericError) as info:
            trainer.run(temp_dir)
        assert (info.value.epoch, info.value.step) == (0, 0)
        assert info.value.exit_code == 3
        failure = json.loads((temp_dir / "failure.json").read_text())
        assert failure["epoch"] == 0 and failure["step"] == 0

    def test_resume_rejects_other_network(self, temp_dir, tiny_dataset, tiny_model, tiny_train_config,
                                          tiny_network_config):
        """A checkpoint of another network config cannot be resumed."""
        Trainer(tiny_model, tiny_train_config, tiny_dataset).checkpoint(temp_dir / "ckpt")
        other = build_model(tiny_network_config.model_copy(update={"fusion_enabled": False}))
        with pytest.raises(ConfigError, match="different network config"):
            Trainer(other, tiny_train_config, tiny_dataset).resume(temp_dir / "ckpt")
