"""Unit tests for the orthogonality penalty and the training loss."""
import math

import pytest
import torch
import torch.nn as nn

from trusfuse.errors import ConfigError, DataError
from trusfuse.ortho_reg import KernelMatrix, kernel_matrix, kernel_set, ortho_penalty, penalty_sum, total_loss


@pytest.mark.unit
class TestKernelMatrix:
    """Reshaping kernels into (C_out, fan_in) matrices."""

    def test_pointwise_kernel(self):
        """A 1x1x1 kernel from 3 to 2 channels is a 2x3 matrix."""
        conv = nn.Conv3d(3, 2, kernel_size=1, bias=False)
        assert kernel_matrix(conv.weight).matrix.shape == (2, 3)

    def test_spatial_kernel(self):
        """A 3x3x3 kernel from 2 to 4 channels is a 4x54 matrix."""
        conv = nn.Conv3d(2, 4, kernel_size=3, bias=False)
        assert kernel_matrix(conv.weight).matrix.shape == (4, 54)

    def test_rank_one_rejected(self):
        """Bias vectors are not kernels."""
        with pytest.raises(ConfigError, match="rank 1"):
            kernel_matrix(torch.zeros(4), origin="head.bias")

    def test_empty_matrix_rejected(self):
        """A matrix with no columns is rejected."""
        with pytest.raises(ConfigError):
            KernelMatrix(torch.zeros(2, 0))


@pytest.mark.unit
class TestPenalty:
    """Values and properties of the penalty."""

    def test_identity_is_zero(self):
        """An identity kernel has zero penalty."""
        assert ortho_penalty(torch.eye(3)).item() == 0.0

    def test_ones_matrix(self):
        """For a 2x2 all-ones kernel the gram is all twos: penalty 6, off-diagonal 4."""
        w = torch.ones(2, 2)
        assert ortho_penalty(w).item() == pytest.approx(6.0)
        assert ortho_penalty(w, form="off_diagonal").item() == pytest.approx(4.0)

    def test_scaled_identity(self):
        """2 * I2 is orthogonal but not orthonormal: penalty 6."""
        assert ortho_penalty(2.0 * torch.eye(2)).item() == 6.0

    def test_diagonal_kernel(self):
        """diag(2, 0) gives |4 - 1| + |0 - 1| = 4."""
        assert ortho_penalty(torch.tensor([[2.0, 0.0], [0.0, 0.0]])).item() == pytest.approx(4.0)

    def test_orthonormal_rows(self):
        """A kernel with orthonormal rows has near-zero penalty."""
        q, _ = torch.linalg.qr(torch.randn(5, 3, dtype=torch.float64, generator=torch.Generator().manual_seed(0)))
        assert ortho_penalty(KernelMatrix(q.t())).item() < 1e-10

    def test_row_permutation_invariant(self):
        """Permuting output channels leaves the penalty unchanged."""
        w = torch.randn(4, 6, dtype=torch.float64, generator=torch.Generator().manual_seed(1))
        perm = torch.tensor([2, 0, 3, 1])
        assert ortho_penalty(w[perm]).item() == pytest.approx(ortho_penalty(w).item(), rel=1e-12)

    def test_non_negative(self):
        """The penalty is never negative."""
        generator = torch.Generator().manual_seed(2)
        for _ in range(20):
            assert ortho_penalty(torch.randn(3, 4, generator=generator)).item() >= 0.0

    def test_unknown_form(self):
        """Only the two documented forms exist."""
        with pytest.raises(ConfigError, match="Unknown penalty form"):
            ortho_penalty(torch.eye(2), form="frobenius")

    def test_gradcheck(self):
        """Autograd matches finite differences away from the kinks."""
        w = torch.randn(3, 4, dtype=torch.float64, generator=torch.Generator().manual_seed(3), requires_grad=True)
        assert torch.autograd.gradcheck(ortho_penalty, (w,))

    def test_descent_reaches_orthonormal(self):
        """Subgradient descent with a decaying step drives the penalty close to zero."""
        generator = torch.Generator().manual_seed(4)
        w = (0.5 * torch.randn(8, 8, dtype=torch.float64, generator=generator)).requires_grad_(True)
        start = ortho_penalty(w).item()
        for step in range(5000):
            # step 0.01, halved every 250 steps after the first 1000
            lr = 0.01 * 0.5 ** max(0, (step - 1000) // 250)
            penalty = ortho_penalty(w)
            (grad,) = torch.autograd.grad(penalty, w)
            with torch.no_grad():
                w -= lr * grad
        final = ortho_penalty(w).item()
        assert final < 1e-3
        assert final < start

    def test_penalty_sum_empty(self):
        """No kernels sum to zero."""
        assert penalty_sum([]).item() == 0.0


@pytest.mark.unit
class TestTotalLoss:
    """Cross-entropy plus weighted penalty."""

    def test_uniform_logits(self):
        """Zero logits give ln 2 cross-entropy."""
        loss = total_loss(torch.zeros(2, 2), torch.tensor([1, 0]), [], ortho_lambda=0.0)
        assert loss.total.item() == pytest.approx(math.log(2))

    def test_weighted_penalty(self):
        """lambda 1e-5 on a penalty of 6 adds 6e-5."""
        kernels = [KernelMatrix(torch.ones(2, 2))]
        loss = total_loss(torch.zeros(2, 2), torch.tensor([1, 0]), kernels, ortho_lambda=1e-5)
        assert loss.penalty.item() == pytest.approx(6.0)
        assert loss.total.item() == pytest.approx(math.log(2) + 6e-5, abs=1e-7)

    def test_zero_lambda_is_cross_entropy(self):
        """With lambda 0 the total is the cross-entropy and the penalty carries no graph."""
        w = torch.ones(2, 2, requires_grad=True)
        loss = total_loss(torch.zeros(2, 2), torch.tensor([1, 0]), [KernelMatrix(w)], ortho_lambda=0.0)
        assert loss.total is loss.ce
        assert not loss.penalty.requires_grad

    def test_gradcheck_with_penalty(self):
        """Gradients through cross-entropy and penalty match finite differences."""
        generator = torch.Generator().manual_seed(5)
        logits = torch.randn(4, 2, dtype=torch.float64, generator=generator, requires_grad=True)
        w = torch.randn(3, 4, dtype=torch.float64, generator=generator, requires_grad=True)
        labels = torch.tensor([1, 0, 1, 0])

        def loss(logits, w):
            return total_loss(logits, labels, [KernelMatrix(w)], ortho_lambda=0.5).total

        assert torch.autograd.gradcheck(loss, (logits, w))

    def test_empty_batch(self):
        """An empty batch has no loss."""
        with pytest.raises(DataError, match="empty batch"):
            total_loss(torch.zeros(0, 2), torch.zeros(0, dtype=torch.long), [], ortho_lambda=0.0)

    def test_negative_lambda(self):
        """lambda must be non-negative."""
        with pytest.raises(ConfigError):
            total_loss(torch.zeros(2, 2), torch.tensor([1, 0]), [], ortho_lambda=-1.0)

    def test_non_binary_labels(self):
        """Labels outside {0, 1} are rejected."""
        with pytest.raises(DataError, match="binary"):
            total_loss(torch.zeros(2, 2), torch.tensor([2, 0]), [], ortho_lambda=0.0)


@pytest.mark.unit
class TestKernelSet:
    """Which parameters the penalty covers."""

    def test_every_conv_is_included(self, tiny_model):
        """One kernel per Conv3d, fusion convolutions included."""
        n_convs = sum(isinstance(m, nn.Conv3d) for m in tiny_model.network.modules())
        kernels = kernel_set(tiny_model.network)
        assert len(kernels) == n_convs
        assert any(k.origin.startswith("fusion.") for k in kernels)

    def test_penalty_does_not_reach_head_or_norms(self, tiny_model):
        """Backpropagating the penalty alone touches only convolution weights."""
        penalty_sum(kernel_set(tiny_model.network)).backward()
        for name, param in tiny_model.network.named_parameters():
            module_name = name.rsplit(".", 1)[0]
            module = tiny_model.network.get_submodule(module_name)
            if isinstance(module, nn.Conv3d) and name.endswith(".weight"):
                assert param.grad is not None, name
            else:
                assert param.grad is None, name
