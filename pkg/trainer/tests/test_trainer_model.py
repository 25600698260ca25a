"""Model layer: canonical export mapping, analytic gradients, loss forms."""

import math

import numpy as np
import pytest
import torch

from vesseltrainer.formats import ArchSpec, tensor_order
from vesseltrainer.model import (
    TrackNet,
    clamped_bce,
    dbc_loss,
    export_tensors,
    import_tensors,
    stc_loss,
)

TINY = ArchSpec(patch_size=5, channels=2, n_directions=6, hidden=3, variant="dbc")


def tiny_model(seed=0, variant="dbc"):
    torch.manual_seed(seed)
    arch = ArchSpec(patch_size=5, channels=2, n_directions=6, hidden=3,
                    variant=variant)
    model = TrackNet(arch)
    with torch.no_grad():
        for branch in (model.b1, model.b2):
            for norm in branch.norms:
                norm.running_mean.normal_(0.0, 0.1)
                norm.running_var.uniform_(0.5, 1.5)
    return model


class TestExportMapping:
    def test_names_and_shapes_match_canonical_order(self):
        model = tiny_model()
        tensors = export_tensors(model)
        assert list(tensors) == [name for name, _ in tensor_order(model.arch)]
        for name, shape in tensor_order(model.arch):
            assert tensors[name].shape == shape
            assert tensors[name].dtype == np.float32

    def test_round_trip_preserves_outputs(self):
        source = tiny_model(seed=1)
        source.eval()
        target = tiny_model(seed=2)
        target.eval()
        import_tensors(target, export_tensors(source))
        p1 = torch.randn(3, 1, 5, 5, 5)
        p2 = torch.randn(3, 1, 5, 5, 5)
        with torch.no_grad():
            logits_a, z_a = source(p1, p2)
            logits_b, z_b = target(p1, p2)
        torch.testing.assert_close(logits_a, logits_b)
        torch.testing.assert_close(z_a, z_b)

    def test_import_rejects_wrong_names(self):
        model = tiny_model()
        tensors = export_tensors(model)
        tensors["b1.conv9.weight"] = tensors.pop("b1.conv1.weight")
        with pytest.raises(ValueError, match="names"):
            import_tensors(model, tensors)

    def test_import_rejects_wrong_shape(self):
        model = tiny_model()
        tensors = export_tensors(model)
        tensors["head.patch2.bias"] = np.zeros(4, dtype=np.float32)
        with pytest.raises(ValueError, match="shape"):
            import_tensors(model, tensors)


class TestGradients:
    def test_gradcheck_full_loss(self):
        """Analytic gradients of the combined loss match finite differences
        through the whole network (double precision, inference-mode BN)."""
        model = tiny_model().double().eval()
        p1 = torch.randn(2, 1, 5, 5, 5, dtype=torch.float64)
        p2 = torch.randn(2, 1, 5, 5, 5, dtype=torch.float64)
        labels = torch.tensor([[0.5, 0.5, 0, 0, 0, 0],
                               [0, 0, 1.0, 0, 0, 0]], dtype=torch.float64)
        flags = torch.tensor([1.0, 0.0], dtype=torch.float64)

        names = [name for name, _ in model.named_parameters()]
        buffers = dict(model.named_buffers())

        def objective(*params):
            mapping = dict(zip(names, params))
            mapping.update(buffers)
            logits, z = torch.func.functional_call(model, mapping, (p1, p2))
            loss, _, _ = dbc_loss(logits, z, labels, flags, lambda_b=5.0)
            return loss

        params = tuple(p.detach().clone().requires_grad_(True)
                       for _, p in model.named_parameters())
        assert torch.autograd.gradcheck(objective, params, eps=1e-6, atol=1e-4)


class TestLosses:
    def test_uniform_direction_loss_closed_form(self):
        n = 40
        logits = torch.zeros(2, n)
        z = torch.zeros(2)
        labels = torch.zeros(2, n)
        labels[0, 3] = 1.0
        labels[1, 1] = 0.5
        labels[1, 7] = 0.5
        flags = torch.tensor([1.0, 0.0])
        loss, ce, bce = dbc_loss(logits, z, labels, flags, lambda_b=5.0)
        assert math.isclose(float(ce), math.log(n), rel_tol=0, abs_tol=1e-6)
        assert math.isclose(float(bce), math.log(2.0), rel_tol=0, abs_tol=1e-7)
        assert math.isclose(float(loss), math.log(n) + 5.0 * math.log(2.0),
                            rel_tol=0, abs_tol=1e-5)

    def test_stop_loss_closed_form(self):
        z = torch.zeros(3)
        flags = torch.tensor([1.0, 0.0, 1.0])
        assert math.isclose(float(stc_loss(z, flags)), math.log(2.0),
                            rel_tol=0, abs_tol=1e-7)

    def test_bce_clamp_keeps_loss_finite(self):
        value = clamped_bce(torch.tensor([-40.0]), torch.tensor([1.0]))
        expected = -math.log(1e-7)
        assert math.isclose(float(value), expected, rel_tol=1e-5)

    def test_perfect_prediction_loss_is_small(self):
        labels = torch.zeros(1, 10)
        labels[0, 4] = 1.0
        logits = torch.full((1, 10), -30.0)
        logits[0, 4] = 30.0
        loss, _, _ = dbc_loss(logits, torch.tensor([30.0]), labels,
                              torch.tensor([1.0]))
        assert float(loss) < 1e-5

    def test_lambda_scales_bifurcation_term(self):
        logits = torch.zeros(1, 8)
        labels = torch.zeros(1, 8)
        labels[0, 0] = 1.0
        flags = torch.tensor([1.0])
        loss1, ce, bce = dbc_loss(logits, torch.zeros(1), labels, flags, lambda_b=1.0)
        loss9, _, _ = dbc_loss(logits, torch.zeros(1), labels, flags, lambda_b=9.0)
        assert math.isclose(float(loss9 - loss1), 8.0 * float(bce), abs_tol=1e-6)
