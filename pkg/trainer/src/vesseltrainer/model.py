"""Torch implementation of the dual-branch patch network.

One module serves both weight variants: the direction/bifurcation model
("dbc") trains the direction softmax and the final sigmoid as a
bifurcation detector, the stop model ("stc") trains the same sigmoid as a
stop detector and treats the direction softmax as an internal layer.  The
state dict maps one-to-one onto the canonical AWT tensor names, so an
exported file is readable by any conforming inference engine.
"""

from __future__ import annotations

import numpy as np
import torch
from torch import nn

from .formats import ArchSpec, tensor_order

BN_EPS = 1e-5
BCE_CLAMP = 1e-7


class _Branch(nn.Module):
    """Seven dilated 3x3x3 conv layers with batch norm and ReLU."""

    def __init__(self, arch: ArchSpec):
        super().__init__()
        convs = []
        norms = []
        cin = 1
        for dilation in arch.dilations:
            convs.append(
                nn.Conv3d(cin, arch.channels, 3, padding=dilation, dilation=dilation)
            )
            norms.append(nn.BatchNorm3d(arch.channels, eps=BN_EPS))
            cin = arch.channels
        self.convs = nn.ModuleList(convs)
        self.norms = nn.ModuleList(norms)

    def forward(self, x):
        for conv, norm in zip(self.convs, self.norms):
            x = torch.relu(norm(conv(x)))
        return x


class TrackNet(nn.Module):
    """Dual-resolution patch network returning both head logits."""

    def __init__(self, arch: ArchSpec):
        super().__init__()
        self.arch = arch
        self.b1 = _Branch(arch)
        self.b2 = _Branch(arch)
        self.direction = nn.Linear(2 * arch.channels, arch.n_directions)
        self.patch1 = nn.Linear(arch.n_directions, arch.hidden)
        self.patch2 = nn.Linear(arch.hidden, 1)

    def forward(self, p1, p2):
        """(B,1,S,S,S) patch pair -> direction logits (B,N), scalar logit (B,)."""
        pooled = torch.cat([self.b1(p1), self.b2(p2)], dim=1).mean(dim=(2, 3, 4))
        logits = self.direction(pooled)
        # The sigmoid head consumes the softmax output, not the logits.
        hidden = torch.relu(self.patch1(torch.softmax(logits, dim=1)))
        return logits, self.patch2(hidden).squeeze(1)


def _slots(model: TrackNet) -> dict:
    """Canonical AWT name -> live torch tensor (parameter or buffer)."""
    slots = {}
    for name, branch in (("b1", model.b1), ("b2", model.b2)):
        for i, (conv, norm) in enumerate(zip(branch.convs, branch.norms), start=1):
            slots[f"{name}.conv{i}.weight"] = conv.weight
            slots[f"{name}.conv{i}.bias"] = conv.bias
            slots[f"{name}.norm{i}.scale"] = norm.weight
            slots[f"{name}.norm{i}.shift"] = norm.bias
            slots[f"{name}.norm{i}.mean"] = norm.running_mean
            slots[f"{name}.norm{i}.var"] = norm.running_var
    slots["head.direction.weight"] = model.direction.weight
    slots["head.direction.bias"] = model.direction.bias
    slots["head.patch1.weight"] = model.patch1.weight
    slots["head.patch1.bias"] = model.patch1.bias
    slots["head.patch2.weight"] = model.patch2.weight
    slots["head.patch2.bias"] = model.patch2.bias
    return slots


def export_tensors(model: TrackNet) -> dict:
    """Snapshot the model as canonical-name float32 numpy arrays."""
    return {
        name: tensor.detach().cpu().numpy().astype(np.float32)
        for name, tensor in _slots(model).items()
    }


def import_tensors(model: TrackNet, tensors: dict) -> TrackNet:
    """Load canonical-name arrays (e.g. from read_awt) into the model."""
    slots = _slots(model)
    expected = {name for name, _ in tensor_order(model.arch)}
    if set(tensors) != expected:
        raise ValueError("tensor names do not match the model architecture")
    with torch.no_grad():
        for name, value in tensors.items():
            slot = slots[name]
            value = torch.as_tensor(np.asarray(value), dtype=slot.dtype)
            if value.shape != slot.shape:
                raise ValueError(f"{name}: expected shape {tuple(slot.shape)}, "
                                 f"got {tuple(value.shape)}")
            slot.copy_(value)
    return model


def clamped_bce(logit, target):
    """Binary cross entropy on sigmoid(logit), clamped to [1e-7, 1 - 1e-7]."""
    p = torch.sigmoid(logit).clamp(BCE_CLAMP, 1.0 - BCE_CLAMP)
    return -(target * torch.log(p) + (1.0 - target) * torch.log(1.0 - p))


def dbc_loss(logits, scalar_logit, labels, flags, lambda_b: float = 5.0):
    """Per-batch mean of direction CE + lambda_b * bifurcation BCE."""
    ce = -(labels * torch.log_softmax(logits, dim=1)).sum(dim=1)
    bce = clamped_bce(scalar_logit, flags)
    return (ce + lambda_b * bce).mean(), ce.mean(), bce.mean()


def stc_loss(scalar_logit, flags):
    """Per-batch mean stop BCE."""
    return clamped_bce(scalar_logit, flags).mean()
