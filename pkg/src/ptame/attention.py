"""Trainable attention mechanism: per-layer feature branches and a fusion
module that turn auxiliary feature maps into class-specific explanation maps.

Each branch applies a channel-preserving 1x1 convolution, batch norm, a
parameter-free skip connection, ReLU, and bilinear upscaling to the largest
feature resolution. The fusion module concatenates the processed branches,
applies a 1x1 convolution down to one channel per class, and a sigmoid, so
every explanation value lies in [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import container
from .errors import ConfigurationError, DegenerateInputError, FormatError, InputError
from .models import FeatureMapSet, state_digest

ATTENTION_MAGIC = b"PTAT"


@dataclass(frozen=True)
class ExplanationMaps:
    """Per-class saliency maps E of shape (C, h, w), values in [0, 1]."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 3:
            raise InputError(f"explanation maps must be (C, h, w), got shape {data.shape}")
        if data.size and (data.min() < 0.0 or data.max() > 1.0):
            raise InputError("explanation values outside [0, 1]")
        object.__setattr__(self, "data", data)

    @property
    def class_count(self) -> int:
        return self.data.shape[0]

    @property
    def resolution(self) -> int:
        return self.data.shape[1] * self.data.shape[2]


def bilinear_upscale(source, target_hw: tuple[int, int]):
    """Upscale a (c, h, w) map to (c, *target_hw) with half-pixel-center
    bilinear interpolation. Downscale requests are rejected."""
    is_numpy = isinstance(source, np.ndarray)
    t = torch.as_tensor(source)
    if t.ndim != 3:
        raise InputError(f"expected a 3-D map, got shape {tuple(t.shape)}")
    th, tw = target_hw
    if th < t.shape[1] or tw < t.shape[2]:
        raise InputError(f"target {target_hw} smaller than source {tuple(t.shape[1:])}")
    if (th, tw) == tuple(t.shape[1:]):
        out = t.clone()
    else:
        out = F.interpolate(t.unsqueeze(0), size=(th, tw), mode="bilinear",
                            align_corners=False).squeeze(0)
    return out.numpy() if is_numpy else out


def _upscale_batch(x: torch.Tensor, target_hw: tuple[int, int]) -> torch.Tensor:
    if tuple(x.shape[-2:]) == tuple(target_hw):
        return x
    return F.interpolate(x, size=target_hw, mode="bilinear", align_corners=False)


class FeatureBranch(nn.Module):
    """One per-layer processing path: 1x1 conv -> BN -> skip -> ReLU -> upscale.

    The skip path is the identity when channel counts match, otherwise a
    parameter-free channel average replicated across branch channels; it
    bypasses both the convolution and the batch norm.
    """

    def __init__(self, in_channels: int, branch_channels: int, target_hw: tuple[int, int]):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, branch_channels, kernel_size=1)
        self.bn = nn.BatchNorm2d(branch_channels)
        self.target_hw = tuple(target_hw)
        self._identity_skip = in_channels == branch_channels

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.conv.in_channels:
            raise ConfigurationError(
                f"branch expects {self.conv.in_channels} channels, got {x.shape[1]}")
        skip = x if self._identity_skip else \
            x.mean(dim=1, keepdim=True).expand(-1, self.conv.out_channels, -1, -1)
        v = F.relu(self.bn(self.conv(x)) + skip)
        return _upscale_batch(v, self.target_hw)


class FusionModule(nn.Module):
    """Concatenate processed branches, 1x1 conv to C channels, sigmoid."""

    def __init__(self, total_channels: int, class_count: int):
        super().__init__()
        self.conv = nn.Conv2d(total_channels, class_count, kernel_size=1)

    def forward(self, processed: Sequence[torch.Tensor]) -> torch.Tensor:
        sizes = {tuple(p.shape[-2:]) for p in processed}
        if len(sizes) != 1:
            raise ConfigurationError(f"branch outputs disagree on spatial size: {sorted(sizes)}")
        stacked = torch.cat(list(processed), dim=1)
        if stacked.shape[1] != self.conv.in_channels:
            raise ConfigurationError(
                f"fusion expects {self.conv.in_channels} channels, got {stacked.shape[1]}")
        return torch.sigmoid(self.conv(stacked))


class AttentionMechanism(nn.Module):
    """Feature branches plus fusion; the only trainable component in the toolkit."""

    def __init__(self, branch_channels: Sequence[int], target_hw: tuple[int, int],
                 class_count: int, layer_names: Sequence[str] | None = None, seed: int = 0):
        super().__init__()
        self.branch_channels = tuple(int(c) for c in branch_channels)
        self.target_hw = tuple(target_hw)
        self.class_count = int(class_count)
        self.layer_names = tuple(layer_names) if layer_names is not None else \
            tuple(f"branch{i}" for i in range(len(self.branch_channels)))
        self.branches = nn.ModuleList(
            [FeatureBranch(c, c, self.target_hw) for c in self.branch_channels])
        self.fusion = FusionModule(sum(self.branch_channels), self.class_count)
        self.initialize(seed)

    @classmethod
    def from_feature_shapes(cls, shapes: Sequence[tuple[int, int, int]], class_count: int,
                            layer_names: Sequence[str] | None = None, seed: int = 0):
        """Size the mechanism from per-layer (d, h, w) shapes; the output
        resolution is the largest input feature resolution."""
        if len(shapes) < 1:
            raise ConfigurationError("need at least one feature layer")
        target_hw = (max(s[1] for s in shapes), max(s[2] for s in shapes))
        return cls([s[0] for s in shapes], target_hw, class_count, layer_names, seed)

    def initialize(self, seed: int) -> None:
        """Fan-in-scaled uniform conv kernels, identity BN, zero biases.

        A zero fusion bias starts every map at sigmoid(~0) = 0.5, so training
        begins from non-degenerate masks.
        """
        generator = torch.Generator().manual_seed(seed)
        for conv in [b.conv for b in self.branches] + [self.fusion.conv]:
            bound = 1.0 / (conv.in_channels ** 0.5)
            nn.init.uniform_(conv.weight, -bound, bound, generator=generator)
            nn.init.zeros_(conv.bias)
        for branch in self.branches:
            nn.init.ones_(branch.bn.weight)
            nn.init.zeros_(branch.bn.bias)
            branch.bn.running_mean.zero_()
            branch.bn.running_var.fill_(1.0)
            branch.bn.num_batches_tracked.zero_()

    def forward(self, features: Sequence[torch.Tensor], training: bool = False) -> torch.Tensor:
        """Batched explanation maps (b, C, h, w) from batched feature maps."""
        if len(features) != len(self.branches):
            raise ConfigurationError(
                f"got {len(features)} feature layers for {len(self.branches)} branches")
        self.train(training)
        processed = [branch(f) for branch, f in zip(self.branches, features)]
        return self.fusion(processed)

    @property
    def digest(self) -> str:
        return state_digest(self)


def feature_branch_forward(feature_map, branch: FeatureBranch, training: bool = False):
    """Single-map branch forward: (d, h, w) in, (d_branch, *target) out."""
    is_numpy = isinstance(feature_map, np.ndarray)
    t = torch.as_tensor(feature_map, dtype=torch.float32) if is_numpy else feature_map
    branch.train(training)
    with torch.no_grad() if not t.requires_grad else torch.enable_grad():
        out = branch(t.unsqueeze(0)).squeeze(0)
    return out.numpy() if is_numpy else out


def fuse(processed: Sequence, fusion: FusionModule) -> ExplanationMaps:
    """Single-image fusion of processed branch outputs."""
    tensors = [torch.as_tensor(p, dtype=torch.float32).unsqueeze(0) for p in processed]
    fusion.eval()
    with torch.no_grad():
        out = fusion(tensors).squeeze(0)
    return ExplanationMaps(out.numpy())


def attention_forward(features: FeatureMapSet, mechanism: AttentionMechanism,
                      training: bool = False) -> ExplanationMaps:
    """Single-image end-to-end attention forward."""
    batched = [torch.from_numpy(np.ascontiguousarray(m, dtype=np.float32)).unsqueeze(0)
               for m in features.maps]
    with torch.no_grad() if not training else torch.enable_grad():
        out = mechanism(batched, training=training)
    return ExplanationMaps(out.squeeze(0).detach().numpy())


def select_class_map(maps, class_index: int) -> np.ndarray:
    """Detached copy of the 2-D explanation slice for one class."""
    data = maps.data if isinstance(maps, ExplanationMaps) else np.asarray(maps)
    if data.ndim != 3:
        raise InputError(f"expected (C, h, w) maps, got shape {data.shape}")
    if not 0 <= class_index < data.shape[0]:
        raise InputError(f"class index {class_index} outside [0, {data.shape[0]})")
    return np.array(data[class_index], copy=True)


def branch_contributions(fusion, branch_channels: Sequence[int] | None = None, *,
                         d_branch: int | None = None, s: int | None = None) -> list[float]:
    """Per-branch share of the fusion kernel's absolute weight mass, in percent.

    Branch widths are given either explicitly (one entry per branch) or as a
    uniform (d_branch, s) pair. Percentages sum to 100.
    """
    if isinstance(fusion, FusionModule):
        kernel = fusion.conv.weight.detach().numpy()
    elif isinstance(fusion, AttentionMechanism):
        kernel = fusion.fusion.conv.weight.detach().numpy()
        if branch_channels is None and d_branch is None:
            branch_channels = fusion.branch_channels
    else:
        kernel = fusion
    kernel = np.asarray(kernel, dtype=np.float64)
    if branch_channels is None:
        if d_branch is None or s is None:
            raise ConfigurationError("give branch_channels or both d_branch and s")
        branch_channels = [d_branch] * s
    widths = [int(c) for c in branch_channels]
    kernel = kernel.reshape(kernel.shape[0], -1)  # (C_out, C_in) for a 1x1 kernel
    if kernel.shape[1] != sum(widths):
        raise ConfigurationError(
            f"fusion kernel has {kernel.shape[1]} input channels, branches sum to {sum(widths)}")
    mass = np.abs(kernel).sum(axis=0)
    total = mass.sum()
    if total == 0.0:
        raise DegenerateInputError("fusion kernel is all-zero")
    out, offset = [], 0
    for width in widths:
        out.append(float(mass[offset:offset + width].sum() / total * 100.0))
        offset += width
    return out


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_attention(mechanism: AttentionMechanism, metadata: dict | None = None) -> bytes:
    tensors = {name: t.detach().numpy() for name, t in mechanism.state_dict().items()}
    header = {"kind": "attention",
              "branch_channels": list(mechanism.branch_channels),
              "target_hw": list(mechanism.target_hw),
              "class_count": mechanism.class_count,
              "layer_names": list(mechanism.layer_names),
              "metadata": metadata or {},
              "digest": mechanism.digest}
    return container.pack(ATTENTION_MAGIC, header, tensors)


def load_attention(data: bytes) -> tuple[AttentionMechanism, dict]:
    header, tensors = container.unpack(data, ATTENTION_MAGIC)
    if header.get("kind") != "attention":
        raise FormatError("not an attention checkpoint")
    mechanism = AttentionMechanism(header["branch_channels"], tuple(header["target_hw"]),
                                   header["class_count"], header["layer_names"])
    state = {name: torch.from_numpy(arr.copy()) for name, arr in tensors.items()}
    try:
        mechanism.load_state_dict(state)
    except RuntimeError as exc:
        raise FormatError(f"attention state incompatible: {exc}") from exc
    if mechanism.digest != header.get("digest"):
        raise FormatError("attention checkpoint digest mismatch")
    mechanism.eval()
    return mechanism, header.get("metadata", {})


def save_attention_file(mechanism: AttentionMechanism, path, metadata: dict | None = None) -> None:
    with open(path, "wb") as fh:
        fh.write(save_attention(mechanism, metadata))


def load_attention_file(path) -> tuple[AttentionMechanism, dict]:
    with open(path, "rb") as fh:
        return load_attention(fh.read())
