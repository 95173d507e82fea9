"""Model zoo: frozen backbone classifiers, the auxiliary feature extractor,
toy-model training, checkpoint persistence, and layer-wise randomization.

All models run at desk scale (32x32 inputs, 10 classes). Handles wrap a torch
module together with a content digest over every parameter and buffer, which
is how the frozen-weights invariant is enforced throughout the toolkit.
"""

from __future__ import annotations

import copy
import hashlib
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import container
from .data import ImageTensor, LabeledImageSet
from .errors import ConfigurationError, FormatError, InputError, TrainingError

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"PTCK"


# ---------------------------------------------------------------------------
# Architectures
# ---------------------------------------------------------------------------


class SmallCnnBackbone(nn.Module):
    """VGG-flavor CNN for 32x32 inputs: stacked 3x3 convs with maxpool stages."""

    input_shape = (3, 32, 32)

    def __init__(self, class_count: int):
        super().__init__()
        self.conv1 = nn.Conv2d(3, 32, 3, padding=1)
        self.bn1 = nn.BatchNorm2d(32)
        self.conv2 = nn.Conv2d(32, 64, 3, padding=1)
        self.bn2 = nn.BatchNorm2d(64)
        self.conv3 = nn.Conv2d(64, 128, 3, padding=1)
        self.bn3 = nn.BatchNorm2d(128)
        self.conv4 = nn.Conv2d(128, 128, 3, padding=1)
        self.bn4 = nn.BatchNorm2d(128)
        self.head = nn.Linear(128, class_count)

    def forward(self, x):
        x = F.max_pool2d(F.relu(self.bn1(self.conv1(x))), 2)   # 16
        x = F.max_pool2d(F.relu(self.bn2(self.conv2(x))), 2)   # 8
        x = F.max_pool2d(F.relu(self.bn3(self.conv3(x))), 2)   # 4
        x = F.relu(self.bn4(self.conv4(x)))
        return self.head(x.mean(dim=(2, 3)))


class _ViTBlock(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.ln1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.ln2 = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, 2 * dim)
        self.fc2 = nn.Linear(2 * dim, dim)

    def forward(self, x):
        b, n, d = x.shape
        h = self.ln1(x)
        q, k, v = self.qkv(h).reshape(b, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(d // self.heads), dim=-1)
        h = (attn @ v).transpose(1, 2).reshape(b, n, d)
        x = x + self.proj(h)
        x = x + self.fc2(F.gelu(self.fc1(self.ln2(x))))
        return x


class SmallViTBackbone(nn.Module):
    """Vision transformer for 32x32 inputs: patch 4, 4 heads, 4 blocks."""

    input_shape = (3, 32, 32)

    def __init__(self, class_count: int, dim: int = 128):
        super().__init__()
        self.patch_embed = nn.Conv2d(3, dim, kernel_size=4, stride=4)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, dim))
        self.pos_embed = nn.Parameter(torch.zeros(1, 1 + 64, dim))
        self.blocks = nn.ModuleList([_ViTBlock(dim, heads=4) for _ in range(4)])
        self.ln = nn.LayerNorm(dim)
        self.head = nn.Linear(dim, class_count)

    def forward(self, x):
        x = self.patch_embed(x).flatten(2).transpose(1, 2)     # (b, 64, dim)
        cls = self.cls_token.expand(x.shape[0], -1, -1)
        x = torch.cat([cls, x], dim=1) + self.pos_embed
        for block in self.blocks:
            x = block(x)
        return self.head(self.ln(x)[:, 0])


class _ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.shortcut = nn.Conv2d(cin, cout, 1, stride, bias=False)

    def forward(self, x):
        h = F.relu(self.bn1(self.conv1(x)))
        h = self.bn2(self.conv2(h))
        return F.relu(h + self.shortcut(x))


class ResNetAux(nn.Module):
    """Four-stage residual CNN whose stage outputs are the feature layers.

    Stage shapes on a 32x32 input: (64,16,16), (128,8,8), (256,4,4), (512,2,2).
    """

    input_shape = (3, 32, 32)
    feature_layers = ("stage1", "stage2", "stage3", "stage4")

    def __init__(self, class_count: int):
        super().__init__()
        self.stem_conv = nn.Conv2d(3, 32, 3, padding=1, bias=False)
        self.stem_bn = nn.BatchNorm2d(32)
        self.stage1 = _ResBlock(32, 64, 2)
        self.stage2 = _ResBlock(64, 128, 2)
        self.stage3 = _ResBlock(128, 256, 2)
        self.stage4 = _ResBlock(256, 512, 2)
        self.head = nn.Linear(512, class_count)

    def forward_features(self, x) -> dict[str, torch.Tensor]:
        x = F.relu(self.stem_bn(self.stem_conv(x)))
        feats = {}
        for name in self.feature_layers:
            x = getattr(self, name)(x)
            feats[name] = x
        return feats

    def forward(self, x):
        feats = self.forward_features(x)
        return self.head(feats["stage4"].mean(dim=(2, 3)))


ARCHITECTURES: dict[str, type[nn.Module]] = {
    "cnn_small": SmallCnnBackbone,
    "vit_small": SmallViTBackbone,
    "resnet_aux": ResNetAux,
}


# ---------------------------------------------------------------------------
# Seeded initialization / randomization
# ---------------------------------------------------------------------------

_PARAM_LAYER_TYPES = (nn.Conv2d, nn.Linear, nn.BatchNorm2d, nn.LayerNorm)


def _reset_layer(module: nn.Module, generator: torch.Generator) -> None:
    """Re-draw one layer's state from the architecture's initializer."""
    if isinstance(module, (nn.Conv2d, nn.Linear)):
        nn.init.kaiming_uniform_(module.weight, a=math.sqrt(5), generator=generator)
        if module.bias is not None:
            fan_in = nn.init._calculate_fan_in_and_fan_out(module.weight)[0]
            bound = 1.0 / math.sqrt(fan_in) if fan_in > 0 else 0.0
            nn.init.uniform_(module.bias, -bound, bound, generator=generator)
    elif isinstance(module, (nn.BatchNorm2d, nn.LayerNorm)):
        nn.init.ones_(module.weight)
        nn.init.zeros_(module.bias)
        if isinstance(module, nn.BatchNorm2d):
            module.running_mean.zero_()
            module.running_var.fill_(1.0)
            module.num_batches_tracked.zero_()
    else:
        raise ConfigurationError(f"no initializer for layer type {type(module).__name__}")


def _initialize_module(module: nn.Module, seed: int) -> None:
    generator = torch.Generator().manual_seed(seed)
    for _, layer in parameterized_layers(module):
        _reset_layer(layer, generator)
    for name, param in module.named_parameters(recurse=False):
        # Top-level bare parameters (ViT class token / position embedding).
        nn.init.normal_(param, std=0.02, generator=generator)
        logger.debug("initialized bare parameter %s", name)


def parameterized_layers(module: nn.Module) -> list[tuple[str, nn.Module]]:
    """Conv/linear/normalization leaf modules in input-to-output order."""
    return [(name, m) for name, m in module.named_modules()
            if isinstance(m, _PARAM_LAYER_TYPES)]


# ---------------------------------------------------------------------------
# Handles
# ---------------------------------------------------------------------------


def state_digest(module: nn.Module) -> str:
    """Content hash over every parameter and buffer (includes BN statistics)."""
    h = hashlib.sha256()
    for name, tensor in module.state_dict().items():
        h.update(name.encode("utf-8"))
        h.update(np.ascontiguousarray(tensor.detach().numpy()).tobytes())
    return h.hexdigest()


@dataclass
class ClassifierHandle:
    """A classifier plus identity metadata. Frozen handles never mutate."""

    arch: str
    module: nn.Module
    class_count: int
    frozen: bool = True
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.frozen:
            self.module.eval()
            for p in self.module.parameters():
                p.requires_grad_(False)

    @property
    def digest(self) -> str:
        return state_digest(self.module)

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return self.module.input_shape

    def logits(self, batch: torch.Tensor) -> torch.Tensor:
        """Batched forward in inference mode. Gradients flow to the input
        when grad is enabled; parameters stay frozen either way."""
        self.module.eval()
        return self.module(batch)

    def features(self, batch: torch.Tensor, layers=None) -> list[torch.Tensor]:
        """Batched intermediate feature maps (auxiliary models only)."""
        if not hasattr(self.module, "forward_features"):
            raise ConfigurationError(f"architecture {self.arch!r} exposes no feature layers")
        self.module.eval()
        available = self.module.feature_layers
        layers = tuple(layers) if layers is not None else available
        unknown = [l for l in layers if l not in available]
        if unknown:
            raise ConfigurationError(f"unknown feature layer ids {unknown}; have {list(available)}")
        feats = self.module.forward_features(batch)
        return [feats[l] for l in layers]


def build_model(arch: str, class_count: int, seed: int) -> nn.Module:
    if arch not in ARCHITECTURES:
        raise ConfigurationError(f"unknown architecture {arch!r}; have {sorted(ARCHITECTURES)}")
    module = ARCHITECTURES[arch](class_count)
    _initialize_module(module, seed)
    return module


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------


def classify(handle: ClassifierHandle, image: ImageTensor) -> np.ndarray:
    """Logits for one image. Deterministic in inference mode."""
    if image.shape != handle.input_shape:
        raise InputError(f"image shape {image.shape} != expected {handle.input_shape}")
    with torch.no_grad():
        logits = handle.logits(image.to_tensor())[0]
    return logits.numpy().copy()


def model_truth(logits: np.ndarray) -> int:
    """Argmax class; ties break to the smallest index."""
    logits = np.asarray(logits)
    if logits.size == 0:
        raise InputError("empty logit vector")
    if np.isnan(logits).any():
        raise InputError("logits contain NaN")
    return int(np.argmax(logits))


@dataclass(frozen=True)
class FeatureMapSet:
    """Ordered per-layer feature maps, shallowest first; arrays are (d, h, w)."""

    layers: tuple[str, ...]
    maps: tuple[np.ndarray, ...]

    def __post_init__(self):
        if len(self.layers) < 1 or len(self.layers) != len(self.maps):
            raise InputError("need one map per layer, at least one layer")
        for name, m in zip(self.layers, self.maps):
            if m.ndim != 3:
                raise InputError(f"map for {name!r} is not 3-D")
            if not np.isfinite(m).all():
                raise InputError(f"map for {name!r} contains non-finite values")


def extract_features(aux: ClassifierHandle, image: ImageTensor, layers=None) -> FeatureMapSet:
    if image.shape != aux.input_shape:
        raise InputError(f"image shape {image.shape} != expected {aux.input_shape}")
    if layers is None:
        layers = aux.module.feature_layers
    with torch.no_grad():
        feats = aux.features(image.to_tensor(), layers)
    return FeatureMapSet(tuple(layers), tuple(f[0].numpy().copy() for f in feats))


@dataclass(frozen=True)
class ToyTrainConfig:
    epochs: int = 4
    batch_size: int = 64
    lr: float = 1e-3
    weight_decay: float = 5e-4
    seed: int = 0


def _accuracy(handle_or_module, dataset: LabeledImageSet, batch_size: int = 256) -> float:
    module = handle_or_module.module if isinstance(handle_or_module, ClassifierHandle) else handle_or_module
    module.eval()
    correct = 0
    with torch.no_grad():
        for start in range(0, len(dataset), batch_size):
            idx = np.arange(start, min(start + batch_size, len(dataset)))
            preds = module(dataset.batch_tensor(idx)).argmax(dim=1)
            correct += int((preds == dataset.label_tensor(idx)).sum())
    return correct / len(dataset)


def train_toy_classifier(train_set: LabeledImageSet, val_set: LabeledImageSet,
                         arch: str, config: ToyTrainConfig = ToyTrainConfig()) -> ClassifierHandle:
    """Train a toy classifier from scratch and return it as a frozen handle.

    With epochs=0 the randomly initialized model is frozen as-is (accuracy at
    chance level on a balanced validation set).
    """
    if train_set.class_count < 2:
        raise InputError("dataset needs at least 2 classes")
    if train_set.class_count != val_set.class_count:
        raise InputError("train/val class counts differ")
    module = build_model(arch, train_set.class_count, config.seed)
    rng = np.random.default_rng(config.seed)
    optimizer = torch.optim.AdamW(module.parameters(), lr=config.lr,
                                  weight_decay=config.weight_decay)
    step = 0
    module.train()
    for _ in range(config.epochs):
        order = rng.permutation(len(train_set))
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            logits = module(train_set.batch_tensor(idx))
            loss = F.cross_entropy(logits, train_set.label_tensor(idx))
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite loss at step {step}", step=step)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            step += 1
    val_accuracy = _accuracy(module, val_set)
    logger.info("trained %s: %d steps, val accuracy %.3f", arch, step, val_accuracy)
    metadata = {"val_accuracy": val_accuracy, "seed": config.seed,
                "epochs": config.epochs, "train_size": len(train_set)}
    return ClassifierHandle(arch, module, train_set.class_count, frozen=True, metadata=metadata)


def evaluate_accuracy(handle: ClassifierHandle, dataset: LabeledImageSet) -> float:
    return _accuracy(handle, dataset)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(handle: ClassifierHandle) -> bytes:
    tensors = {name: t.detach().numpy() for name, t in handle.module.state_dict().items()}
    header = {"arch": handle.arch, "class_count": handle.class_count,
              "frozen": handle.frozen, "metadata": handle.metadata,
              "digest": handle.digest}
    return container.pack(CHECKPOINT_MAGIC, header, tensors)


def load_checkpoint(data: bytes) -> ClassifierHandle:
    header, tensors = container.unpack(data, CHECKPOINT_MAGIC)
    arch = header.get("arch")
    if arch not in ARCHITECTURES:
        raise FormatError(f"checkpoint names unknown architecture {arch!r}")
    module = ARCHITECTURES[arch](header["class_count"])
    state = {name: torch.from_numpy(arr.copy()) for name, arr in tensors.items()}
    try:
        module.load_state_dict(state)
    except RuntimeError as exc:
        raise FormatError(f"checkpoint state incompatible with {arch!r}: {exc}") from exc
    handle = ClassifierHandle(arch, module, header["class_count"],
                              frozen=header.get("frozen", True),
                              metadata=header.get("metadata", {}))
    if handle.digest != header.get("digest"):
        raise FormatError("checkpoint digest mismatch: payload corrupted")
    return handle


def save_checkpoint_file(handle: ClassifierHandle, path) -> None:
    with open(path, "wb") as fh:
        fh.write(save_checkpoint(handle))


def load_checkpoint_file(path) -> ClassifierHandle:
    with open(path, "rb") as fh:
        return load_checkpoint(fh.read())


# ---------------------------------------------------------------------------
# Parameter randomization (MPRT support)
# ---------------------------------------------------------------------------


def randomize_parameters_up_to(handle: ClassifierHandle, layer_index: int,
                               seed: int) -> ClassifierHandle:
    """New handle with layers [0, layer_index) re-drawn from the initializer.

    Layer order is input-to-output over parameterized layers. The original
    handle is untouched; the modified-layer set grows monotonically with
    layer_index.
    """
    layers = parameterized_layers(handle.module)
    if not 0 <= layer_index <= len(layers):
        raise InputError(f"layer_index {layer_index} outside [0, {len(layers)}]")
    module = copy.deepcopy(handle.module)
    generator = torch.Generator().manual_seed(seed)
    randomized = []
    for name, layer in parameterized_layers(module)[:layer_index]:
        _reset_layer(layer, generator)
        randomized.append(name)
    metadata = dict(handle.metadata)
    metadata["randomized_up_to"] = layer_index
    metadata["randomized_layers"] = randomized
    return ClassifierHandle(handle.arch, module, handle.class_count,
                            frozen=True, metadata=metadata)


def parameterized_layer_names(model) -> list[str]:
    """Bottom-up layer names for a ClassifierHandle or a bare module."""
    module = model.module if isinstance(model, ClassifierHandle) else model
    return [name for name, _ in parameterized_layers(module)]
