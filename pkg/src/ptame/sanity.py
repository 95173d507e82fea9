"""Model Parameter Randomization Test: explanation similarity (SSIM) under
progressive bottom-up randomization of the backbone's parameterized layers.

The attention mechanism consumes auxiliary features, not backbone internals,
so explanations react to backbone randomization only through training. Each
randomization step therefore retrains a copy of the attention mechanism for
a short fixed budget (a tenth of an epoch) against the randomized backbone
before comparing maps.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import scipy.ndimage
import torch

from .attention import AttentionMechanism
from .data import LabeledImageSet
from .errors import InputError
from .evaluation import PTameExplainer
from .models import (ClassifierHandle, parameterized_layer_names,
                     randomize_parameters_up_to)
from .training import LossWeights, TrainConfig, train_attention

SSIM_WINDOW = 7
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
DEFAULT_PROBE_SIZE = 64
RETRAIN_FRACTION = 0.1


def ssim(a, b) -> float:
    """Mean structural similarity over valid 7x7 uniform windows, with the
    standard stability constants on unit dynamic range. Symmetric; 1.0 for
    identical inputs."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise InputError("ssim expects 2-D arrays")
    if a.shape != b.shape:
        raise InputError(f"shape mismatch: {a.shape} vs {b.shape}")
    if min(a.shape) < SSIM_WINDOW:
        raise InputError(f"arrays must be at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {a.shape}")
    for name, arr in (("first", a), ("second", b)):
        if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
            raise InputError(f"{name} array has values outside [0, 1]")
    def mean(x):
        return scipy.ndimage.uniform_filter(x, size=SSIM_WINDOW)

    mu_a, mu_b = mean(a), mean(b)
    # Sample (N/(N-1)) covariance over each window.
    np_win = SSIM_WINDOW ** 2
    norm = np_win / (np_win - 1)
    var_a = norm * (mean(a * a) - mu_a * mu_a)
    var_b = norm * (mean(b * b) - mu_b * mu_b)
    cov = norm * (mean(a * b) - mu_a * mu_b)
    s = ((2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)) / \
        ((mu_a ** 2 + mu_b ** 2 + SSIM_C1) * (var_a + var_b + SSIM_C2))
    pad = (SSIM_WINDOW - 1) // 2
    return float(s[pad:-pad, pad:-pad].mean())


@dataclass(frozen=True)
class MprtCurve:
    """Mean-SSIM trajectory as backbone layers are randomized bottom-up.

    The first entry ("none", 1.0) is the unrandomized self-comparison.
    """

    entries: tuple[tuple[str, float], ...]
    probe_size: int
    seed: int

    def __post_init__(self):
        if not self.entries:
            raise InputError("curve has no entries")
        if any(not -1.0 <= v <= 1.0 for _, v in self.entries):
            raise InputError("SSIM values outside [-1, 1]")
        if self.entries[0][1] != 1.0:
            raise InputError("first curve entry must be 1.0")

    @property
    def final_ssim(self) -> float:
        return self.entries[-1][1]


def mprt(backbone: ClassifierHandle, explainer_factory: Callable[[ClassifierHandle], object],
         probe: LabeledImageSet, layer_order: Sequence[str] | None = None,
         seed: int = 0) -> MprtCurve:
    """Randomize the backbone bottom-up one parameterized layer at a time;
    after each step, rebuild an explainer against the randomized backbone and
    record the mean SSIM between its maps and the unrandomized maps, always
    for the original backbone's model-truth class."""
    if len(probe) == 0:
        raise InputError("probe set is empty")
    layer_names = tuple(layer_order) if layer_order is not None \
        else parameterized_layer_names(backbone.module)
    batch = probe.batch_tensor()
    with torch.no_grad():
        c_star = np.argmax(backbone.logits(batch).numpy(), axis=1)
    reference = None
    entries = []
    for k in range(len(layer_names) + 1):
        handle = backbone if k == 0 else randomize_parameters_up_to(backbone, k, seed)
        explainer = explainer_factory(handle)
        maps = _probe_maps(explainer, probe, c_star)
        if reference is None:
            reference = maps
        mean_ssim = float(np.mean([ssim(reference[i], maps[i]) for i in range(len(maps))]))
        entries.append(("none" if k == 0 else layer_names[k - 1], mean_ssim))
    return MprtCurve(tuple(entries), probe_size=len(probe), seed=seed)


def _probe_maps(explainer, probe: LabeledImageSet, c_star: np.ndarray) -> list[np.ndarray]:
    if hasattr(explainer, "explain_batch"):
        stack = np.asarray(explainer.explain_batch(probe.batch_tensor()))
        return [stack[i, c_star[i]] for i in range(len(probe))]
    return [explainer.explain(probe.image(i)).data[c_star[i]] for i in range(len(probe))]


def retraining_explainer_factory(aux: ClassifierHandle, attention: AttentionMechanism,
                                 dataset: LabeledImageSet, weights: LossWeights,
                                 config: TrainConfig,
                                 budget_fraction: float = RETRAIN_FRACTION
                                 ) -> Callable[[ClassifierHandle], PTameExplainer]:
    """Factory that retrains a copy of the attention mechanism (from its
    current weights) against each given backbone for a fixed short budget."""
    base_state = copy.deepcopy(attention.state_dict())
    steps_per_epoch = math.ceil(len(dataset) / config.batch_size)
    budget = max(1, round(budget_fraction * steps_per_epoch))

    def factory(handle: ClassifierHandle) -> PTameExplainer:
        mechanism = AttentionMechanism(attention.branch_channels, attention.target_hw,
                                       attention.class_count, attention.layer_names)
        mechanism.load_state_dict(copy.deepcopy(base_state))
        train_attention(handle, aux, mechanism, dataset, weights, config, max_steps=budget)
        return PTameExplainer(aux, mechanism)

    return factory


def smoothed_non_increasing(values: Sequence[float], tolerance: float = 0.1,
                            window: int = 3) -> bool:
    """True when the moving-average-smoothed sequence never rises by more
    than tolerance between consecutive points."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size < 2:
        return True
    kernel = np.ones(min(window, arr.size)) / min(window, arr.size)
    smoothed = np.convolve(arr, kernel, mode="valid")
    return bool(np.all(np.diff(smoothed) <= tolerance))
