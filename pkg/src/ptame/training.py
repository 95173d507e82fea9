"""Self-supervised training of the attention mechanism against a frozen
backbone: image masking, the cross-entropy / area / variation loss terms,
class-subset sampling, a one-cycle epoch loop, and constrained
hyperparameter search.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .attention import AttentionMechanism, bilinear_upscale
from .data import ImageTensor, LabeledImageSet
from .errors import ConfigurationError, InputError, TrainingError
from .models import ClassifierHandle

# One-cycle shape: cosine warmup from max_lr/START_DIV over the first
# WARMUP_FRACTION of steps, cosine anneal down to max_lr/FINAL_DIV.
START_DIV = 25.0
FINAL_DIV = 1e4
WARMUP_FRACTION = 0.3

AREA_EXPONENTS = (0.5, 1.0, 2.0)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class LossWeights:
    """Loss mixture: total = lambda1*ce + lambda2*area + lambda3*variation.

    lambda_rand is the class-subset size; None defers to min(batch, classes)
    at training time.
    """

    lambda1: float
    lambda2: float
    lambda3: float
    lambda_area: float = 1.0
    lambda_rand: int | None = None

    def __post_init__(self):
        lams = (self.lambda1, self.lambda2, self.lambda3)
        if any(not math.isfinite(l) or l < 0 for l in lams):
            raise ConfigurationError(f"loss weights must be non-negative, got {lams}")
        if abs(sum(lams) - 1.0) > 1e-9:
            raise ConfigurationError(f"loss weights must sum to 1, got {sum(lams)!r}")
        if self.lambda_area not in AREA_EXPONENTS:
            raise ConfigurationError(
                f"lambda_area must be one of {AREA_EXPONENTS}, got {self.lambda_area}")
        if self.lambda_rand is not None and self.lambda_rand < 1:
            raise ConfigurationError(f"lambda_rand must be positive, got {self.lambda_rand}")

    def resolve_rand(self, batch_size: int, class_count: int) -> int:
        if self.lambda_rand is not None:
            return min(self.lambda_rand, class_count)
        return min(batch_size, class_count)


@dataclass(frozen=True)
class LossBreakdown:
    """Per-term loss values; tensors during training, floats when detached."""

    ce: object
    area: object
    variation: object
    total: object

    def as_floats(self) -> "LossBreakdown":
        return LossBreakdown(*(float(v) for v in (self.ce, self.area, self.variation, self.total)))


@dataclass(frozen=True)
class TraceRow:
    step: int
    ce: float
    area: float
    variation: float
    total: float
    lr: float


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    max_lr: float = 1e-3
    epochs: int = 1
    seed: int = 0
    weight_decay: float = 1e-2

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigurationError(f"batch size must be >= 1, got {self.batch_size}")
        if not self.max_lr > 0:
            raise ConfigurationError(f"max learning rate must be > 0, got {self.max_lr}")
        if self.epochs < 1:
            raise ConfigurationError(f"epoch count must be >= 1, got {self.epochs}")


def config_from_mapping(mapping: dict) -> tuple[TrainConfig, LossWeights]:
    """Build (TrainConfig, LossWeights) from parsed key-value config text.

    lambda3 is derived as 1 - lambda1 - lambda2.
    """
    known = {"batch_size", "max_lr", "seed", "lambda1", "lambda2", "lambda_area",
             "lambda_rand", "epochs"}
    unknown = set(mapping) - known
    if unknown:
        raise ConfigurationError(f"unknown config keys {sorted(unknown)}")
    try:
        config = TrainConfig(
            batch_size=int(mapping.get("batch_size", 32)),
            max_lr=float(mapping.get("max_lr", 1e-3)),
            epochs=int(mapping.get("epochs", 1)),
            seed=int(mapping.get("seed", 0)))
        l1 = float(mapping.get("lambda1", 0.75))
        l2 = float(mapping.get("lambda2", 0.2))
        rand = mapping.get("lambda_rand")
        weights = LossWeights(l1, l2, 1.0 - l1 - l2,
                              lambda_area=float(mapping.get("lambda_area", 1.0)),
                              lambda_rand=None if rand is None else int(rand))
    except ValueError as exc:
        raise ConfigurationError(f"bad config value: {exc}") from exc
    return config, weights


# ---------------------------------------------------------------------------
# Loss terms
# ---------------------------------------------------------------------------


def mask_image(x, explanation):
    """Hadamard mask: upscale a 2-D explanation to the image's spatial size,
    broadcast across channels, and multiply elementwise.

    Works on ImageTensor, numpy, or torch inputs (gradients flow for torch);
    the training pipeline applies it in normalized network-input space.
    """
    if isinstance(x, ImageTensor):
        return ImageTensor(np.asarray(mask_image(x.data, explanation)), x.normalization)
    is_numpy = not isinstance(x, torch.Tensor)
    xt = torch.as_tensor(x)
    if not xt.is_floating_point():
        xt = xt.to(torch.float64)
    et = torch.as_tensor(explanation, dtype=xt.dtype)
    if et.ndim != 2:
        raise InputError(f"explanation must be 2-D, got shape {tuple(et.shape)}")
    with torch.no_grad():
        if et.numel() and (float(et.min()) < 0.0 or float(et.max()) > 1.0):
            raise InputError("explanation values outside [0, 1]")
    squeeze = xt.ndim == 2
    if squeeze:
        xt = xt.unsqueeze(0)
    if xt.ndim != 3:
        raise InputError(f"image must be (c, h, w) or (h, w), got shape {tuple(xt.shape)}")
    up = bilinear_upscale(et.unsqueeze(0), xt.shape[-2:])
    out = xt * up
    if squeeze:
        out = out.squeeze(0)
    return out.numpy() if is_numpy else out


def ce_loss(c_star: int, logits_masked):
    """Hard-label cross entropy -log softmax(logits)[c_star]; >= 0."""
    is_numpy = not isinstance(logits_masked, torch.Tensor)
    t = torch.as_tensor(logits_masked, dtype=torch.float64) if is_numpy else logits_masked
    if t.ndim != 1:
        raise InputError(f"logits must be 1-D, got shape {tuple(t.shape)}")
    if not 0 <= c_star < t.shape[0]:
        raise InputError(f"class index {c_star} outside [0, {t.shape[0]})")
    value = -F.log_softmax(t, dim=0)[c_star]
    return float(value) if is_numpy else value


def sample_class_subset(class_count: int, c_star: int, lambda_rand: int,
                        rng: np.random.Generator) -> tuple[int, ...]:
    """Class subset S: c_star plus lambda_rand - 1 distinct classes drawn
    uniformly without replacement from the rest. c_star comes first."""
    if not 0 <= c_star < class_count:
        raise InputError(f"class index {c_star} outside [0, {class_count})")
    if not 1 <= lambda_rand <= class_count:
        raise InputError(f"lambda_rand {lambda_rand} outside [1, {class_count}]")
    others = np.array([c for c in range(class_count) if c != c_star], dtype=np.int64)
    extra = rng.choice(others, size=lambda_rand - 1, replace=False)
    return (c_star, *sorted(int(c) for c in extra))


def area_loss(e_subset, lambda_area: float):
    """Mean elementwise power of the explanation stack; in [0, 1]."""
    if not lambda_area > 0:
        raise InputError(f"lambda_area must be > 0, got {lambda_area}")
    is_numpy = not isinstance(e_subset, torch.Tensor)
    t = torch.as_tensor(np.asarray(e_subset, dtype=np.float64)) if is_numpy else e_subset
    with torch.no_grad():
        if t.numel() and (float(t.min()) < 0.0 or float(t.max()) > 1.0):
            raise InputError("explanation values outside [0, 1]")
    value = (t ** lambda_area).mean()
    return float(value) if is_numpy else value


def variation_loss(e_subset):
    """Mean squared forward difference over valid indices (no wraparound),
    normalized by |S| * R."""
    is_numpy = not isinstance(e_subset, torch.Tensor)
    t = torch.as_tensor(np.asarray(e_subset, dtype=np.float64)) if is_numpy else e_subset
    if t.ndim == 2:
        t = t.unsqueeze(0)
    if t.ndim != 3:
        raise InputError(f"expected (|S|, h, w) maps, got shape {tuple(t.shape)}")
    if t.shape[1] < 2 or t.shape[2] < 2:
        raise InputError(f"spatial size must be at least 2x2, got {tuple(t.shape[1:])}")
    dj = t[:, 1:, :] - t[:, :-1, :]
    dk = t[:, :, 1:] - t[:, :, :-1]
    value = ((dj ** 2).sum() + (dk ** 2).sum()) / t.numel()
    return float(value) if is_numpy else value


def total_loss(c_star: int, logits_masked, e_subset, weights: LossWeights) -> LossBreakdown:
    ce = ce_loss(c_star, logits_masked)
    area = area_loss(e_subset, weights.lambda_area)
    variation = variation_loss(e_subset)
    total = weights.lambda1 * ce + weights.lambda2 * area + weights.lambda3 * variation
    return LossBreakdown(ce, area, variation, total)


def lr_schedule(step: int, total_steps: int, max_lr: float) -> float:
    """One-cycle learning rate for a given step of the full run."""
    if total_steps < 1:
        raise InputError(f"total_steps must be >= 1, got {total_steps}")
    if not 0 <= step < total_steps:
        raise InputError(f"step {step} outside [0, {total_steps})")
    if total_steps == 1:
        return max_lr
    peak = _round_half_up(WARMUP_FRACTION * (total_steps - 1))
    if step == peak:
        return max_lr
    start = max_lr / START_DIV
    final = max_lr / FINAL_DIV
    if step < peak:
        return start + (max_lr - start) * 0.5 * (1.0 - math.cos(math.pi * step / peak))
    span = total_steps - 1 - peak
    return final + (max_lr - final) * 0.5 * (1.0 + math.cos(math.pi * (step - peak) / span))


# ---------------------------------------------------------------------------
# Epoch loop
# ---------------------------------------------------------------------------


def _batch_plan(n: int, batch_size: int, epochs: int, rng: np.random.Generator) -> list[np.ndarray]:
    batches = []
    for _ in range(epochs):
        order = rng.permutation(n)
        batches.extend(order[i:i + batch_size] for i in range(0, n, batch_size))
    return batches


def _run_steps(backbone: ClassifierHandle, aux: ClassifierHandle,
               attention: AttentionMechanism, dataset: LabeledImageSet,
               weights: LossWeights, config: TrainConfig,
               batches: Sequence[np.ndarray]) -> list[TraceRow]:
    digest_backbone, digest_aux = backbone.digest, aux.digest
    rng = np.random.default_rng(config.seed + 1)  # subset draws, decoupled from the shuffle
    lambda_rand = weights.resolve_rand(config.batch_size, backbone.class_count)
    optimizer = torch.optim.AdamW(attention.parameters(), lr=config.max_lr / START_DIV,
                                  weight_decay=config.weight_decay)
    total_steps = len(batches)
    trace = []
    for step, idx in enumerate(batches):
        lr = lr_schedule(step, total_steps, config.max_lr)
        for group in optimizer.param_groups:
            group["lr"] = lr
        batch = dataset.batch_tensor(idx)
        with torch.no_grad():
            c_star = torch.from_numpy(
                np.argmax(backbone.logits(batch).numpy(), axis=1))
            features = aux.features(batch)
        maps = attention(features, training=True)  # (b, C, hE, wE)
        subsets = torch.stack([
            torch.as_tensor(sample_class_subset(backbone.class_count, int(c), lambda_rand, rng))
            for c in c_star])
        e_subset = torch.gather(
            maps, 1, subsets.unsqueeze(-1).unsqueeze(-1).expand(-1, -1, *maps.shape[-2:]))
        e_star = maps.gather(1, c_star.view(-1, 1, 1, 1).expand(-1, 1, *maps.shape[-2:]))
        up = F.interpolate(e_star, size=batch.shape[-2:], mode="bilinear", align_corners=False)
        logits_masked = backbone.logits(batch * up)
        ce = F.cross_entropy(logits_masked, c_star)
        area = area_loss(e_subset.reshape(-1, *maps.shape[-2:]), weights.lambda_area)
        variation = variation_loss(e_subset.reshape(-1, *maps.shape[-2:]))
        total = weights.lambda1 * ce + weights.lambda2 * area + weights.lambda3 * variation
        if not torch.isfinite(total):
            raise TrainingError("non-finite training loss", step=step)
        optimizer.zero_grad()
        total.backward()
        optimizer.step()
        trace.append(TraceRow(step, float(ce.detach()), float(area.detach()),
                              float(variation.detach()), float(total.detach()), lr))
    if backbone.digest != digest_backbone or aux.digest != digest_aux:
        raise TrainingError("frozen model changed during training", step=total_steps - 1)
    attention.eval()
    return trace


def train_epoch(backbone: ClassifierHandle, aux: ClassifierHandle,
                attention: AttentionMechanism, dataset: LabeledImageSet,
                weights: LossWeights, config: TrainConfig
                ) -> tuple[AttentionMechanism, list[TraceRow]]:
    """One epoch of attention training; the one-cycle schedule spans it."""
    if len(dataset) == 0:
        raise InputError("training dataset is empty")
    rng = np.random.default_rng(config.seed)
    batches = _batch_plan(len(dataset), config.batch_size, 1, rng)
    trace = _run_steps(backbone, aux, attention, dataset, weights, config, batches)
    return attention, trace


def train_attention(backbone: ClassifierHandle, aux: ClassifierHandle,
                    attention: AttentionMechanism, dataset: LabeledImageSet,
                    weights: LossWeights, config: TrainConfig,
                    max_steps: int | None = None
                    ) -> tuple[AttentionMechanism, list[TraceRow]]:
    """config.epochs epochs under a single one-cycle schedule; max_steps
    truncates the plan (the schedule then spans only the kept steps)."""
    if len(dataset) == 0:
        raise InputError("training dataset is empty")
    rng = np.random.default_rng(config.seed)
    batches = _batch_plan(len(dataset), config.batch_size, config.epochs, rng)
    if max_steps is not None:
        batches = batches[:max_steps]
    trace = _run_steps(backbone, aux, attention, dataset, weights, config, batches)
    return attention, trace


# ---------------------------------------------------------------------------
# Hyperparameter search
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SearchSpace:
    """Constraint region: lambda1, lambda2 >= 0 with lambda1 + lambda2 < 1
    (lambda3 = 1 - lambda1 - lambda2), lambda_area from a finite set."""

    area_exponents: tuple[float, ...] = AREA_EXPONENTS

    def __post_init__(self):
        if not self.area_exponents:
            raise ConfigurationError("area exponent set is empty")
        if any(a not in AREA_EXPONENTS for a in self.area_exponents):
            raise ConfigurationError(f"area exponents must come from {AREA_EXPONENTS}")


@dataclass(frozen=True)
class Trial:
    index: int
    weights: LossWeights
    score: float
    guided: bool


def sample_weights(space: SearchSpace, rng: np.random.Generator) -> LossWeights:
    while True:
        l1, l2 = (float(v) for v in rng.uniform(0.0, 1.0, size=2))
        if l1 + l2 < 1.0:
            break
    area = float(rng.choice(np.asarray(space.area_exponents)))
    return LossWeights(l1, l2, 1.0 - l1 - l2, lambda_area=area)


def _expected_improvement(model, candidates: np.ndarray, best: float) -> np.ndarray:
    from scipy.stats import norm

    mu, sigma = model.predict(candidates, return_std=True)
    improvement = mu - best
    ei = np.maximum(improvement, 0.0)
    positive = sigma > 1e-12
    z = improvement[positive] / sigma[positive]
    ei[positive] = improvement[positive] * norm.cdf(z) + sigma[positive] * norm.pdf(z)
    return ei


def _encode(weights: LossWeights) -> list[float]:
    return [weights.lambda1, weights.lambda2, math.log2(weights.lambda_area)]


def hyperparameter_search(space: SearchSpace, trials: int,
                          objective: Callable[[LossWeights], float],
                          seed: int = 0, initial_random: int = 5,
                          guided: bool = True) -> tuple[LossWeights, list[Trial]]:
    """Maximize objective over the constrained weight simplex.

    The first initial_random trials sample uniformly; later trials pick the
    best expected improvement under a Gaussian-process surrogate over a fresh
    random candidate pool. guided=False (or a missing scikit-learn) falls
    back to all-random sampling, which is an accepted configuration.
    """
    if trials < 1:
        raise InputError(f"trial count must be >= 1, got {trials}")
    gp_factory = None
    if guided:
        try:
            from sklearn.gaussian_process import GaussianProcessRegressor
            from sklearn.gaussian_process.kernels import ConstantKernel, Matern

            def gp_factory():
                kernel = ConstantKernel(1.0) * Matern(length_scale=0.5, nu=2.5)
                return GaussianProcessRegressor(kernel=kernel, normalize_y=True,
                                                alpha=1e-4, random_state=0)
        except ImportError:
            gp_factory = None
    rng = np.random.default_rng(seed)
    log: list[Trial] = []
    for index in range(trials):
        use_gp = gp_factory is not None and index >= initial_random and len(log) >= 2
        if use_gp:
            model = gp_factory()
            model.fit(np.array([_encode(t.weights) for t in log]),
                      np.array([t.score for t in log]))
            candidates = [sample_weights(space, rng) for _ in range(256)]
            ei = _expected_improvement(model, np.array([_encode(w) for w in candidates]),
                                       best=max(t.score for t in log))
            weights = candidates[int(np.argmax(ei))]
        else:
            weights = sample_weights(space, rng)
        log.append(Trial(index, weights, float(objective(weights)), guided=use_gp))
    best = max(log, key=lambda t: t.score)
    return best.weights, log
