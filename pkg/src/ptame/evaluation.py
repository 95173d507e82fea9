"""Faithfulness measures for explanation maps: AD/IC at confidence
thresholds, MoRF/LeRF deletion curves with ROAD-style neighbor infilling,
AUC aggregation, and a random-saliency baseline.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.sparse
import scipy.sparse.linalg
import torch
import torch.nn.functional as F

from .attention import AttentionMechanism, ExplanationMaps
from .data import ImageTensor, LabeledImageSet
from .errors import DegenerateInputError, InputError
from .models import ClassifierHandle, extract_features

AD_IC_THRESHOLDS = (100, 50, 15)
DELETION_THRESHOLDS = (10, 20, 30, 40, 50, 70, 90)
ROAD_NOISE_SCALE = 0.01
_CHUNK = 64


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# Threshold masks
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ThresholdMask:
    """Binary pixel-selection mask covering round(v/100 * R) pixels."""

    mask: np.ndarray
    v: float
    polarity: str

    def __post_init__(self):
        mask = np.asarray(self.mask, dtype=bool)
        if mask.ndim != 2:
            raise InputError(f"mask must be 2-D, got shape {mask.shape}")
        if self.polarity not in ("highest", "lowest"):
            raise InputError(f"polarity must be 'highest' or 'lowest', got {self.polarity!r}")
        expected = _round_half_up(self.v / 100.0 * mask.size)
        if int(mask.sum()) != expected:
            raise InputError(f"mask sets {int(mask.sum())} pixels, expected {expected}")
        object.__setattr__(self, "mask", mask)


def topk_mask(e_c, v: float, polarity: str = "highest") -> ThresholdMask:
    """Select the top-v% highest (or lowest) valued pixels; ties broken by
    row-major index, so masks at growing v are nested."""
    arr = np.asarray(e_c, dtype=np.float64)
    if arr.ndim != 2:
        raise InputError(f"explanation must be 2-D, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise InputError("explanation contains non-finite values")
    if not 0.0 < v <= 100.0:
        raise InputError(f"threshold percent must be in (0, 100], got {v}")
    if polarity not in ("highest", "lowest"):
        raise InputError(f"polarity must be 'highest' or 'lowest', got {polarity!r}")
    k = _round_half_up(v / 100.0 * arr.size)
    key = -arr.reshape(-1) if polarity == "highest" else arr.reshape(-1)
    order = np.argsort(key, kind="stable")
    mask = np.zeros(arr.size, dtype=bool)
    mask[order[:k]] = True
    return ThresholdMask(mask.reshape(arr.shape), float(v), polarity)


def _upscale_mask(mask: np.ndarray, target_hw: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbor upscale of a binary mask (stays binary)."""
    if mask.shape == tuple(target_hw):
        return mask.copy()
    t = torch.from_numpy(mask.astype(np.float32))[None, None]
    up = F.interpolate(t, size=tuple(target_hw), mode="nearest")
    return up[0, 0].numpy() > 0.5


# ---------------------------------------------------------------------------
# AD / IC
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConfidencePair:
    """Softmax confidence of c_star before and after masking."""

    original: float
    masked: float

    def __post_init__(self):
        for name, value in (("original", self.original), ("masked", self.masked)):
            if not 0.0 <= value <= 1.0:
                raise InputError(f"{name} confidence {value} outside [0, 1]")


def ad_ic(pairs: Sequence[ConfidencePair], normalized: bool = True) -> tuple[float, float]:
    """Average Drop and Increase in Confidence, both in percent.

    AD divides each drop by the original confidence (the unnormalized form is
    available with normalized=False); zero-confidence originals are excluded
    with a warning.
    """
    if not pairs:
        raise InputError("need at least one confidence pair")
    kept = [p for p in pairs if p.original > 0.0]
    excluded = len(pairs) - len(kept)
    if excluded:
        warnings.warn(f"excluded {excluded} pair(s) with zero original confidence")
    if not kept:
        raise InputError("all pairs have zero original confidence")
    drops = [max(0.0, p.original - p.masked) for p in kept]
    if normalized:
        drops = [d / p.original for d, p in zip(drops, kept)]
    ad = 100.0 * sum(drops) / len(kept)
    ic = 100.0 * sum(1 for p in kept if p.masked > p.original) / len(kept)
    return ad, ic


# ---------------------------------------------------------------------------
# Explainers
# ---------------------------------------------------------------------------


class PTameExplainer:
    """Explanations from a frozen auxiliary classifier plus a trained
    attention mechanism; one auxiliary forward pass per image."""

    def __init__(self, aux: ClassifierHandle, attention: AttentionMechanism):
        self.aux = aux
        self.attention = attention
        self.explainer_id = "ptame"

    def explain(self, image: ImageTensor) -> ExplanationMaps:
        features = extract_features(self.aux, image)
        batched = [torch.from_numpy(np.ascontiguousarray(m)).unsqueeze(0) for m in features.maps]
        with torch.no_grad():
            out = self.attention(batched, training=False)
        return ExplanationMaps(out.squeeze(0).numpy())

    def explain_batch(self, batch: torch.Tensor) -> np.ndarray:
        with torch.no_grad():
            return self.attention(self.aux.features(batch), training=False).numpy()


class RandomExplainer:
    """Uniform-noise saliency; the comparison floor for trained explainers."""

    def __init__(self, class_count: int, map_hw: tuple[int, int], seed: int = 0):
        self.class_count = class_count
        self.map_hw = tuple(map_hw)
        self.rng = np.random.default_rng(seed)
        self.explainer_id = "random"

    def explain(self, image: ImageTensor) -> ExplanationMaps:
        return random_baseline(self.rng, (self.class_count, *self.map_hw))

    def explain_batch(self, batch: torch.Tensor) -> np.ndarray:
        shape = (batch.shape[0], self.class_count, *self.map_hw)
        return self.rng.uniform(0.0, 1.0, size=shape).astype(np.float32)


def random_baseline(rng: np.random.Generator, shape: tuple[int, ...]) -> ExplanationMaps:
    return ExplanationMaps(rng.uniform(0.0, 1.0, size=shape).astype(np.float32))


def _chunked_logits(backbone: ClassifierHandle, batch: torch.Tensor) -> np.ndarray:
    outs = []
    with torch.no_grad():
        for start in range(0, batch.shape[0], _CHUNK):
            outs.append(backbone.logits(batch[start:start + _CHUNK]).numpy())
    return np.concatenate(outs, axis=0)


def _all_explanations(explainer, dataset: LabeledImageSet) -> np.ndarray:
    """(n, C, hE, wE) explanation stack, batched when the explainer allows."""
    if hasattr(explainer, "explain_batch"):
        outs = []
        for start in range(0, len(dataset), _CHUNK):
            idx = np.arange(start, min(start + _CHUNK, len(dataset)))
            outs.append(np.asarray(explainer.explain_batch(dataset.batch_tensor(idx))))
        return np.concatenate(outs, axis=0)
    return np.stack([explainer.explain(dataset.image(i)).data for i in range(len(dataset))])


def evaluate_ad_ic(backbone: ClassifierHandle, explainer, dataset: LabeledImageSet,
                   v: float, normalized: bool = True) -> tuple[float, float]:
    """AD and IC at one threshold: keep the top-v% explanation pixels of the
    model-truth class, zero the rest, compare softmax confidences."""
    if len(dataset) == 0:
        raise InputError("evaluation dataset is empty")
    batch = dataset.batch_tensor()
    logits = _chunked_logits(backbone, batch)
    c_star = np.argmax(logits, axis=1)
    maps = _all_explanations(explainer, dataset)
    pairs = _ad_ic_pairs(backbone, batch, logits, c_star, maps, v)
    return ad_ic(pairs, normalized=normalized)


def _ad_ic_pairs(backbone, batch, logits, c_star, maps, v) -> list[ConfidencePair]:
    n = batch.shape[0]
    keep = np.stack([
        _upscale_mask(topk_mask(maps[i, c_star[i]], v).mask, batch.shape[-2:])
        for i in range(n)])
    masked = batch * torch.from_numpy(keep.astype(np.float32)).unsqueeze(1)
    logits_masked = _chunked_logits(backbone, masked)
    conf = _softmax(logits)[np.arange(n), c_star]
    conf_masked = _softmax(logits_masked)[np.arange(n), c_star]
    return [ConfidencePair(float(conf[i]), float(conf_masked[i])) for i in range(n)]


# ---------------------------------------------------------------------------
# ROAD infilling and deletion curves
# ---------------------------------------------------------------------------


def road_infill(image, removal, noise_scale: float = ROAD_NOISE_SCALE,
                rng: np.random.Generator | None = None):
    """Replace removed pixels by the solution of the linear system that makes
    each one the mean of its 4-neighborhood (kept pixels act as boundary
    conditions), plus zero-mean Gaussian noise of scale noise_scale. Kept
    pixels pass through bitwise unchanged."""
    if isinstance(image, ImageTensor):
        return ImageTensor(road_infill(image.data, removal, noise_scale, rng),
                           image.normalization)
    removal = removal.mask if isinstance(removal, ThresholdMask) else np.asarray(removal, dtype=bool)
    arr = np.asarray(image, dtype=np.float64)
    squeeze = arr.ndim == 2
    if squeeze:
        arr = arr[None]
    if arr.ndim != 3:
        raise InputError(f"image must be (c, h, w) or (h, w), got shape {np.asarray(image).shape}")
    h, w = arr.shape[-2:]
    if removal.shape != (h, w):
        raise InputError(f"removal mask {removal.shape} does not match image spatial size {(h, w)}")
    k = int(removal.sum())
    if k == removal.size:
        raise DegenerateInputError("removal mask covers every pixel")
    out = arr.copy()
    if k:
        solution = _solve_infill(arr.reshape(arr.shape[0], -1), removal, noise_scale, rng)
        out.reshape(out.shape[0], -1)[:, removal.ravel()] = solution
    source_dtype = np.asarray(image).dtype
    if source_dtype.kind == "f":
        out = out.astype(source_dtype)
    return out[0] if squeeze else out


def _solve_infill(channels: np.ndarray, removal: np.ndarray, noise_scale: float,
                  rng: np.random.Generator | None) -> np.ndarray:
    h, w = removal.shape
    index = np.full(removal.size, -1, dtype=np.int64)
    removed_flat = np.flatnonzero(removal.ravel())
    index[removed_flat] = np.arange(len(removed_flat))
    rows_a, cols_a, vals_a = [], [], []
    rows_k, cols_k = [], []
    for i, flat in enumerate(removed_flat):
        r, c = divmod(int(flat), w)
        degree = 0
        for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
            rr, cc = r + dr, c + dc
            if not (0 <= rr < h and 0 <= cc < w):
                continue
            degree += 1
            q = rr * w + cc
            if index[q] >= 0:
                rows_a.append(i)
                cols_a.append(int(index[q]))
                vals_a.append(-1.0)
            else:
                rows_k.append(i)
                cols_k.append(q)
        rows_a.append(i)
        cols_a.append(i)
        vals_a.append(float(degree))
    k = len(removed_flat)
    a = scipy.sparse.csr_matrix((vals_a, (rows_a, cols_a)), shape=(k, k))
    kept = scipy.sparse.csr_matrix((np.ones(len(rows_k)), (rows_k, cols_k)),
                                   shape=(k, removal.size))
    solution = np.empty((channels.shape[0], k))
    for ch in range(channels.shape[0]):
        b = kept @ channels[ch]
        x, info = scipy.sparse.linalg.cg(a, b, rtol=1e-12, atol=1e-12, maxiter=20 * k + 100)
        if info != 0 or np.linalg.norm(a @ x - b) > 1e-6:
            x = scipy.sparse.linalg.spsolve(a.tocsc(), b)
        solution[ch] = x
    if noise_scale > 0.0:
        rng = rng if rng is not None else np.random.default_rng(0)
        solution += rng.normal(0.0, noise_scale, size=solution.shape)
    return solution


def deletion_curve(backbone: ClassifierHandle, explainer, dataset: LabeledImageSet,
                   mode: str, thresholds: Sequence[float] = DELETION_THRESHOLDS,
                   noise_scale: float = ROAD_NOISE_SCALE, seed: int = 0,
                   _precomputed=None) -> list[tuple[float, float]]:
    """Accuracy (agreement with the original model-truth class) after
    removing and infilling the top-v% most (MoRF) or least (LeRF) relevant
    pixels, for each threshold."""
    mode = mode.lower()
    if mode not in ("morf", "lerf"):
        raise InputError(f"mode must be 'morf' or 'lerf', got {mode!r}")
    if len(dataset) == 0:
        raise InputError("evaluation dataset is empty")
    if _precomputed is None:
        batch = dataset.batch_tensor()
        logits = _chunked_logits(backbone, batch)
        _precomputed = batch, np.argmax(logits, axis=1), _all_explanations(explainer, dataset)
    batch, c_star, maps = _precomputed
    polarity = "highest" if mode == "morf" else "lowest"
    n = batch.shape[0]
    points = []
    for vi, v in enumerate(thresholds):
        if v == 0:
            infilled = batch
        else:
            images = []
            for i in range(n):
                removal = _upscale_mask(topk_mask(maps[i, c_star[i]], v, polarity).mask,
                                        batch.shape[-2:])
                rng = np.random.default_rng((seed, vi, i, 7 if mode == "morf" else 11))
                images.append(road_infill(batch[i].numpy(), removal, noise_scale, rng))
            infilled = torch.from_numpy(np.stack(images).astype(np.float32))
        preds = np.argmax(_chunked_logits(backbone, infilled), axis=1)
        points.append((float(v), float(np.mean(preds == c_star))))
    return points


def auc(points: Sequence[tuple[float, float]]) -> float:
    """Trapezoidal area under (v/100, accuracy), extended with flat endpoints
    at v = 0 and v = 100."""
    if len(points) < 2:
        raise InputError(f"need at least 2 curve points, got {len(points)}")
    vs = [p[0] for p in points]
    if any(b <= a for a, b in zip(vs, vs[1:])):
        raise InputError(f"thresholds must be strictly increasing, got {vs}")
    xs = [0.0] + [v / 100.0 for v in vs] + [1.0]
    ys = [points[0][1]] + [p[1] for p in points] + [points[-1][1]]
    return sum((x1 - x0) * (y0 + y1) * 0.5 for x0, x1, y0, y1 in zip(xs, xs[1:], ys, ys[1:]))


# ---------------------------------------------------------------------------
# Full report
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EvalConfig:
    seed: int = 0
    noise_scale: float = ROAD_NOISE_SCALE
    normalized_drop: bool = True
    ad_ic_thresholds: tuple[int, ...] = AD_IC_THRESHOLDS
    deletion_thresholds: tuple[int, ...] = DELETION_THRESHOLDS


@dataclass(frozen=True)
class EvalReport:
    image_count: int
    explainer_id: str
    seed: int
    ad: dict[int, float]
    ic: dict[int, float]
    morf: tuple[tuple[float, float], ...]
    lerf: tuple[tuple[float, float], ...]
    morf_auc: float
    lerf_auc: float
    normalized_drop: bool = True

    def __post_init__(self):
        if self.image_count < 1:
            raise InputError("report needs at least one image")
        for v, value in list(self.ad.items()) + list(self.ic.items()):
            if not 0.0 <= value <= 100.0:
                raise InputError(f"AD/IC value {value} at v={v} outside [0, 100]")
        for curve in (self.morf, self.lerf):
            if any(not 0.0 <= acc <= 1.0 for _, acc in curve):
                raise InputError("curve accuracy outside [0, 1]")


def evaluate(backbone: ClassifierHandle, explainer, dataset: LabeledImageSet,
             config: EvalConfig = EvalConfig()) -> EvalReport:
    """Full faithfulness report: AD/IC at the confidence thresholds plus both
    deletion curves and their AUCs. Explanations are computed once."""
    if len(dataset) == 0:
        raise InputError("evaluation dataset is empty")
    batch = dataset.batch_tensor()
    logits = _chunked_logits(backbone, batch)
    c_star = np.argmax(logits, axis=1)
    maps = _all_explanations(explainer, dataset)
    ad, ic = {}, {}
    for v in config.ad_ic_thresholds:
        pairs = _ad_ic_pairs(backbone, batch, logits, c_star, maps, v)
        ad[v], ic[v] = ad_ic(pairs, normalized=config.normalized_drop)
    shared = (batch, c_star, maps)
    morf = deletion_curve(backbone, explainer, dataset, "morf", config.deletion_thresholds,
                          config.noise_scale, config.seed, _precomputed=shared)
    lerf = deletion_curve(backbone, explainer, dataset, "lerf", config.deletion_thresholds,
                          config.noise_scale, config.seed, _precomputed=shared)
    return EvalReport(
        image_count=len(dataset),
        explainer_id=getattr(explainer, "explainer_id", explainer.__class__.__name__),
        seed=config.seed, ad=ad, ic=ic,
        morf=tuple(morf), lerf=tuple(lerf),
        morf_auc=auc(morf), lerf_auc=auc(lerf),
        normalized_drop=config.normalized_drop)
