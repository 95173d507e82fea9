"""Artifact I/O: the binary explanation-map format, heatmap rendering,
plain-text key-value configs, and CSV/JSON report writers.

Every artifact records the seed and config digest that produced it, either
inline (JSON fields, CSV comment lines, PNG text chunks) or in a JSON
sidecar next to fixed-layout binary files.
"""

from __future__ import annotations

import csv
import hashlib
import json
import struct
from dataclasses import asdict
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, PngImagePlugin

from .attention import ExplanationMaps
from .data import ImageTensor
from .errors import ConfigurationError, FormatError, InputError
from .evaluation import EvalReport
from .sanity import MprtCurve
from .training import TraceRow, Trial

EXPLANATION_MAGIC = b"PEXP"
EXPLANATION_VERSION = 1


# ---------------------------------------------------------------------------
# Explanation files
# ---------------------------------------------------------------------------


def explanation_bytes(maps: ExplanationMaps) -> bytes:
    """Serialize maps: magic, version byte, C/w_E/h_E as little-endian
    uint32, then float32 values class-major row-major."""
    c, h, w = maps.data.shape
    header = EXPLANATION_MAGIC + struct.pack("<B", EXPLANATION_VERSION) + struct.pack("<3I", c, w, h)
    return header + maps.data.astype("<f4").tobytes()


def export_explanation(maps: ExplanationMaps, path, metadata: dict | None = None) -> None:
    with open(path, "wb") as fh:
        fh.write(explanation_bytes(maps))
    if metadata is not None:
        write_json(str(path) + ".meta.json", metadata)


def explanation_from_bytes(data: bytes) -> ExplanationMaps:
    if len(data) < 17:
        raise FormatError(f"explanation file truncated at {len(data)} bytes")
    if data[:4] != EXPLANATION_MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}, expected {EXPLANATION_MAGIC!r}")
    version = data[4]
    if version != EXPLANATION_VERSION:
        raise FormatError(f"unsupported version {version}")
    c, w, h = struct.unpack("<3I", data[5:17])
    expected = 17 + 4 * c * w * h
    if len(data) != expected:
        raise FormatError(f"payload is {len(data) - 17} bytes, header implies {expected - 17}")
    values = np.frombuffer(data[17:], dtype="<f4").reshape(c, h, w)
    if values.size and (values.min() < 0.0 or values.max() > 1.0):
        raise FormatError("explanation values outside [0, 1]")
    return ExplanationMaps(values.copy())


def import_explanation(path) -> ExplanationMaps:
    with open(path, "rb") as fh:
        return explanation_from_bytes(fh.read())


# ---------------------------------------------------------------------------
# Heatmaps
# ---------------------------------------------------------------------------


def render_heatmap(e_c, image=None, mode: str = "bilinear") -> np.ndarray:
    """RGB raster for one explanation map: a fixed blue-to-red colormap,
    alpha-0.5 blended over the image when one is supplied. mode picks the
    upscaling filter ("nearest" keeps raw explanation pixels visible)."""
    arr = np.asarray(e_c, dtype=np.float32)
    if arr.ndim != 2:
        raise InputError(f"explanation must be 2-D, got shape {arr.shape}")
    if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
        raise InputError("explanation values outside [0, 1]")
    if mode not in ("bilinear", "nearest"):
        raise InputError(f"mode must be 'bilinear' or 'nearest', got {mode!r}")
    pixels = None
    if image is not None:
        pixels = image.normalization.invert(image.data) if isinstance(image, ImageTensor) \
            else np.asarray(image, dtype=np.float32)
        if pixels.ndim != 3:
            raise InputError(f"image must be (c, h, w), got shape {pixels.shape}")
        arr = _resize(arr, pixels.shape[-2:], mode)
    values = arr.astype(np.float64)
    color = np.stack([values, np.zeros_like(values), 1.0 - values], axis=-1) * 255.0
    if pixels is None:
        return np.round(color).astype(np.uint8)
    rgb = pixels if pixels.shape[0] == 3 else np.repeat(pixels, 3, axis=0)
    blended = 0.5 * color + 0.5 * np.transpose(rgb, (1, 2, 0)) * 255.0
    return np.round(np.clip(blended, 0.0, 255.0)).astype(np.uint8)


def _resize(arr: np.ndarray, target_hw, mode: str) -> np.ndarray:
    if arr.shape == tuple(target_hw):
        return arr
    t = torch.from_numpy(arr)[None, None]
    kwargs = {"align_corners": False} if mode == "bilinear" else {}
    return F.interpolate(t, size=tuple(target_hw), mode=mode, **kwargs)[0, 0].numpy()


def write_png(path, raster: np.ndarray, metadata: dict | None = None) -> None:
    info = PngImagePlugin.PngInfo()
    for key, value in (metadata or {}).items():
        info.add_text(str(key), str(value))
    Image.fromarray(raster).save(path, format="PNG", pnginfo=info)


def read_png_metadata(path) -> dict:
    with Image.open(path) as img:
        return dict(img.text)


def read_image(path) -> np.ndarray:
    """Raw [0,1] float pixels (c, h, w) from an image file."""
    with Image.open(path) as img:
        rgb = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    return np.transpose(rgb, (2, 0, 1))


# ---------------------------------------------------------------------------
# Config files
# ---------------------------------------------------------------------------


def parse_config(text: str) -> dict[str, str]:
    """Plain-text `key = value` lines; # starts a comment."""
    mapping: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key or not value:
            raise ConfigurationError(f"line {lineno}: empty key or value in {raw!r}")
        if key in mapping:
            raise ConfigurationError(f"line {lineno}: duplicate key {key!r}")
        mapping[key] = value
    return mapping


def read_config(path) -> dict[str, str]:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


def config_digest(mapping: dict) -> str:
    canonical = "\n".join(f"{k}={mapping[k]}" for k in sorted(mapping))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


def write_json(path, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _comment_block(metadata: dict | None) -> list[str]:
    return [f"# {key}={value}" for key, value in sorted((metadata or {}).items())]


def write_loss_trace(path, trace: Sequence[TraceRow], metadata: dict | None = None) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for line in _comment_block(metadata):
            fh.write(line + "\n")
        writer = csv.writer(fh)
        writer.writerow(["step", "ce", "area", "variation", "total", "lr"])
        for row in trace:
            writer.writerow([row.step, repr(row.ce), repr(row.area), repr(row.variation),
                             repr(row.total), repr(row.lr)])


def read_loss_trace(path) -> list[TraceRow]:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        lines = [line for line in fh if not line.startswith("#")]
    for record in csv.DictReader(lines):
        rows.append(TraceRow(int(record["step"]), float(record["ce"]), float(record["area"]),
                             float(record["variation"]), float(record["total"]),
                             float(record["lr"])))
    return rows


def eval_report_dict(report: EvalReport, metadata: dict | None = None) -> dict:
    payload = asdict(report)
    payload["ad"] = {str(k): v for k, v in report.ad.items()}
    payload["ic"] = {str(k): v for k, v in report.ic.items()}
    payload["morf"] = [list(p) for p in report.morf]
    payload["lerf"] = [list(p) for p in report.lerf]
    if metadata:
        payload["metadata"] = dict(metadata)
    return payload


def write_eval_report_json(path, report: EvalReport, metadata: dict | None = None) -> None:
    write_json(path, eval_report_dict(report, metadata))


def write_eval_report_csv(path, report: EvalReport, metadata: dict | None = None) -> None:
    columns = ["explainer", "images", "seed"]
    values = [report.explainer_id, report.image_count, report.seed]
    for v in sorted(report.ad, reverse=True):
        columns += [f"AD({v})", f"IC({v})"]
        values += [repr(report.ad[v]), repr(report.ic[v])]
    columns += ["MoRF_AUC", "LeRF_AUC"]
    values += [repr(report.morf_auc), repr(report.lerf_auc)]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for line in _comment_block(metadata):
            fh.write(line + "\n")
        writer = csv.writer(fh)
        writer.writerow(columns)
        writer.writerow(values)


def write_mprt_csv(path, curve: MprtCurve, metadata: dict | None = None) -> None:
    meta = {"probe_size": curve.probe_size, "seed": curve.seed, **(metadata or {})}
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for line in _comment_block(meta):
            fh.write(line + "\n")
        writer = csv.writer(fh)
        writer.writerow(["layer", "ssim"])
        for layer, value in curve.entries:
            writer.writerow([layer, repr(value)])


def plot_mprt(path, curve: MprtCurve) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    names = [layer for layer, _ in curve.entries]
    values = [value for _, value in curve.entries]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(range(len(values)), values, marker="o")
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=60, ha="right", fontsize=7)
    ax.set_ylabel("mean SSIM")
    ax.set_xlabel("layers randomized (cumulative, bottom-up)")
    ax.set_ylim(-0.05, 1.05)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_trials_csv(path, trials: Sequence[Trial], metadata: dict | None = None) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for line in _comment_block(metadata):
            fh.write(line + "\n")
        writer = csv.writer(fh)
        writer.writerow(["trial", "lambda1", "lambda2", "lambda3", "lambda_area",
                         "guided", "score"])
        for t in trials:
            writer.writerow([t.index, repr(t.weights.lambda1), repr(t.weights.lambda2),
                             repr(t.weights.lambda3), repr(t.weights.lambda_area),
                             int(t.guided), repr(t.score)])
