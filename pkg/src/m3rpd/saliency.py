"""Signed saliency maps from the last convolutional activation, and heatmap export.

The raw map is the channel sum of gradient x activation at the last conv
layer, for the positive-class logit. It is bilinearly upsampled to the input
size and divided by its largest absolute value, giving values in [-1, 1]
(an all-zero map stays zero).
"""
import csv
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .datasets import resize_bilinear
from .tensor import Tensor, backward, sum_

NEGATIVE_RGB = (45, 0, 75)  # -1, purple
NEUTRAL_RGB = (247, 247, 247)  # 0
POSITIVE_RGB = (127, 59, 8)  # +1, brown
SOURCE = "last_conv_activation"


@dataclass
class SaliencyMap:
    values: np.ndarray  # H x W in [-1, 1]
    scenario: str
    modality: str
    record_id: str = ""
    source: str = SOURCE
    raw_min: float = 0.0
    raw_max: float = 0.0
    argmax: tuple = (0, 0)  # (row, col) of the largest |raw| value


def _batch(img):
    if img is None:
        return None
    arr = np.asarray(getattr(img, "data", img))
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[0] != 1:
        raise ValueError(f"saliency works on one image at a time, got shape {arr.shape}")
    return arr


def saliency_map(model, scenario, cfp=None, faf=None, record_id=""):
    """Maps for one record; returns ``{modality: SaliencyMap}``.

    ``model.forward(scenario, cfp, faf)`` must return ``(logits, acts)`` where
    ``acts`` maps each input modality to its last conv activation (B, h, w, C).
    The fused scenario yields one map per modality.
    """
    need = {"cfp": ("cfp",), "faf": ("faf",), "fused": ("cfp", "faf")}
    if scenario not in need:
        raise ValueError(f"unknown scenario {scenario!r}")
    imgs = {"cfp": _batch(cfp), "faf": _batch(faf)}
    for m in need[scenario]:
        if imgs[m] is None:
            raise ValueError(f"scenario {scenario!r} requires a {m.upper()} image")
    # inputs that require grad guarantee a graph even for parameter-free probes
    inputs = {m: Tensor(imgs[m].astype(np.float64 if imgs[m].dtype == np.float64 else np.float32), requires_grad=True) for m in need[scenario]}
    logits, acts = model.forward(scenario, inputs.get("cfp"), inputs.get("faf"))
    for m in need[scenario]:
        if m not in acts:
            raise ValueError(f"model returned no activation for modality {m!r}")
        acts[m].grad = None
    backward(sum_(logits))
    out = {}
    for m in need[scenario]:
        act = acts[m]
        grad = act.grad if act.grad is not None else np.zeros_like(act.data)
        raw = np.sum(grad[0].astype(np.float64) * act.data[0].astype(np.float64), axis=-1)
        h, w = imgs[m].shape[1:3]
        up = resize_bilinear(raw, (h, w))
        peak = float(np.max(np.abs(up))) if up.size else 0.0
        values = np.clip(up / peak, -1.0, 1.0) if peak > 0 else np.zeros_like(up)
        r, c = np.unravel_index(int(np.argmax(np.abs(up))), up.shape)
        out[m] = SaliencyMap(values, scenario, m, record_id, SOURCE, float(up.min()), float(up.max()), (int(r), int(c)))
    for p in _parameters(model):
        p.grad = None
    return out


def _parameters(model):
    fn = getattr(model, "parameters", None)
    return fn() if callable(fn) else []


def colormap(values):
    """Diverging palette: -1 purple, 0 near-white, +1 brown; returns uint8 RGB."""
    v = np.clip(np.asarray(values, dtype=np.float64), -1.0, 1.0)[..., None]
    neg, mid, pos = (np.array(c, dtype=np.float64) for c in (NEGATIVE_RGB, NEUTRAL_RGB, POSITIVE_RGB))
    rgb = np.where(v < 0, mid + (neg - mid) * (-v), mid + (pos - mid) * v)
    return np.rint(rgb).astype(np.uint8)


def _gray(base):
    b = np.asarray(base, dtype=np.float64)
    if b.ndim == 3:
        b = b.mean(axis=-1)
    if b.max(initial=0.0) > 1.0:
        b = b / 255.0
    return np.clip(b, 0.0, 1.0) * 255.0


def overlay(values, base_image, alpha=0.5):
    """Alpha-blend the coloured map over a grayscale copy of ``base_image``."""
    gray = _gray(base_image)
    if gray.shape != np.shape(values):
        raise ValueError(f"map {np.shape(values)} and image {gray.shape} differ in size")
    color = colormap(values).astype(np.float64)
    out = alpha * color + (1.0 - alpha) * gray[..., None]
    return np.rint(out).astype(np.uint8)


def render_heatmap(smap, base_image, out_path, alpha=0.5):
    values = smap.values if isinstance(smap, SaliencyMap) else smap
    Image.fromarray(overlay(values, base_image, alpha)).save(out_path, format="PNG")
    return out_path


def render_colorbar(out_path, width=256, height=16):
    """Standalone legend from -1 (left) to +1 (right)."""
    row = colormap(np.linspace(-1.0, 1.0, width))
    Image.fromarray(np.repeat(row[None], height, axis=0)).save(out_path, format="PNG")
    return out_path


def heatmap_name(record_id, scenario, modality):
    return f"{record_id}_{scenario}_{modality}.png"


def export(model, scenario, items, out_dir, alpha=0.5):
    """Render every ``(record_id, cfp, faf)`` item; writes PNGs, a colorbar and a stats CSV."""
    os.makedirs(out_dir, exist_ok=True)
    written = []
    rows = []
    for rid, cfp, faf in items:
        maps = saliency_map(model, scenario, cfp, faf, rid)
        for m, smap in maps.items():
            base = cfp if m == "cfp" else faf
            path = os.path.join(out_dir, heatmap_name(rid, scenario, m))
            render_heatmap(smap, base, path, alpha)
            written.append(path)
            rows.append([rid, scenario, m, repr(smap.raw_min), repr(smap.raw_max), smap.argmax[0], smap.argmax[1]])
    render_colorbar(os.path.join(out_dir, "colorbar.png"))
    with open(os.path.join(out_dir, "saliency_stats.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["record_id", "scenario", "modality", "raw_min", "raw_max", "argmax_row", "argmax_col"])
        w.writerows(rows)
    return written
