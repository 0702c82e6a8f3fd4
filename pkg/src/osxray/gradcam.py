"""Grad-CAM heatmaps over the final conv feature maps, plus the
horizontal-flip consistency experiment.

Channel weights are the spatial means of d(class logit)/d(feature map);
the raw map is ReLU of the weighted channel sum, bilinearly upsampled to
the input size and normalized by its max (an identically-zero map stays
zero, so values always lie in [0, 1]).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from .errors import ConfigError, ContractError, DimensionError
from .layers import ModelParams, ModelSpec, forward
from .tensor import Tensor


@dataclass
class Heatmap:
    values: np.ndarray  # [H, W] in [0, 1], upsampled to the input size
    raw: np.ndarray     # normalized map at feature-map resolution
    target_class: int
    source_layer: str


def bilinear_resize(values: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear upsampling with corner alignment."""
    h, w = values.shape
    if (h, w) == (out_h, out_w):
        return values.copy()
    ys = np.linspace(0, h - 1, out_h) if out_h > 1 else np.zeros(1)
    xs = np.linspace(0, w - 1, out_w) if out_w > 1 else np.zeros(1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    top = values[np.ix_(y0, x0)] * (1 - fx) + values[np.ix_(y0, x1)] * fx
    bot = values[np.ix_(y1, x0)] * (1 - fx) + values[np.ix_(y1, x1)] * fx
    return top * (1 - fy) + bot * fy


def gradcam(spec: ModelSpec, params: ModelParams, image: np.ndarray,
            class_id: int, upsample_to: Optional[int] = None) -> Heatmap:
    """Heatmap of the regions driving the given class's logit."""
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 3:
        raise DimensionError(f"gradcam: expected [C,H,W] image, got shape {image.shape}")
    if not 0 <= class_id < spec.num_classes:
        raise ContractError(f"class_id {class_id} out of range [0,{spec.num_classes})")
    batch = Tensor(image[None], requires_grad=True)
    out = forward(spec, params, batch, mode="eval")
    maps = out.last_conv_maps
    if maps.ndim != 4 or maps.shape[2] < 1:
        raise ConfigError("gradcam: target layer has no spatial extent")
    score = out.logits[(0, class_id)].sum()
    score.backward()
    grads = maps.grad
    if grads is None:
        grads = np.zeros_like(maps.data)
    for t in params.tensors.values():
        t.grad = None
    fmaps = maps.data[0].astype(np.float64)       # [C, h, w]
    channel_w = grads[0].astype(np.float64).mean(axis=(1, 2))
    raw = np.maximum((channel_w[:, None, None] * fmaps).sum(axis=0), 0.0)
    peak = raw.max()
    if peak > 0:
        raw = raw / peak
    side = upsample_to or image.shape[-1]
    values = np.clip(bilinear_resize(raw, side, side), 0.0, 1.0)
    return Heatmap(values=values, raw=raw, target_class=class_id, source_layer="final_conv")


# Fixed 256-entry blue -> green -> yellow -> red colormap.
def _build_colormap() -> np.ndarray:
    anchors = np.array([
        [0.0, 0, 0, 255],
        [1 / 3, 0, 255, 0],
        [2 / 3, 255, 255, 0],
        [1.0, 255, 0, 0],
    ])
    xs = np.linspace(0, 1, 256)
    table = np.stack([np.interp(xs, anchors[:, 0], anchors[:, ch + 1]) for ch in range(3)], axis=1)
    return np.round(table).astype(np.uint8)


COLORMAP = _build_colormap()


def overlay(image: np.ndarray, heatmap: np.ndarray, alpha: float = 0.4) -> np.ndarray:
    """Alpha-blend the colormapped heatmap onto the grayscale image.

    Returns uint8 RGB [H, W, 3]; out = (1-alpha)*gray + alpha*colored.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ContractError(f"alpha must lie in [0,1], got {alpha}")
    if image.shape[-2:] != heatmap.shape:
        raise DimensionError(f"overlay: image {image.shape} vs heatmap {heatmap.shape}")
    gray = image.mean(axis=0) if image.ndim == 3 else image
    gray_rgb = np.repeat(gray[:, :, None], 3, axis=2) * 255.0
    idx = np.clip(np.round(heatmap * 255).astype(int), 0, 255)
    colored = COLORMAP[idx].astype(np.float64)
    blended = (1.0 - alpha) * gray_rgb + alpha * colored
    return np.clip(np.round(blended), 0, 255).astype(np.uint8)


def save_heatmap_png(path, heatmap: np.ndarray) -> None:
    idx = np.clip(np.round(heatmap * 255).astype(int), 0, 255)
    Image.fromarray(COLORMAP[idx], mode="RGB").save(path)


def save_overlay_png(path, image: np.ndarray, heatmap: np.ndarray, alpha: float = 0.4) -> None:
    Image.fromarray(overlay(image, heatmap, alpha), mode="RGB").save(path)


def _centroid(values: np.ndarray) -> tuple:
    total = values.sum()
    if total <= 0:
        h, w = values.shape
        return ((h - 1) / 2.0, (w - 1) / 2.0)
    ys, xs = np.mgrid[0:values.shape[0], 0:values.shape[1]]
    return (float((ys * values).sum() / total), float((xs * values).sum() / total))


def flip_experiment(spec: ModelSpec, params: ModelParams, images, class_ids=None) -> list:
    """For each image, compare the heatmap of the original input against the
    flipped-back heatmap of the horizontally mirrored input.

    Returns one dict per image with the two heatmaps, the centroid
    displacement (pixels), and the mean absolute gap.
    """
    results = []
    for i, image in enumerate(images):
        image = np.asarray(image, dtype=np.float32)
        if class_ids is not None:
            cid = int(class_ids[i])
        else:
            probs = forward(spec, params, Tensor(image[None]), mode="eval").logits.data
            cid = int(probs[0].argmax())
        cam_orig = gradcam(spec, params, image, cid)
        flipped = image[:, :, ::-1].copy()
        cam_flip = gradcam(spec, params, flipped, cid)
        unflipped = cam_flip.values[:, ::-1]
        cy0, cx0 = _centroid(cam_orig.values)
        cy1, cx1 = _centroid(unflipped)
        displacement = float(np.hypot(cy1 - cy0, cx1 - cx0))
        l1_gap = float(np.abs(cam_orig.values - unflipped).mean())
        results.append({
            "index": i,
            "class_id": cid,
            "cam_original": cam_orig,
            "cam_flipped": cam_flip,
            "centroid_displacement": displacement,
            "l1_gap": l1_gap,
        })
    return results
