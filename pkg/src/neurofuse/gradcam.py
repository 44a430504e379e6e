"""Grad-CAM heatmaps and colormap overlays for the fusion classifier.

Two target grids are supported.  The default, ``"pointwise"``, is the 1x1
projection output, the last convolutional map before global pooling; note
that the class score sees that map only through the spatial average, so its
gradients are constant per channel and the heat pattern is carried entirely
by the activations.  ``"residual"`` targets the residual backbone's output
grid instead: gradients reach it through the attention gates and the fused
projection, so they vary across cells, which localizes much better when the
backbones are randomly initialized rather than pretrained.

Either way the target grid is detached from the graph and re-wrapped as the
only gradient source; the class score is rebuilt from it alone, so backward
touches just the downstream tape regardless of how the grid was produced.

Class choice defaults to the network's own prediction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .preprocess import PreprocessResult, resize_nearest, to_grayscale
from .training import net_input_channels, to_net_input
from .util import round_half_away

__all__ = [
    "Heatmap",
    "bilinear_upsample",
    "grad_cam",
    "heatmap_mask",
    "iou",
    "jet_colormap",
    "overlay",
    "project_mask",
]

TARGET_LAYERS = ("pointwise", "residual")


@dataclass(frozen=True)
class Heatmap:
    grid: np.ndarray       # (gh, gw) in [0, 1] at the target layer's size
    upsampled: np.ndarray  # (h, w) in [0, 1] at the input image's size
    class_index: int


def bilinear_upsample(grid: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centre bilinear resampling with edge clamping."""
    grid = np.asarray(grid, dtype=np.float64)
    gh, gw = grid.shape
    if out_h < 1 or out_w < 1:
        raise ValueError("output size must be positive")

    def _coords(n_out, n_in):
        c = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        c = np.clip(c, 0.0, n_in - 1.0)
        lo = np.floor(c).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, c - lo

    r0, r1, fr = _coords(out_h, gh)
    c0, c1, fc = _coords(out_w, gw)
    top = grid[r0][:, c0] * (1 - fc) + grid[r0][:, c1] * fc
    bot = grid[r1][:, c0] * (1 - fc) + grid[r1][:, c1] * fc
    return top * (1 - fr)[:, None] + bot * fr[:, None]


def grad_cam(net, image: np.ndarray, class_index: int | None = None,
             target_layer: str = "pointwise") -> Heatmap:
    """Channel-importance map: alpha_k = spatial mean of d(score)/dA_k,
    map = relu(sum_k alpha_k A_k), max-normalized then upsampled.

    ``image`` is one uint8 (h, w) preprocessed grayscale image.  With
    ``class_index=None`` the predicted class is explained.
    """
    if target_layer not in TARGET_LAYERS:
        raise ValueError(
            f"{target_layer!r} is not a convolutional output; pick from {TARGET_LAYERS}")
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError(f"expected one (h, w) grayscale image, got shape {image.shape}")
    net.eval()
    x = T.Tensor(to_net_input(image[None], net_input_channels(net)))
    res_out, taps = net.backbone_outputs(x)
    if target_layer == "pointwise":
        act = net.fused_map_from(res_out, taps).data
        a = T.Tensor(act, requires_grad=True)
        logits = net.logits_from_map(a)
    else:
        act = res_out.data
        a = T.Tensor(act, requires_grad=True)
        logits = net.logits(net.features_from(a, [T.Tensor(t.data) for t in taps]))
    k = logits.data.shape[1]
    if class_index is None:
        class_index = int(np.argmax(logits.data[0]))
    if not 0 <= class_index < k:
        raise ValueError(f"class index {class_index} out of range for {k} classes")
    mask = np.zeros_like(logits.data)
    mask[0, class_index] = 1.0
    score = T.sum_all(logits * T.Tensor(mask))
    score.backward()

    alpha = a.grad[0].mean(axis=(0, 1))  # (C,) spatial mean per channel
    cam = np.maximum(0.0, np.tensordot(act[0].astype(np.float64), alpha, axes=([2], [0])))
    peak = cam.max()
    if peak > 0:
        cam = cam / peak
    up = bilinear_upsample(cam, image.shape[0], image.shape[1])
    return Heatmap(grid=cam, upsampled=np.clip(up, 0.0, 1.0),
                   class_index=class_index)


def jet_colormap(values: np.ndarray) -> np.ndarray:
    """Classic piecewise-linear jet, values in [0,1] -> float RGB in [0,1]."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    r = np.clip(np.minimum(4.0 * v - 1.5, -4.0 * v + 4.5), 0.0, 1.0)
    g = np.clip(np.minimum(4.0 * v - 0.5, -4.0 * v + 3.5), 0.0, 1.0)
    b = np.clip(np.minimum(4.0 * v + 0.5, -4.0 * v + 2.5), 0.0, 1.0)
    return np.stack([r, g, b], axis=-1)


def overlay(image: np.ndarray, heatmap, alpha: float = 0.4) -> np.ndarray:
    """Blend a jet-colored heatmap over the (grayscale) image; uint8 RGB out."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must be in [0, 1]")
    image = np.asarray(image)
    gray = to_grayscale(image) if image.ndim == 3 else image
    heat = np.asarray(getattr(heatmap, "upsampled", heatmap), dtype=np.float64)
    if heat.shape != gray.shape:
        raise ValueError(f"heatmap shape {heat.shape} does not match image {gray.shape}")
    base = np.repeat(gray.astype(np.float64)[..., None] / 255.0, 3, axis=2)
    blended = (1.0 - alpha) * base + alpha * jet_colormap(heat)
    return np.clip(round_half_away(blended * 255.0), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# localization scoring against ground-truth masks
# ---------------------------------------------------------------------------

def heatmap_mask(heatmap, fraction: float = 0.25) -> np.ndarray:
    """Binary mask of the top ``fraction`` of heatmap values."""
    heat = np.asarray(getattr(heatmap, "upsampled", heatmap), dtype=np.float64)
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must be in (0, 1]")
    threshold = np.quantile(heat, 1.0 - fraction)
    return heat >= threshold


def iou(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(a, b).sum() / union)


def project_mask(mask: np.ndarray, result: PreprocessResult) -> np.ndarray:
    """Carry a ground-truth mask through the same crop + resize the image
    underwent, so it aligns with heatmaps in preprocessed coordinates."""
    mask = np.asarray(mask)
    r0, c0, r1, c1 = result.box
    cropped = (mask[r0:r1, c0:c1] > 0).astype(np.uint8)
    h, w = result.image.shape
    return resize_nearest(cropped, h, w) > 0
