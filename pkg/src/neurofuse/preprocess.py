"""Image preparation: grayscale, Otsu segmentation, ROI crop, CLAHE, augmentation, resize.

Every function is pure and operates on uint8 numpy images. The full chain
(grayscale -> threshold -> crop to the brain region -> contrast equalization
-> resize) is exposed both as ``preprocess_image`` and as the sklearn-style
``Preprocessor`` transformer.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .util import round_half_away
from .validation import check_image_u8

GRAY_WEIGHTS = (0.299, 0.587, 0.114)


def to_grayscale(img: np.ndarray) -> np.ndarray:
    """Luma-weighted channel mix, rounded half away from zero."""
    img = check_image_u8(img)
    if img.ndim == 2:
        return img
    mixed = img[:, :, 0] * GRAY_WEIGHTS[0] + img[:, :, 1] * GRAY_WEIGHTS[1] + img[:, :, 2] * GRAY_WEIGHTS[2]
    return np.clip(round_half_away(mixed), 0, 255).astype(np.uint8)


# -- Otsu thresholding -----------------------------------------------------------


@dataclass
class OtsuResult:
    threshold: int
    mask: np.ndarray  # True where intensity > threshold
    objectives: list[float] = field(repr=False, default_factory=list)


def otsu_threshold(img: np.ndarray) -> OtsuResult:
    """Threshold minimizing within-class intensity variance.

    Minimizing q1*var1 + q2*var2 over k is equivalent to maximizing
    S1(k)^2/n1(k) + S2(k)^2/n2(k), where S and n are the class intensity sums
    and pixel counts for the split at k. That quantity is compared as an exact
    rational with big-integer cross multiplication: float evaluation of the
    objective differs in the last ulp between algebraically equal splits
    (every empty-bin plateau produces such ties), which would make the
    smallest-k tie-break order-dependent.
    """
    img = check_image_u8(img)
    if img.ndim != 2:
        raise ValueError("otsu_threshold expects a grayscale image")
    hist = np.bincount(img.reshape(-1), minlength=256).astype(np.int64)
    values = np.arange(256, dtype=np.int64)
    c_n = np.cumsum(hist)
    c_s = np.cumsum(hist * values)
    c_s2 = np.cumsum(hist * values * values)
    n_total, s_total = int(c_n[-1]), int(c_s[-1])
    s2_total = float(c_s2[-1])

    best_k, best_num, best_den = 0, None, None
    objectives = []
    for k in range(256):
        n1, s1 = int(c_n[k]), int(c_s[k])
        n2, s2 = n_total - n1, s_total - s1
        if n1 == 0 or n2 == 0:
            num, den = s_total * s_total, n_total
        else:
            num, den = s1 * s1 * n2 + s2 * s2 * n1, n1 * n2
        objectives.append((s2_total - num / den) / n_total)
        if best_num is None or num * best_den > best_num * den:
            best_k, best_num, best_den = k, num, den
    return OtsuResult(best_k, img > best_k, objectives)


# -- ROI crop ----------------------------------------------------------------------


@dataclass
class RoiCrop:
    image: np.ndarray
    box: tuple[int, int, int, int]  # r0, c0, r1, c1 (exclusive)
    empty_foreground: bool


def _largest_component_box(mask: np.ndarray) -> tuple[int, int, int, int] | None:
    """Bounding box of the biggest 4-connected True region (first in scan order on ties)."""
    h, w = mask.shape
    seen = np.zeros_like(mask, dtype=bool)
    best = None
    best_size = 0
    for r0 in range(h):
        for c0 in range(w):
            if not mask[r0, c0] or seen[r0, c0]:
                continue
            queue = deque([(r0, c0)])
            seen[r0, c0] = True
            size = 0
            rmin = rmax = r0
            cmin = cmax = c0
            while queue:
                r, c = queue.popleft()
                size += 1
                rmin, rmax = min(rmin, r), max(rmax, r)
                cmin, cmax = min(cmin, c), max(cmax, c)
                for rr, cc in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
                    if 0 <= rr < h and 0 <= cc < w and mask[rr, cc] and not seen[rr, cc]:
                        seen[rr, cc] = True
                        queue.append((rr, cc))
            if size > best_size:
                best_size, best = size, (rmin, cmin, rmax + 1, cmax + 1)
    return best


def roi_crop(original: np.ndarray, mask: np.ndarray, margin: int = 0, mode: str = "largest") -> RoiCrop:
    """Crop to the foreground bounding box; empty foreground falls back to the full image."""
    original = check_image_u8(original)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != original.shape[:2]:
        raise ValueError(f"mask shape {mask.shape} does not match image {original.shape[:2]}")
    if mode not in ("largest", "union"):
        raise ValueError(f"mode must be 'largest' or 'union', got {mode!r}")
    h, w = mask.shape
    if not mask.any():
        return RoiCrop(original, (0, 0, h, w), empty_foreground=True)
    if mode == "union":
        rows, cols = np.nonzero(mask)
        box = (int(rows.min()), int(cols.min()), int(rows.max()) + 1, int(cols.max()) + 1)
    else:
        box = _largest_component_box(mask)
    r0 = max(box[0] - margin, 0)
    c0 = max(box[1] - margin, 0)
    r1 = min(box[2] + margin, h)
    c1 = min(box[3] + margin, w)
    return RoiCrop(original[r0:r1, c0:c1], (r0, c0, r1, c1), empty_foreground=False)


# -- CLAHE --------------------------------------------------------------------------


def _tile_mapping(tile: np.ndarray, clip_limit: float) -> np.ndarray:
    """256-entry equalization LUT for one tile, histogram clipped and excess spread."""
    n = tile.size
    hist = np.bincount(tile.reshape(-1), minlength=256).astype(np.float64)
    clip = clip_limit * n / 256.0
    excess = np.maximum(hist - clip, 0.0).sum()
    hist = np.minimum(hist, clip) + excess / 256.0
    cdf = np.cumsum(hist)
    # Midpoint rule: map each value by the CDF at its bin center, which keeps
    # a constant image within +-2 of itself instead of drifting to the bin top.
    centered = cdf - hist / 2.0
    return np.clip(round_half_away(255.0 * centered / n), 0, 255).astype(np.float64)


def _tile_edges(extent: int, tiles: int) -> np.ndarray:
    return (np.arange(tiles + 1) * extent) // tiles


def clahe(img: np.ndarray, grid: int = 8, clip_limit: float = 2.0) -> np.ndarray:
    """Contrast-limited adaptive equalization with bilinear mapping interpolation.

    Each tile gets a clipped-histogram equalization LUT; every pixel blends the
    LUTs of the four surrounding tile centers (two or one at the borders).
    Images smaller than the grid fall back to one tile per pixel row/column.
    """
    img = check_image_u8(img)
    if img.ndim != 2:
        raise ValueError("clahe expects a grayscale image")
    h, w = img.shape
    gh, gw = min(grid, h), min(grid, w)
    row_edges, col_edges = _tile_edges(h, gh), _tile_edges(w, gw)
    luts = np.empty((gh, gw, 256), dtype=np.float64)
    for i in range(gh):
        for j in range(gw):
            tile = img[row_edges[i] : row_edges[i + 1], col_edges[j] : col_edges[j + 1]]
            luts[i, j] = _tile_mapping(tile, clip_limit)

    centers_r = (row_edges[:-1] + row_edges[1:] - 1) / 2.0
    centers_c = (col_edges[:-1] + col_edges[1:] - 1) / 2.0

    def axis_blend(coords: np.ndarray, centers: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        lo = np.clip(np.searchsorted(centers, coords, side="right") - 1, 0, len(centers) - 1)
        hi = np.minimum(lo + 1, len(centers) - 1)
        span = centers[hi] - centers[lo]
        t = np.where(span > 0, (coords - centers[lo]) / np.where(span > 0, span, 1.0), 0.0)
        return lo, hi, np.clip(t, 0.0, 1.0)

    ri, rj, ty = axis_blend(np.arange(h, dtype=np.float64), centers_r)
    ci, cj, tx = axis_blend(np.arange(w, dtype=np.float64), centers_c)
    ty = ty[:, None]
    tx = tx[None, :]
    m00 = luts[ri[:, None], ci[None, :], img]
    m01 = luts[ri[:, None], cj[None, :], img]
    m10 = luts[rj[:, None], ci[None, :], img]
    m11 = luts[rj[:, None], cj[None, :], img]
    blended = (1 - ty) * ((1 - tx) * m00 + tx * m01) + ty * ((1 - tx) * m10 + tx * m11)
    return np.clip(round_half_away(blended), 0, 255).astype(np.uint8)


# -- augmentation ---------------------------------------------------------------------


@dataclass(frozen=True)
class AugmentSpec:
    rotation_max_deg: float = 40.0
    shift_frac: float = 0.2
    shear_max: float = 0.2
    zoom_frac: float = 0.2
    hflip: float = 0.5
    vflip: float = 0.5
    seed: int = 0


@dataclass(frozen=True)
class AffineParams:
    rotation_deg: float
    shift_rows: float
    shift_cols: float
    shear: float
    zoom: float
    hflip: bool
    vflip: bool


def sample_affine_params(spec: AugmentSpec, rng: np.random.Generator) -> AffineParams:
    """Draw one transform; the draw order is fixed so seeded runs replay exactly."""
    return AffineParams(
        rotation_deg=rng.uniform(-spec.rotation_max_deg, spec.rotation_max_deg),
        shift_rows=rng.uniform(-spec.shift_frac, spec.shift_frac),
        shift_cols=rng.uniform(-spec.shift_frac, spec.shift_frac),
        shear=rng.uniform(-spec.shear_max, spec.shear_max),
        zoom=rng.uniform(1.0 - spec.zoom_frac, 1.0 + spec.zoom_frac),
        hflip=bool(rng.random() < spec.hflip),
        vflip=bool(rng.random() < spec.vflip),
    )


def _affine_matrix(params: AffineParams, h: int, w: int) -> np.ndarray:
    """Forward 3x3 matrix on homogeneous (row, col) coordinates, centered."""
    theta = np.deg2rad(params.rotation_deg)
    rot = np.array([[np.cos(theta), -np.sin(theta), 0], [np.sin(theta), np.cos(theta), 0], [0, 0, 1]])
    shear = np.array([[1.0, params.shear, 0], [0, 1.0, 0], [0, 0, 1]])
    zoom = np.array([[params.zoom, 0, 0], [0, params.zoom, 0], [0, 0, 1]])
    flip = np.diag([-1.0 if params.vflip else 1.0, -1.0 if params.hflip else 1.0, 1.0])
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    to_center = np.array([[1, 0, -cy], [0, 1, -cx], [0, 0, 1.0]])
    from_center = np.array([[1, 0, cy], [0, 1, cx], [0, 0, 1.0]])
    shift = np.array([[1, 0, params.shift_rows * h], [0, 1, params.shift_cols * w], [0, 0, 1.0]])
    return shift @ from_center @ rot @ shear @ zoom @ flip @ to_center


def apply_affine(img: np.ndarray, params: AffineParams) -> np.ndarray:
    """Inverse-map the output grid through the transform; nearest sample, edge fill."""
    h, w = img.shape[:2]
    inv = np.linalg.inv(_affine_matrix(params, h, w))
    out_r, out_c = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    src_r = inv[0, 0] * out_r + inv[0, 1] * out_c + inv[0, 2]
    src_c = inv[1, 0] * out_r + inv[1, 1] * out_c + inv[1, 2]
    rr = np.clip(round_half_away(src_r), 0, h - 1)
    cc = np.clip(round_half_away(src_c), 0, w - 1)
    return img[rr, cc]


def augment(img: np.ndarray, spec: AugmentSpec, rng: np.random.Generator) -> np.ndarray:
    return apply_affine(check_image_u8(img), sample_affine_params(spec, rng))


# -- resize --------------------------------------------------------------------------


def resize_nearest(img: np.ndarray, out_h: int = 224, out_w: int = 224) -> np.ndarray:
    """Nearest-neighbor resize with pure integer source indexing."""
    if out_h < 1 or out_w < 1:
        raise ValueError(f"output size must be positive, got {out_h}x{out_w}")
    h, w = img.shape[:2]
    rows = (np.arange(out_h, dtype=np.int64) * h) // out_h
    cols = (np.arange(out_w, dtype=np.int64) * w) // out_w
    return img[np.ix_(rows, cols)]


# -- pipeline ---------------------------------------------------------------------------


@dataclass
class PreprocessResult:
    image: np.ndarray
    threshold: int
    box: tuple[int, int, int, int]
    empty_foreground: bool


def preprocess_image(
    img: np.ndarray,
    size: tuple[int, int] = (224, 224),
    clahe_grid: int = 8,
    clahe_clip: float = 2.0,
    roi: bool = True,
    roi_margin: int = 0,
    roi_mode: str = "largest",
) -> PreprocessResult:
    """Grayscale -> Otsu mask -> ROI crop -> CLAHE -> nearest resize."""
    gray = to_grayscale(img)
    otsu = otsu_threshold(gray)
    if roi:
        crop = roi_crop(gray, otsu.mask, margin=roi_margin, mode=roi_mode)
    else:
        crop = RoiCrop(gray, (0, 0, gray.shape[0], gray.shape[1]), empty_foreground=False)
    equalized = clahe(crop.image, grid=clahe_grid, clip_limit=clahe_clip)
    resized = resize_nearest(equalized, size[0], size[1])
    return PreprocessResult(resized, otsu.threshold, crop.box, crop.empty_foreground)


class Preprocessor(TransformerMixin, BaseEstimator):
    """Stateless sklearn-style transformer over batches of uint8 images.

    ``transform`` accepts a list (or array) of grayscale/color uint8 images of
    any sizes and returns a uint8 array (n, height, width) of preprocessed
    images. Nothing is learned; ``fit`` only validates.
    """

    def __init__(self, size=(224, 224), clahe_grid=8, clahe_clip=2.0, roi=True, roi_margin=0, roi_mode="largest"):
        self.size = size
        self.clahe_grid = clahe_grid
        self.clahe_clip = clahe_clip
        self.roi = roi
        self.roi_margin = roi_margin
        self.roi_mode = roi_mode

    def fit(self, X, y=None):
        for img in X:
            check_image_u8(img)
        return self

    def transform(self, X) -> np.ndarray:
        out = np.empty((len(X), self.size[0], self.size[1]), dtype=np.uint8)
        for i, img in enumerate(X):
            out[i] = preprocess_image(
                img,
                size=self.size,
                clahe_grid=self.clahe_grid,
                clahe_clip=self.clahe_clip,
                roi=self.roi,
                roi_margin=self.roi_margin,
                roi_mode=self.roi_mode,
            ).image
        return out
