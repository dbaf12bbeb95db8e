"""Pre-processing and quality analysis: nucleus segmentation, patch
extraction, the trainable focus scorer, plate heatmaps, and occlusion
saliency."""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import learn
from .core import PLATE_COLS, PLATE_ROWS, SiteImage, SiteKey
from .errors import ConfigError, ConvergenceError, DegenerateInputWarning, InputError
from .simulate import gaussian_blur

EIGHT_CONNECTED = np.ones((3, 3), dtype=int)


def otsu_threshold(x: np.ndarray) -> float:
    """Otsu's threshold over a 256-bin histogram on the fixed [0, 1] range."""
    hist, edges = np.histogram(x, bins=256, range=(0.0, 1.0))
    hist = hist.astype(np.float64)
    total = hist.sum()
    if total == 0:
        return float(x.max()) if x.size else 1.0
    centers = 0.5 * (edges[:-1] + edges[1:])
    w0 = np.cumsum(hist)
    w1 = total - w0
    sum0 = np.cumsum(hist * centers)
    sum_total = sum0[-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        m0 = sum0 / w0
        m1 = (sum_total - sum0) / w1
        between = w0 * w1 * (m0 - m1) ** 2
    between[~np.isfinite(between)] = -1.0
    return float(centers[int(np.argmax(between))])


@dataclass(frozen=True)
class NucleusDetection:
    x: float
    y: float
    area_px: int
    mean_intensity: float


def segment_nuclei(image: SiteImage | np.ndarray, channel: int = 0,
                   min_area: int = 5) -> list[NucleusDetection]:
    """Otsu threshold + 8-connected components on the nucleus channel.

    Components of at least `min_area` pixels are returned with
    intensity-weighted centroids, ordered by (y, x). A zero-variance channel
    yields an empty list and a DegenerateInputWarning.
    """
    data = image.data if isinstance(image, SiteImage) else image
    if not (0 <= channel < data.shape[2]):
        raise InputError(f"channel {channel} out of range for {data.shape[2]} channels")
    x = data[:, :, channel].astype(np.float64)
    if float(x.std()) < 1e-12:
        warnings.warn("zero-variance nucleus channel; no segmentation possible",
                      DegenerateInputWarning)
        return []
    mask = x > otsu_threshold(x)
    labels, n = ndimage.label(mask, structure=EIGHT_CONNECTED)
    if n == 0:
        return []
    index = np.arange(1, n + 1)
    areas = ndimage.sum_labels(mask, labels, index=index)
    detections = []
    for i, area in zip(index, areas):
        if area < min_area:
            continue
        cy, cx = ndimage.center_of_mass(x, labels, int(i))
        mean_int = float(ndimage.mean(x, labels, int(i)))
        detections.append(
            NucleusDetection(x=float(cx), y=float(cy), area_px=int(area),
                             mean_intensity=mean_int)
        )
    detections.sort(key=lambda d: (d.y, d.x))
    return detections


@dataclass(frozen=True)
class CellPatch:
    parent: SiteKey | None
    center: tuple[float, float]
    data: np.ndarray
    padded: bool


def crop_patches(image: SiteImage | np.ndarray, detections: list[NucleusDetection],
                 size: int = 48, parent: SiteKey | None = None) -> list[CellPatch]:
    """Fixed-size crops centered on each detection; border crops are
    edge-padded and flagged. Exactly one patch per detection."""
    data = image.data if isinstance(image, SiteImage) else image
    h, w = data.shape[:2]
    if size % 2 != 0:
        raise ConfigError(f"patch size must be even, got {size}")
    if size > min(h, w):
        raise ConfigError(f"patch size {size} exceeds image dims {h}x{w}")
    half = size // 2
    padded_img = np.pad(data, ((half, half), (half, half), (0, 0)), mode="edge")
    patches = []
    for det in detections:
        iy, ix = int(round(det.y)), int(round(det.x))
        y0, x0 = iy - half, ix - half
        crop = padded_img[y0 + half : y0 + half + size, x0 + half : x0 + half + size, :]
        was_padded = y0 < 0 or x0 < 0 or y0 + size > h or x0 + size > w
        patches.append(
            CellPatch(parent=parent, center=(det.x, det.y),
                      data=np.ascontiguousarray(crop, dtype=np.float32), padded=was_padded)
        )
    return patches


# --------------------------------------------------------------------------
# Focus scoring
# --------------------------------------------------------------------------

FOCUS_FEATURE_NAMES = (
    "band_lo", "band_midlo", "band_midhi", "band_hi",
    "log_lap_energy", "log_grad_energy", "log_std",
)
_BAND_EDGES = (0.0, 0.125, 0.25, 0.375, 1.0)


def _laplacian(x: np.ndarray) -> np.ndarray:
    lap = np.zeros_like(x)
    lap[1:-1, 1:-1] = (
        4.0 * x[1:-1, 1:-1] - x[:-2, 1:-1] - x[2:, 1:-1] - x[1:-1, :-2] - x[1:-1, 2:]
    )
    return lap


def focus_features(img2d: np.ndarray) -> np.ndarray:
    """Frequency-content features of a single 2-D image: radial band-energy
    ratios of the power spectrum plus log Laplacian/gradient/std energies."""
    x = img2d.astype(np.float64)
    x = x - x.mean()
    h, w = x.shape
    spectrum = np.abs(np.fft.rfft2(x)) ** 2
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.rfftfreq(w)[None, :]
    r = np.sqrt(fy * fy + fx * fx)
    total = spectrum.sum() + 1e-12
    bands = [
        spectrum[(r >= lo) & (r < hi)].sum() / total
        for lo, hi in zip(_BAND_EDGES[:-1], _BAND_EDGES[1:])
    ]
    lap = _laplacian(x)
    gy, gx = np.gradient(x)
    return np.array(
        bands
        + [
            math.log(float((lap * lap).mean()) + 1e-12),
            math.log(float((gy * gy + gx * gx).mean()) + 1e-12),
            math.log(float(x.std()) + 1e-12),
        ]
    )


def _to_2d(image) -> np.ndarray:
    if isinstance(image, np.ndarray):
        data = image
    elif hasattr(image, "data") and isinstance(image.data, np.ndarray):
        data = image.data
    else:
        data = np.asarray(image)
    if data.ndim == 3:
        return data.mean(axis=2)
    if data.ndim == 2:
        return data
    raise InputError(f"expected a 2-D or 3-D image, got shape {data.shape}")


@dataclass
class FocusModel:
    """Ordinal focus scorer: a multinomial logistic model over blur levels,
    read out through expected-rank aggregation."""

    levels: tuple[float, ...]
    model: learn.LogisticModel

    def to_dict(self) -> dict:
        return {"kind": "focus_model", "version": 1,
                "levels": list(self.levels), "model": self.model.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "FocusModel":
        if d.get("kind") != "focus_model" or d.get("version") != 1:
            raise ConfigError("not a version-1 focus model document")
        return cls(levels=tuple(d["levels"]), model=learn.LogisticModel.from_dict(d["model"]))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "FocusModel":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def train_focus_model(patches, blur_levels, seed: int = 0, l2: float = 1e-2,
                      max_iter: int = 3000, tol: float = 1e-5) -> FocusModel:
    """Blur every patch at every level, featurize, and fit a logistic model
    predicting the blur level index."""
    levels = tuple(float(s) for s in blur_levels)
    if len(levels) < 2:
        raise ConfigError("need at least 2 blur levels")
    if any(b <= a for a, b in zip(levels, levels[1:])):
        raise ConfigError(f"blur levels must be strictly increasing, got {levels}")
    if any(s < 0 for s in levels):
        raise ConfigError("blur levels must be >= 0")
    mats = [_to_2d(p) for p in patches]
    if len(mats) < 50:
        raise InputError(f"need at least 50 patches to train, got {len(mats)}")
    rows, labels = [], []
    for m in mats:
        for k, sigma in enumerate(levels):
            rows.append(focus_features(gaussian_blur(m, sigma)))
            labels.append(k)
    X = np.vstack(rows)
    model = learn.train_logistic(X, labels, l2=l2, max_iter=max_iter, tol=tol, seed=seed)
    if not model.convergence["converged"]:
        raise ConvergenceError(
            "focus model failed to converge: "
            + json.dumps(model.convergence, sort_keys=True)
        )
    return FocusModel(levels=levels, model=model)


def focus_score(fm: FocusModel, image) -> float:
    """Expected-rank focus score in [0, 1]; 1 means sharpest trained level.

    score = sum_k p_k * (1 - k/(L-1)) over the ordered blur levels. A
    zero-variance input scores 0 with a DegenerateInputWarning (it carries no
    focus evidence)."""
    x = _to_2d(image)
    if float(x.std()) < 1e-12:
        warnings.warn("zero-variance input to focus_score", DegenerateInputWarning)
        return 0.0
    probs = learn.predict_proba(fm.model, focus_features(x)[None, :])[0]
    return float(expected_rank_score(probs))


def expected_rank_score(probs: np.ndarray) -> float:
    nlevels = len(probs)
    ranks = 1.0 - np.arange(nlevels) / (nlevels - 1)
    return float(np.dot(probs, ranks))


# --------------------------------------------------------------------------
# Plate heatmap
# --------------------------------------------------------------------------

# Viridis-like ramp; linear interpolation between these RGB stops.
VIRIDIS_STOPS = (
    (0.267004, 0.004874, 0.329415),
    (0.282623, 0.140926, 0.457517),
    (0.253935, 0.265254, 0.529983),
    (0.206756, 0.371758, 0.553117),
    (0.163625, 0.471133, 0.558148),
    (0.127568, 0.566949, 0.550556),
    (0.134692, 0.658636, 0.517649),
    (0.266941, 0.748751, 0.440573),
    (0.477504, 0.821444, 0.318195),
    (0.741388, 0.873449, 0.149561),
    (0.993248, 0.906157, 0.143936),
)


def color_ramp(t: float) -> str:
    """Map t in [0, 1] to a hex color on the viridis-like ramp."""
    t = min(1.0, max(0.0, t))
    pos = t * (len(VIRIDIS_STOPS) - 1)
    i = min(int(pos), len(VIRIDIS_STOPS) - 2)
    frac = pos - i
    rgb = [
        VIRIDIS_STOPS[i][c] * (1 - frac) + VIRIDIS_STOPS[i + 1][c] * frac
        for c in range(3)
    ]
    return "#%02x%02x%02x" % tuple(int(round(255 * v)) for v in rgb)


def _site_subgrid(sites_per_well: int) -> tuple[int, int]:
    g = int(math.isqrt(sites_per_well))
    if g * g == sites_per_well:
        return g, g
    return 1, sites_per_well


def plate_heatmap(values: dict, sites_per_well: int, title: str = "") -> str:
    """Render one plate as an SVG heatmap: an 8x12 grid of wells, each split
    into a site subgrid (sqrt(s) x sqrt(s) for perfect squares, else a 1 x s
    strip), colored on the viridis-like ramp with a min/max legend.

    `values` maps (row, col, site_index) or (WellAddress, site_index) to a
    float. Output bytes are deterministic: floats are formatted at 4 decimals.
    """
    norm: dict[tuple[int, int, int], float] = {}
    for key, v in values.items():
        if len(key) == 2:
            well, si = key
            row, col = well.row, well.col
        else:
            row, col, si = key
        if not (0 <= row < PLATE_ROWS and 0 <= col < PLATE_COLS):
            raise InputError(f"well ({row}, {col}) outside the 96-well grid")
        if not (0 <= si < sites_per_well):
            raise InputError(f"site index {si} outside layout of {sites_per_well}")
        if not math.isfinite(v):
            raise InputError(f"non-finite value for site ({row}, {col}, {si})")
        norm[(row, col, si)] = float(v)

    grows, gcols = _site_subgrid(sites_per_well)
    cell = 8
    gap = 2
    well_w, well_h = gcols * cell, grows * cell
    left, top = 28, 30
    width = left + PLATE_COLS * (well_w + gap) + 16
    height = top + PLATE_ROWS * (well_h + gap) + 52

    if norm:
        vmin = min(norm.values())
        vmax = max(norm.values())
    else:
        vmin = vmax = 0.0
    span = vmax - vmin

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="#ffffff"/>',
    ]
    if title:
        out.append(
            f'<text x="{left}" y="16" font-family="monospace" font-size="11">{title}</text>'
        )
    for r in range(PLATE_ROWS):
        y = top + r * (well_h + gap)
        out.append(
            f'<text x="8" y="{y + well_h / 2 + 3:.4f}" font-family="monospace" '
            f'font-size="9">{chr(ord("A") + r)}</text>'
        )
        for c in range(PLATE_COLS):
            x = left + c * (well_w + gap)
            if r == 0:
                out.append(
                    f'<text x="{x + well_w / 2 - 3:.4f}" y="{top - 6}" '
                    f'font-family="monospace" font-size="9">{c + 1}</text>'
                )
            for si in range(sites_per_well):
                sr, sc = (si // gcols, si % gcols) if grows > 1 else (0, si)
                sx, sy = x + sc * cell, y + sr * cell
                v = norm.get((r, c, si))
                if v is None:
                    fill = "#eeeeee"
                else:
                    t = 0.5 if span == 0 else (v - vmin) / span
                    fill = color_ramp(t)
                out.append(
                    f'<rect x="{sx:.4f}" y="{sy:.4f}" width="{cell}" height="{cell}" '
                    f'fill="{fill}"/>'
                )
    # legend: 10-step gradient bar with numeric min/max
    ly = top + PLATE_ROWS * (well_h + gap) + 12
    bar_w = 12 * 10
    for i in range(10):
        out.append(
            f'<rect x="{left + i * 12}" y="{ly}" width="12" height="10" '
            f'fill="{color_ramp((i + 0.5) / 10)}"/>'
        )
    out.append(
        f'<text x="{left}" y="{ly + 24}" font-family="monospace" font-size="9">'
        f"min={vmin:.4f}</text>"
    )
    out.append(
        f'<text x="{left + bar_w - 48}" y="{ly + 24}" font-family="monospace" '
        f'font-size="9">max={vmax:.4f}</text>'
    )
    out.append("</svg>")
    return "\n".join(out) + "\n"


# --------------------------------------------------------------------------
# Occlusion saliency
# --------------------------------------------------------------------------


def occlusion_saliency(model_fn, image: SiteImage, window: int, stride: int,
                       fill=None) -> np.ndarray:
    """Score drop map from sliding-window occlusion.

    Grid cell (i, j) holds score(original) - score(image with the window at
    (i*stride, j*stride) replaced by `fill`). `fill` defaults to the
    per-channel pixel median of the image, which for sparse scenes is the
    background level.
    """
    data = image.data
    h, w, c = data.shape
    if window > min(h, w):
        raise ConfigError(f"window {window} exceeds image dims {h}x{w}")
    if window < 1 or stride < 1:
        raise ConfigError("window and stride must be >= 1")
    if fill is None:
        fill_vec = np.median(data.reshape(-1, c), axis=0)
    else:
        fill_vec = np.broadcast_to(np.asarray(fill, dtype=np.float64), (c,)).copy()
    base = float(model_fn(image))
    ny = (h - window) // stride + 1
    nx = (w - window) // stride + 1
    grid = np.zeros((ny, nx))
    for gi in range(ny):
        for gj in range(nx):
            y0, x0 = gi * stride, gj * stride
            occluded = data.copy()
            occluded[y0 : y0 + window, x0 : x0 + window, :] = fill_vec.astype(np.float32)
            grid[gi, gj] = base - float(model_fn(SiteImage(data=occluded)))
    return grid
