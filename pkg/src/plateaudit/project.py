"""Unsupervised 2-D projection for visual bias detection.

PCA whitening/preconditioning plus an exact O(n^2) t-SNE: per-point
bandwidths from a binary search on base-2 Shannon entropy, early
exaggeration x12 for the first 250 iterations, momentum 0.5 -> 0.8, and
Jacobs adaptive gains. The gradient loop is single-threaded and evaluation
order is fixed, so identical inputs and seed give identical coordinates.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import derive_stream
from .errors import AffinityDegeneracyError, ConfigError, DegenerateInputError, InputError

MAX_TSNE_ROWS = 5000
EXAGGERATION = 12.0
EXAGGERATION_ITERS = 250
ENTROPY_TOL = 1e-4
BANDWIDTH_SEARCH_ITERS = 50


@dataclass
class PcaResult:
    projected: np.ndarray
    explained_variance_ratio: np.ndarray
    components: np.ndarray
    mean: np.ndarray

    def inverse(self, projected=None) -> np.ndarray:
        p = self.projected if projected is None else projected
        return p @ self.components + self.mean


def pca(X, k: int) -> PcaResult:
    """Column-centered PCA via eigendecomposition of the covariance matrix.

    Ratios are sorted descending and sum to at most 1. Component signs are
    fixed so the largest-magnitude loading of each component is positive.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise InputError(f"X must be 2-D with n >= 2, got shape {X.shape}")
    n, d = X.shape
    if not (1 <= k <= min(n, d)):
        raise ConfigError(f"k={k} must be in [1, min(n, d)={min(n, d)}]")
    mean = X.mean(axis=0)
    Xc = X - mean
    cov = (Xc.T @ Xc) / (n - 1)
    total = float(np.trace(cov))
    if total < 1e-15:
        raise DegenerateInputError("input has zero variance in every direction")
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1][:k]
    components = eigvecs[:, order].T
    for i in range(components.shape[0]):
        j = int(np.argmax(np.abs(components[i])))
        if components[i, j] < 0:
            components[i] = -components[i]
    ratios = np.clip(eigvals[order], 0.0, None) / total
    return PcaResult(
        projected=Xc @ components.T,
        explained_variance_ratio=ratios,
        components=components,
        mean=mean,
    )


# --------------------------------------------------------------------------
# t-SNE
# --------------------------------------------------------------------------


def _squared_distances(X: np.ndarray) -> np.ndarray:
    sq = (X * X).sum(axis=1)
    D = sq[:, None] + sq[None, :] - 2.0 * (X @ X.T)
    np.fill_diagonal(D, 0.0)
    return np.clip(D, 0.0, None)


def conditional_affinities(D: np.ndarray, perplexity: float) -> tuple[np.ndarray, np.ndarray, int]:
    """Row-stochastic conditional affinities with per-point bandwidth chosen
    by binary search so each row's base-2 entropy hits log2(perplexity)
    within 1e-4 (at most 50 iterations; uncalibrated points are counted)."""
    n = D.shape[0]
    target = math.log2(perplexity)
    P = np.zeros((n, n))
    betas = np.ones(n)
    uncalibrated = 0
    for i in range(n):
        d = np.delete(D[i], i)
        beta, beta_lo, beta_hi = 1.0, 0.0, math.inf
        row = None
        ok = False
        for _ in range(BANDWIDTH_SEARCH_ITERS):
            w = np.exp(-d * beta)
            total = w.sum()
            if total <= 0:
                beta_hi = beta
                beta = 0.5 * (beta_lo + beta)
                continue
            row = w / total
            # H in bits: -sum p log2 p, computed stably as beta*E[d]/ln2 + log2(total)
            entropy = (beta * float((row * d).sum())) / math.log(2.0) + math.log2(total)
            diff = entropy - target
            if abs(diff) < ENTROPY_TOL:
                ok = True
                break
            if diff > 0:
                beta_lo = beta
                beta = beta * 2.0 if beta_hi == math.inf else 0.5 * (beta + beta_hi)
            else:
                beta_hi = beta
                beta = 0.5 * (beta_lo + beta)
        if not ok:
            uncalibrated += 1
        if row is None:
            row = np.full(n - 1, 1.0 / (n - 1))
        P[i, np.arange(n) != i] = row
        betas[i] = beta
    return P, betas, uncalibrated


def joint_affinities(X, perplexity: float) -> tuple[np.ndarray, np.ndarray, int]:
    """Symmetrized joint affinity matrix P (nonnegative, sums to 1)."""
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if n < 3:
        raise InputError(f"t-SNE needs at least 3 points, got {n}")
    if not (perplexity >= 1.0 and perplexity < (n - 1) / 3.0):
        raise ConfigError(
            f"perplexity {perplexity} out of range [1, (n-1)/3 = {(n - 1) / 3.0:.2f})"
        )
    D = _squared_distances(X)
    zero_neighbors = (D <= 0).sum(axis=1) - 1
    limit = (n - 1) - 3.0 * perplexity
    worst = int(zero_neighbors.max())
    if worst > limit:
        raise AffinityDegeneracyError(
            f"a point has {worst} duplicates at distance 0, exceeding the "
            f"(n-1) - 3*perplexity = {limit:.1f} budget"
        )
    P_cond, betas, uncalibrated = conditional_affinities(D, perplexity)
    P = (P_cond + P_cond.T) / (2.0 * n)
    return P, betas, uncalibrated


def _kl_divergence(P: np.ndarray, Q: np.ndarray) -> float:
    mask = P > 0
    return float((P[mask] * np.log(P[mask] / Q[mask])).sum())


@dataclass
class Projection2D:
    coords: np.ndarray
    keys: list[str] | None
    perplexity: float
    iterations: int
    seed: int
    kl_initial: float
    kl_post_exaggeration: float
    kl_final: float
    n_uncalibrated: int
    kept_indices: np.ndarray | None = None

    def __post_init__(self):
        if not np.isfinite(self.coords).all():
            raise InputError("projection produced non-finite coordinates")


def tsne(X, perplexity: float = 30.0, iterations: int = 1000, seed: int = 0,
         keys=None, learning_rate: float = 200.0) -> Projection2D:
    """Exact t-SNE to 2 dimensions. Inputs above 5000 rows are subsampled
    deterministically (with a warning); `kept_indices` records the rows."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise InputError(f"X must be 2-D, got shape {X.shape}")
    kept = None
    if X.shape[0] > MAX_TSNE_ROWS:
        warnings.warn(
            f"t-SNE input has {X.shape[0]} rows; deterministically subsampling "
            f"to {MAX_TSNE_ROWS}"
        )
        perm = derive_stream(seed, ["tsne", "subsample"]).permutation(X.shape[0])
        kept = np.sort(perm[:MAX_TSNE_ROWS])
        X = X[kept]
        if keys is not None:
            keys = [keys[i] for i in kept]
    n = X.shape[0]
    if iterations < 1:
        raise ConfigError("iterations must be >= 1")

    P, _betas, uncalibrated = joint_affinities(X, perplexity)

    stream = derive_stream(seed, ["tsne", "init"])
    Y = stream.normal(n * 2).reshape(n, 2) * 1e-4
    velocity = np.zeros_like(Y)
    gains = np.ones_like(Y)

    def q_of(Ycur):
        W = 1.0 / (1.0 + _squared_distances(Ycur))
        np.fill_diagonal(W, 0.0)
        Z = W.sum()
        return W, np.clip(W / Z, 1e-12, None)

    _, Q0 = q_of(Y)
    kl_initial = _kl_divergence(P, Q0)
    kl_post_exaggeration = kl_initial

    for it in range(iterations):
        exaggerated = it < EXAGGERATION_ITERS
        momentum = 0.5 if exaggerated else 0.8
        Pcur = P * EXAGGERATION if exaggerated else P
        W = 1.0 / (1.0 + _squared_distances(Y))
        np.fill_diagonal(W, 0.0)
        M = (Pcur - W / W.sum()) * W
        grad = 4.0 * (M.sum(axis=1)[:, None] * Y - M @ Y)
        flip = np.sign(grad) != np.sign(velocity)
        gains = np.where(flip, gains + 0.2, gains * 0.8)
        np.clip(gains, 0.01, None, out=gains)
        velocity = momentum * velocity - learning_rate * gains * grad
        Y = Y + velocity
        Y = Y - Y.mean(axis=0)
        if it == EXAGGERATION_ITERS - 1 or (iterations <= EXAGGERATION_ITERS
                                            and it == iterations - 1):
            _, Qx = q_of(Y)
            kl_post_exaggeration = _kl_divergence(P, Qx)

    _, Qf = q_of(Y)
    kl_final = _kl_divergence(P, Qf)
    return Projection2D(
        coords=Y,
        keys=list(keys) if keys is not None else None,
        perplexity=perplexity,
        iterations=iterations,
        seed=seed,
        kl_initial=kl_initial,
        kl_post_exaggeration=kl_post_exaggeration,
        kl_final=kl_final,
        n_uncalibrated=uncalibrated,
        kept_indices=kept,
    )


def neighbor_purity(coords: np.ndarray, labels, k: int = 15) -> float:
    """Mean fraction of each point's k nearest neighbors sharing its label."""
    coords = np.asarray(coords, dtype=np.float64)
    labels = list(labels)
    n = coords.shape[0]
    if n <= k:
        raise InputError(f"need more than k={k} points, got {n}")
    D = _squared_distances(coords)
    np.fill_diagonal(D, np.inf)
    frac = 0.0
    for i in range(n):
        nn = np.argpartition(D[i], k)[:k]
        frac += sum(labels[int(j)] == labels[i] for j in nn) / k
    return frac / n


# --------------------------------------------------------------------------
# Scatter SVG
# --------------------------------------------------------------------------

# Categorical palette (tab20-like), documented and stable.
CATEGORY_PALETTE = (
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b",
    "#e377c2", "#7f7f7f", "#bcbd22", "#17becf", "#aec7e8", "#ffbb78",
    "#98df8a", "#ff9896", "#c5b0d5", "#c49c94", "#f7b6d2", "#c7c7c7",
    "#dbdb8d", "#9edae5",
)


def scatter_svg(projection: Projection2D, categories, color_by: str = "",
                title: str = "") -> str:
    """Deterministic categorical scatter plot of a 2-D projection."""
    cats = [str(c) for c in categories]
    if len(cats) != projection.coords.shape[0]:
        raise InputError(
            f"{len(cats)} category labels for {projection.coords.shape[0]} points"
        )
    distinct = sorted(set(cats))
    if len(distinct) > len(CATEGORY_PALETTE):
        raise InputError(
            f"{len(distinct)} categories exceed the {len(CATEGORY_PALETTE)}-color "
            f"palette; color by a coarser column"
        )
    color_of = {c: CATEGORY_PALETTE[i] for i, c in enumerate(distinct)}

    size = 420
    margin = 30
    legend_w = 110
    width, height = size + legend_w, size
    xs, ys = projection.coords[:, 0], projection.coords[:, 1]
    x0, x1 = float(xs.min()), float(xs.max())
    y0, y1 = float(ys.min()), float(ys.max())
    xspan = (x1 - x0) or 1.0
    yspan = (y1 - y0) or 1.0

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="#ffffff"/>',
    ]
    if title:
        out.append(
            f'<text x="{margin}" y="16" font-family="monospace" font-size="11">{title}</text>'
        )
    for i in range(len(cats)):
        px = margin + (xs[i] - x0) / xspan * (size - 2 * margin)
        py = margin + (1.0 - (ys[i] - y0) / yspan) * (size - 2 * margin)
        out.append(f'<circle cx="{px:.4f}" cy="{py:.4f}" r="2" fill="{color_of[cats[i]]}"/>')
    ly = margin
    if color_by:
        out.append(
            f'<text x="{size + 4}" y="{ly}" font-family="monospace" font-size="10">'
            f"{color_by}</text>"
        )
        ly += 14
    for c in distinct:
        out.append(f'<circle cx="{size + 10}" cy="{ly - 3}" r="3" fill="{color_of[c]}"/>')
        out.append(
            f'<text x="{size + 18}" y="{ly}" font-family="monospace" font-size="10">{c}</text>'
        )
        ly += 13
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_coords_csv(projection: Projection2D, path: str | Path) -> None:
    lines = ["key,x,y"]
    for i in range(projection.coords.shape[0]):
        key = projection.keys[i] if projection.keys else str(i)
        lines.append(f"{key},{projection.coords[i, 0]:.9g},{projection.coords[i, 1]:.9g}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
