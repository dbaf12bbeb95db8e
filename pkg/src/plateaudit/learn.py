"""Statistical learning core.

Multinomial logistic regression fit by deterministic full-batch gradient
descent with Armijo backtracking, exact ROC AUC via average ranks, the
column-permutation baseline, grouped cross-validation fold builders, and
partial dependence curves. Everything here is pure and bit-reproducible:
there is no stochastic optimizer anywhere.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import derive_stream
from .errors import (
    ConfigError,
    DegenerateLabelsError,
    InputError,
    PairingError,
    SchemaError,
    UndefinedMetricError,
)

ARMIJO_C = 1e-4


@dataclass
class LogisticModel:
    """Multinomial logistic model with stored standardization.

    `weights` has shape (n_kept, K) over the kept (non-constant) features;
    `kept` indexes into the original feature order, whose width is
    `n_features`. Standardization parameters are stored over the original
    features and re-applied identically at prediction time.
    """

    classes: list
    weights: np.ndarray
    intercepts: np.ndarray
    l2: float
    mean: np.ndarray
    std: np.ndarray
    kept: np.ndarray
    n_features: int
    convergence: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "classes": list(self.classes),
            "weights": self.weights.tolist(),
            "intercepts": self.intercepts.tolist(),
            "l2": self.l2,
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
            "kept": self.kept.tolist(),
            "n_features": self.n_features,
            "convergence": dict(self.convergence),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LogisticModel":
        return cls(
            classes=list(d["classes"]),
            weights=np.asarray(d["weights"], dtype=np.float64).reshape(len(d["kept"]), -1),
            intercepts=np.asarray(d["intercepts"], dtype=np.float64),
            l2=float(d["l2"]),
            mean=np.asarray(d["mean"], dtype=np.float64),
            std=np.asarray(d["std"], dtype=np.float64),
            kept=np.asarray(d["kept"], dtype=np.int64),
            n_features=int(d["n_features"]),
            convergence=dict(d.get("convergence", {})),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "LogisticModel":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def loss_and_grad(X, Y, weights, intercepts, l2):
    """Mean cross-entropy + (l2/2)*||W||^2 (intercepts unpenalized), with its
    analytic gradient. X is (n, d) as used for training (already standardized
    in the fit path), Y is one-hot (n, K)."""
    n = X.shape[0]
    logits = X @ weights + intercepts
    z = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logz
    ce = -float((Y * logp).sum()) / n
    loss = ce + 0.5 * l2 * float((weights * weights).sum())
    P = np.exp(logp)
    G = (P - Y) / n
    grad_w = X.T @ G + l2 * weights
    grad_b = G.sum(axis=0)
    return loss, grad_w, grad_b


def train_logistic(X, y, l2=1e-2, max_iter=500, tol=1e-6, seed=0) -> LogisticModel:
    """Fit a multinomial logistic model deterministically.

    Features are standardized internally (zero-variance columns dropped and
    recorded); optimization is full-batch gradient descent with backtracking
    line search (Armijo c=1e-4), stopping when the gradient infinity norm
    drops below `tol` or `max_iter` is reached. The loss never increases
    across accepted steps. `seed` is kept for interface stability; the fit
    starts from zeros and uses no randomness.
    """
    del seed
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise InputError(f"X must be 2-D, got shape {X.shape}")
    if not np.isfinite(X).all():
        raise InputError("X contains non-finite values")
    y = list(y)
    n, d = X.shape
    if len(y) != n:
        raise InputError(f"X has {n} rows but y has {len(y)} labels")
    classes = sorted(set(y))
    K = len(classes)
    if K < 2:
        raise DegenerateLabelsError(f"need at least 2 classes, got {classes}")
    if n < K:
        raise InputError(f"need at least {K} samples for {K} classes, got {n}")

    mean = X.mean(axis=0)
    std = X.std(axis=0)
    kept = np.flatnonzero(std > 1e-12)
    Xs = (X[:, kept] - mean[kept]) / std[kept]

    idx = {c: i for i, c in enumerate(classes)}
    Y = np.zeros((n, K))
    Y[np.arange(n), [idx[v] for v in y]] = 1.0

    W = np.zeros((kept.size, K))
    b = np.zeros(K)
    loss, gw, gb = loss_and_grad(Xs, Y, W, b, l2)
    losses = [loss]
    step = 1.0
    converged = False
    iterations = 0
    for iterations in range(1, max_iter + 1):
        gnorm = max(np.abs(gw).max() if gw.size else 0.0, np.abs(gb).max())
        if gnorm < tol:
            converged = True
            iterations -= 1
            break
        gsq = float((gw * gw).sum() + (gb * gb).sum())
        t = step
        accepted = False
        for _ in range(60):
            W2 = W - t * gw
            b2 = b - t * gb
            new_loss, gw2, gb2 = loss_and_grad(Xs, Y, W2, b2, l2)
            if new_loss <= loss - ARMIJO_C * t * gsq:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            break
        W, b, loss, gw, gb = W2, b2, new_loss, gw2, gb2
        losses.append(loss)
        step = min(t * 2.0, 4.0)

    final_gnorm = max(np.abs(gw).max() if gw.size else 0.0, np.abs(gb).max())
    return LogisticModel(
        classes=classes,
        weights=W,
        intercepts=b,
        l2=float(l2),
        mean=mean,
        std=std,
        kept=kept,
        n_features=d,
        convergence={
            "iterations": iterations,
            "converged": bool(converged or final_gnorm < tol),
            "final_grad_norm": float(final_gnorm),
            "initial_loss": float(losses[0]),
            "final_loss": float(losses[-1]),
            "n_dropped": int(d - kept.size),
            "losses_monotone": bool(all(b <= a + 1e-15 for a, b in zip(losses, losses[1:]))),
        },
    )


def predict_proba(model: LogisticModel, X) -> np.ndarray:
    """Class probabilities; rows sum to 1 within float tolerance."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[1] != model.n_features:
        raise SchemaError(
            f"model was trained on {model.n_features} features, got {X.shape[1]}"
        )
    Xs = (X[:, model.kept] - model.mean[model.kept]) / model.std[model.kept]
    return _softmax(Xs @ model.weights + model.intercepts)


def predict_labels(model: LogisticModel, X) -> list:
    """Argmax prediction; ties break toward the lowest class index."""
    P = predict_proba(model, X)
    return [model.classes[i] for i in P.argmax(axis=1)]


def roc_auc(scores, labels) -> float:
    """Exact Mann-Whitney AUC: (wins + 0.5*ties) / (P*N), computed via
    average ranks so ties contribute exactly one half."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    if s.shape != y.shape or s.ndim != 1:
        raise InputError("scores and labels must be 1-D and the same length")
    n_pos = int(y.sum())
    n_neg = int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC undefined: only one class present")
    order = np.argsort(s, kind="mergesort")
    ranks = np.empty(len(s), dtype=np.float64)
    sorted_s = s[order]
    i = 0
    while i < len(s):
        j = i
        while j + 1 < len(s) and sorted_s[j + 1] == sorted_s[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def accuracy(predictions, labels) -> float:
    predictions = list(predictions)
    labels = list(labels)
    if len(predictions) != len(labels):
        raise InputError(f"length mismatch: {len(predictions)} vs {len(labels)}")
    if not labels:
        raise InputError("empty inputs")
    return sum(p == t for p, t in zip(predictions, labels)) / len(labels)


def permute_columns(X, seed) -> np.ndarray:
    """Independently permute each column's rows, destroying joint structure
    while preserving every marginal. Each column gets its own derived stream."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise InputError("X must be 2-D with at least 2 rows")
    out = np.empty_like(X)
    for j in range(X.shape[1]):
        perm = derive_stream(seed, ["permute", j]).permutation(X.shape[0])
        out[:, j] = X[perm, j]
    return out


# --------------------------------------------------------------------------
# Cross-validation folds
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class FoldSpec:
    fold_id: str
    train_keys: tuple[str, ...]
    test_keys: tuple[str, ...]
    scheme: str
    annotations: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.test_keys:
            raise InputError(f"fold {self.fold_id}: empty test set")
        if set(self.train_keys) & set(self.test_keys):
            raise InputError(f"fold {self.fold_id}: train and test overlap")


def _experimental_rows(table):
    return [i for i, flag in enumerate(table.metadata["is_control"]) if not flag]


def make_folds_leave_pair_out(table, pairs) -> list[FoldSpec]:
    """One fold per (healthy, disease) cell-line pair: the pair's sites are
    the test set, every other experimental line's sites the training set.
    Control rows are excluded throughout. Each fold is annotated with whether
    the pair's lab sources match."""
    rows = _experimental_rows(table)
    line_of = table.metadata["cell_line"]
    cond_of = table.metadata["condition"]
    source_of = table.metadata["lab_source"]
    line_condition: dict[str, str] = {}
    line_source: dict[str, str] = {}
    for i in rows:
        line_condition[line_of[i]] = cond_of[i]
        line_source[line_of[i]] = source_of[i]

    norm_pairs = []
    for p in pairs:
        if isinstance(p, dict):
            pair = (p["healthy"], p["disease"])
        else:
            pair = (p[0], p[1])
        norm_pairs.append(pair)

    seen: set[str] = set()
    for healthy_id, disease_id in norm_pairs:
        for lid in (healthy_id, disease_id):
            if lid not in line_condition:
                raise PairingError(f"pair references unknown cell line {lid!r}")
            if lid in seen:
                raise PairingError(f"cell line {lid!r} appears in more than one pair")
            seen.add(lid)
        if line_condition[healthy_id] != "healthy" or line_condition[disease_id] != "disease":
            raise PairingError(
                f"pair ({healthy_id}, {disease_id}) must be (healthy, disease), got "
                f"({line_condition[healthy_id]}, {line_condition[disease_id]})"
            )

    folds = []
    for healthy_id, disease_id in norm_pairs:
        pair_lines = {healthy_id, disease_id}
        test = tuple(table.keys[i] for i in rows if line_of[i] in pair_lines)
        train = tuple(table.keys[i] for i in rows if line_of[i] not in pair_lines)
        if not train:
            raise PairingError(
                f"pair ({healthy_id}, {disease_id}) leaves an empty training set"
            )
        folds.append(
            FoldSpec(
                fold_id=f"pair:{healthy_id}|{disease_id}",
                train_keys=train,
                test_keys=test,
                scheme="leave-pair-out",
                annotations={
                    "healthy": healthy_id,
                    "disease": disease_id,
                    "same_source": line_source[healthy_id] == line_source[disease_id],
                },
            )
        )
    return folds


def make_folds_leave_batch_out(table) -> list[FoldSpec]:
    """One fold per experimental batch (control rows excluded)."""
    rows = _experimental_rows(table)
    batch_of = table.metadata["batch"]
    batches = sorted({batch_of[i] for i in rows})
    if len(batches) < 2:
        raise ConfigError(f"leave-batch-out needs >= 2 batches, found {batches}")
    folds = []
    for b in batches:
        test = tuple(table.keys[i] for i in rows if batch_of[i] == b)
        train = tuple(table.keys[i] for i in rows if batch_of[i] != b)
        folds.append(
            FoldSpec(
                fold_id=f"batch:{b}",
                train_keys=train,
                test_keys=test,
                scheme="leave-batch-out",
                annotations={"batch": b},
            )
        )
    return folds


# --------------------------------------------------------------------------
# Partial dependence
# --------------------------------------------------------------------------


@dataclass
class PDPCurve:
    feature_index: int
    feature_name: str
    grid: np.ndarray
    mean_probability: np.ndarray
    target_class: object

    def __post_init__(self):
        if np.any(np.diff(self.grid) <= 0) and self.grid.size > 1:
            raise InputError("PDP grid must be strictly increasing")
        if np.any((self.mean_probability < 0) | (self.mean_probability > 1)):
            raise InputError("PDP probabilities must lie in [0, 1]")

    def write_csv(self, path: str | Path) -> None:
        lines = ["grid,probability"]
        for g, p in zip(self.grid, self.mean_probability):
            lines.append(f"{g:.9g},{p:.9g}")
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def partial_dependence(
    model: LogisticModel, X, feature, grid_size=20, target_class=None, feature_name=""
) -> PDPCurve:
    """Sweep one feature over [min, max] of its observed values and average
    the predicted probability of `target_class` over all rows. For binary
    models the default target is the second (higher-sorted) class."""
    X = np.asarray(X, dtype=np.float64)
    if not (0 <= feature < X.shape[1]):
        raise InputError(f"feature index {feature} out of range for {X.shape[1]} columns")
    if target_class is None:
        if len(model.classes) != 2:
            raise InputError("target_class is required for models with more than 2 classes")
        target_class = model.classes[1]
    if target_class not in model.classes:
        raise InputError(f"unknown target class {target_class!r}")
    tidx = model.classes.index(target_class)

    col = X[:, feature]
    lo, hi = float(col.min()), float(col.max())
    if lo == hi:
        warnings.warn(f"feature {feature} is constant; PDP collapses to one point")
        grid = np.array([lo])
    else:
        grid = np.linspace(lo, hi, grid_size)
    probs = np.empty(grid.size)
    work = X.copy()
    for i, v in enumerate(grid):
        work[:, feature] = v
        probs[i] = predict_proba(model, work)[:, tidx].mean()
    return PDPCurve(
        feature_index=int(feature),
        feature_name=feature_name or f"f{feature:03d}",
        grid=grid,
        mean_probability=probs,
        target_class=target_class,
    )
