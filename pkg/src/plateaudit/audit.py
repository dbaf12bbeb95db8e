"""The three audits: nuisance-factor prediction against permuted baselines,
held-out-pair disease prediction with covariate-coincidence flagging, and the
density-confound comparison. Results serialize into a schema-versioned
report renderable as canonical JSON or Markdown.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import jsonschema
import numpy as np

from . import learn
from .core import derive_seed, derive_stream
from .errors import AuditError, FormatError, InputError
from .features import CELL_COUNT_FEATURE, FEATURE_COLUMNS, FeatureTable

REPORT_SCHEMA_VERSION = 1

NUISANCE_FACTORS = ("batch", "plate", "row", "column")
_FACTOR_COLUMN = {"batch": "batch", "plate": "plate", "row": "row", "column": "col"}

MODEL_FAMILIES = ("full", "density_only", "external")


# --------------------------------------------------------------------------
# Nuisance audit
# --------------------------------------------------------------------------


@dataclass
class FactorResult:
    factor: str
    n_classes: int
    chance: float
    real_accuracy: float | None
    baseline_accuracies: list[float]
    baseline_mean: float | None
    baseline_sd: float | None
    biased: bool
    note: str = ""

    def to_dict(self) -> dict:
        return {
            "factor": self.factor,
            "n_classes": self.n_classes,
            "chance": self.chance,
            "real_accuracy": self.real_accuracy,
            "baseline_accuracies": list(self.baseline_accuracies),
            "baseline_mean": self.baseline_mean,
            "baseline_sd": self.baseline_sd,
            "biased": self.biased,
            "note": self.note,
        }


@dataclass
class NuisanceAuditResult:
    factors: dict[str, FactorResult]
    n_sites: int
    repeats: int
    l2: float
    seed: int
    margin: float

    @property
    def biased_factors(self) -> list[str]:
        return [f for f, r in self.factors.items() if r.biased]

    def to_dict(self) -> dict:
        return {
            "factors": {f: r.to_dict() for f, r in self.factors.items()},
            "n_sites": self.n_sites,
            "repeats": self.repeats,
            "l2": self.l2,
            "seed": self.seed,
            "margin": self.margin,
            "biased_factors": self.biased_factors,
        }


def _stratified_split(labels: list[str], test_frac: float, stream) -> tuple[list[int], list[int]]:
    """Deterministic stratified split; at least one test row per class."""
    by_class: dict[str, list[int]] = {}
    for i, lab in enumerate(labels):
        by_class.setdefault(lab, []).append(i)
    train, test = [], []
    for lab in sorted(by_class):
        idx = by_class[lab]
        perm = stream.substream("class", lab).permutation(len(idx))
        n_test = max(1, int(round(test_frac * len(idx))))
        chosen = [idx[p] for p in perm]
        test.extend(chosen[:n_test])
        train.extend(chosen[n_test:])
    return sorted(train), sorted(test)


def nuisance_audit(table: FeatureTable, factors=NUISANCE_FACTORS, repeats: int = 5,
                   l2: float = 1e-2, seed: int = 0, margin: float = 0.1,
                   test_frac: float = 0.2, threads: int = 1) -> NuisanceAuditResult:
    """Predict each nuisance factor from control-well features and compare
    against the column-permuted baseline.

    Per factor: one stratified 80/20 split, a logistic model on the real
    features, and `repeats` retrainings on column-permuted features. The
    factor is flagged biased when real accuracy exceeds baseline mean +
    3*baseline sd and also exceeds chance + margin.
    """
    if repeats < 3:
        raise AuditError(f"need at least 3 permutation repeats, got {repeats}")
    control_rows = [i for i, f in enumerate(table.metadata["is_control"]) if f]
    if not control_rows:
        raise AuditError("nuisance audit requires control wells in the feature table")
    controls = table.subset(control_rows)
    results: dict[str, FactorResult] = {}
    for factor in factors:
        if factor not in _FACTOR_COLUMN:
            raise InputError(f"unknown nuisance factor {factor!r}")
        labels = [str(v) for v in controls.column(_FACTOR_COLUMN[factor])]
        classes = sorted(set(labels))
        k = len(classes)
        chance = 1.0 / k if k else 0.0
        if k < 2:
            results[factor] = FactorResult(
                factor=factor, n_classes=k, chance=chance, real_accuracy=None,
                baseline_accuracies=[], baseline_mean=None, baseline_sd=None,
                biased=False, note="skipped: factor is constant on control wells",
            )
            continue
        counts = {c: labels.count(c) for c in classes}
        too_small = {c: m for c, m in counts.items() if m < 10}
        if too_small:
            raise AuditError(
                f"factor {factor!r}: classes with fewer than 10 control sites: {too_small}"
            )
        split_stream = derive_stream(seed, ["nuisance", factor, "split"])
        train_ix, test_ix = _stratified_split(labels, test_frac, split_stream)
        y_train = [labels[i] for i in train_ix]
        y_test = [labels[i] for i in test_ix]

        def run_once(X):
            model = learn.train_logistic(X[train_ix], y_train, l2=l2)
            return learn.accuracy(learn.predict_labels(model, X[test_ix]), y_test)

        real = run_once(controls.X)

        def baseline(r):
            perm_seed = derive_seed(seed, ["nuisance", factor, "perm", r])
            return run_once(learn.permute_columns(controls.X, perm_seed))

        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                base_accs = list(pool.map(baseline, range(repeats)))
        else:
            base_accs = [baseline(r) for r in range(repeats)]
        base_mean = float(np.mean(base_accs))
        base_sd = float(np.std(base_accs, ddof=1))
        biased = real > base_mean + 3.0 * base_sd and real > chance + margin
        results[factor] = FactorResult(
            factor=factor, n_classes=k, chance=chance, real_accuracy=float(real),
            baseline_accuracies=[float(a) for a in base_accs],
            baseline_mean=base_mean, baseline_sd=base_sd, biased=bool(biased),
        )
    return NuisanceAuditResult(
        factors=results, n_sites=controls.n_rows, repeats=repeats, l2=l2,
        seed=seed, margin=margin,
    )


# --------------------------------------------------------------------------
# Disease audit
# --------------------------------------------------------------------------


@dataclass
class FoldOutcome:
    fold_id: str
    auc: float | None
    n_train: int
    n_test: int
    annotations: dict = field(default_factory=dict)
    error: str = ""

    def to_dict(self) -> dict:
        return {
            "fold_id": self.fold_id,
            "auc": self.auc,
            "n_train": self.n_train,
            "n_test": self.n_test,
            "annotations": dict(self.annotations),
            "error": self.error,
        }


@dataclass
class DiseaseAuditResult:
    family: str
    folds: list[FoldOutcome]
    median_auc: float | None
    min_auc: float | None
    worst_fold: str | None
    covariate_coincidence: bool
    l2: float

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "folds": [f.to_dict() for f in self.folds],
            "median_auc": self.median_auc,
            "min_auc": self.min_auc,
            "worst_fold": self.worst_fold,
            "covariate_coincidence": self.covariate_coincidence,
            "l2": self.l2,
        }


def _family_columns(table: FeatureTable, family: str) -> np.ndarray:
    if family == "density_only":
        if list(table.feature_names) != list(FEATURE_COLUMNS):
            raise AuditError(
                "density_only requires the canonical 63-feature table "
                "(external embeddings carry no cell-count column)"
            )
        return table.X[:, [CELL_COUNT_FEATURE]]
    return table.X


def disease_audit(table: FeatureTable, folds: list[learn.FoldSpec],
                  model_family: str = "full", l2: float = 1e-2) -> DiseaseAuditResult:
    """Per-fold AUC of condition prediction under a grouped fold scheme.

    density_only restricts the model to the cell-count feature. The
    covariate-coincidence flag fires when the worst fold is a same-source
    pair generalizing worse than random (AUC < 0.5).
    """
    if model_family not in MODEL_FAMILIES:
        raise InputError(f"model_family must be one of {MODEL_FAMILIES}")
    X_all = _family_columns(table, model_family)
    key_ix = {k: i for i, k in enumerate(table.keys)}
    cond = table.metadata["condition"]

    outcomes: list[FoldOutcome] = []
    for fold in folds:
        try:
            train_ix = [key_ix[k] for k in fold.train_keys]
            test_ix = [key_ix[k] for k in fold.test_keys]
        except KeyError as exc:
            raise InputError(f"fold {fold.fold_id}: key {exc} missing from table") from exc
        y_train = [cond[i] for i in train_ix]
        y_test = [cond[i] for i in test_ix]
        if len(set(y_train)) < 2:
            outcomes.append(FoldOutcome(
                fold_id=fold.fold_id, auc=None, n_train=len(train_ix),
                n_test=len(test_ix), annotations=dict(fold.annotations),
                error="skipped: single condition class in training data",
            ))
            continue
        if len(set(y_test)) < 2:
            outcomes.append(FoldOutcome(
                fold_id=fold.fold_id, auc=None, n_train=len(train_ix),
                n_test=len(test_ix), annotations=dict(fold.annotations),
                error="skipped: single condition class in test data",
            ))
            continue
        model = learn.train_logistic(X_all[train_ix], y_train, l2=l2)
        disease_col = model.classes.index("disease")
        scores = learn.predict_proba(model, X_all[test_ix])[:, disease_col]
        auc = learn.roc_auc(scores, [c == "disease" for c in y_test])
        outcomes.append(FoldOutcome(
            fold_id=fold.fold_id, auc=float(auc), n_train=len(train_ix),
            n_test=len(test_ix), annotations=dict(fold.annotations),
        ))

    scored = [o for o in outcomes if o.auc is not None]
    if scored:
        median = float(np.median([o.auc for o in scored]))
        worst = min(scored, key=lambda o: (o.auc, o.fold_id))
        min_auc = worst.auc
        coincidence = bool(worst.annotations.get("same_source")) and worst.auc < 0.5
        worst_id = worst.fold_id
    else:
        median = min_auc = None
        worst_id = None
        coincidence = False
    return DiseaseAuditResult(
        family=model_family, folds=outcomes, median_auc=median, min_auc=min_auc,
        worst_fold=worst_id, covariate_coincidence=coincidence, l2=l2,
    )


# --------------------------------------------------------------------------
# Density confound check
# --------------------------------------------------------------------------


@dataclass
class DensityCheckResult:
    full: DiseaseAuditResult
    density_only: DiseaseAuditResult
    fold_deltas: dict[str, float | None]
    confound_flag: bool
    pdp: dict | None

    def to_dict(self) -> dict:
        return {
            "full": self.full.to_dict(),
            "density_only": self.density_only.to_dict(),
            "fold_deltas": dict(self.fold_deltas),
            "confound_flag": self.confound_flag,
            "pdp": self.pdp,
        }


def _pdp_summary(table: FeatureTable, l2: float) -> dict | None:
    """Diagnostic PDP: sweep cell count through the density-only model fit on
    all experimental rows. (Sweeping it through the full model is misleading:
    correlated features absorb the density signal and can flip the raw
    count coefficient's sign.)"""
    rows = [i for i, f in enumerate(table.metadata["is_control"]) if not f]
    if not rows:
        return None
    sub = table.subset(rows)
    labels = list(sub.metadata["condition"])
    if len(set(labels)) < 2:
        return None
    X_count = _family_columns(sub, "density_only")
    model = learn.train_logistic(X_count, labels, l2=l2)
    curve = learn.partial_dependence(
        model, X_count, 0, grid_size=20, target_class="disease",
        feature_name="cell_count",
    )
    probs = curve.mean_probability
    slope = float(np.polyfit(curve.grid, probs, 1)[0]) if curve.grid.size > 1 else 0.0
    return {
        "feature": FEATURE_COLUMNS[CELL_COUNT_FEATURE],
        "feature_name": "cell_count",
        "target_class": "disease",
        "grid": [float(v) for v in curve.grid],
        "probability": [float(p) for p in probs],
        "prob_range": float(probs.max() - probs.min()),
        "direction": "increasing" if slope > 0 else "decreasing",
    }


def density_confound_check(table: FeatureTable, folds: list[learn.FoldSpec],
                           l2: float = 1e-2) -> DensityCheckResult:
    """Compare full-feature and density-only disease models fold by fold.

    The confound flag fires when the density-only median AUC comes within
    0.05 of the full median and the full median itself exceeds 0.6.
    """
    full = disease_audit(table, folds, "full", l2=l2)
    dens = disease_audit(table, folds, "density_only", l2=l2)
    deltas: dict[str, float | None] = {}
    dens_by_id = {o.fold_id: o for o in dens.folds}
    for o in full.folds:
        d = dens_by_id.get(o.fold_id)
        if o.auc is not None and d is not None and d.auc is not None:
            deltas[o.fold_id] = float(o.auc - d.auc)
        else:
            deltas[o.fold_id] = None
    flag = (
        full.median_auc is not None
        and dens.median_auc is not None
        and dens.median_auc >= full.median_auc - 0.05
        and full.median_auc > 0.6
    )
    return DensityCheckResult(
        full=full, density_only=dens, fold_deltas=deltas, confound_flag=bool(flag),
        pdp=_pdp_summary(table, l2),
    )


# --------------------------------------------------------------------------
# Report
# --------------------------------------------------------------------------

REPORT_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["schema_version", "kind", "config_digest", "seed", "verdicts",
                 "narrative", "svgs"],
    "properties": {
        "schema_version": {"const": REPORT_SCHEMA_VERSION},
        "kind": {"const": "audit_report"},
        "config_digest": {"type": "string"},
        "seed": {"type": "integer"},
        "nuisance": {"type": ["object", "null"]},
        "disease": {"type": ["object", "null"]},
        "density_confound": {"type": ["object", "null"]},
        "pdp": {"type": "array"},
        "svgs": {"type": "array", "items": {"type": "string"}},
        "verdicts": {
            "type": "object",
            "additionalProperties": False,
            "required": ["biased_factors", "covariate_coincidence", "density_confound",
                         "any_bias"],
            "properties": {
                "biased_factors": {"type": "array", "items": {"type": "string"}},
                "covariate_coincidence": {"type": "boolean"},
                "density_confound": {"type": "boolean"},
                "any_bias": {"type": "boolean"},
            },
        },
        "narrative": {"type": "string"},
    },
}


@dataclass
class AuditReport:
    config_digest: str = ""
    seed: int = 0
    nuisance: NuisanceAuditResult | None = None
    disease: dict[str, DiseaseAuditResult] = field(default_factory=dict)
    density_confound: DensityCheckResult | None = None
    pdp: list[dict] = field(default_factory=list)
    svgs: list[str] = field(default_factory=list)

    def verdicts(self) -> dict:
        biased = self.nuisance.biased_factors if self.nuisance else []
        coincidence = any(r.covariate_coincidence for r in self.disease.values())
        if self.density_confound:
            coincidence = (
                coincidence
                or self.density_confound.full.covariate_coincidence
                or self.density_confound.density_only.covariate_coincidence
            )
        density = bool(self.density_confound and self.density_confound.confound_flag)
        return {
            "biased_factors": list(biased),
            "covariate_coincidence": bool(coincidence),
            "density_confound": density,
            "any_bias": bool(biased or coincidence or density),
        }

    def narrative(self) -> str:
        v = self.verdicts()
        parts = []
        if v["biased_factors"]:
            parts.append(
                "Nuisance factors predicted above the permuted baseline: "
                + ", ".join(v["biased_factors"]) + "."
            )
        elif self.nuisance:
            parts.append("No nuisance factor exceeded its permuted baseline.")
        if v["covariate_coincidence"]:
            parts.append(
                "The worst disease fold is a same-source pair with below-chance "
                "AUC; condition signal may ride on the lab source."
            )
        if v["density_confound"]:
            parts.append(
                "A density-only model matches the full feature set; cell density "
                "is a plausible confounder."
            )
        if not parts:
            parts.append("No bias detected by the requested audits.")
        return " ".join(parts)

    def to_dict(self) -> dict:
        return {
            "schema_version": REPORT_SCHEMA_VERSION,
            "kind": "audit_report",
            "config_digest": self.config_digest,
            "seed": self.seed,
            "nuisance": self.nuisance.to_dict() if self.nuisance else None,
            "disease": {f: r.to_dict() for f, r in self.disease.items()} or None,
            "density_confound": (
                self.density_confound.to_dict() if self.density_confound else None
            ),
            "pdp": list(self.pdp),
            "svgs": list(self.svgs),
            "verdicts": self.verdicts(),
            "narrative": self.narrative(),
        }


def validate_report_dict(doc: dict) -> None:
    try:
        jsonschema.validate(doc, REPORT_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise FormatError(f"report does not match schema: {exc.message}") from exc


def render_report(report: AuditReport | dict, fmt: str = "json") -> str:
    """Serialize a report deterministically as canonical JSON or Markdown."""
    doc = report.to_dict() if isinstance(report, AuditReport) else dict(report)
    validate_report_dict(doc)
    if fmt == "json":
        return json.dumps(doc, sort_keys=True, indent=2) + "\n"
    if fmt != "markdown":
        raise InputError(f"unknown report format {fmt!r}")
    return _render_markdown(doc)


def _fmt(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, bool):
        return "yes" if v else "no"
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def _render_markdown(doc: dict) -> str:
    lines = ["# Audit report", ""]
    lines.append(f"- config digest: `{doc['config_digest'] or 'n/a'}`")
    lines.append(f"- seed: {doc['seed']}")
    v = doc["verdicts"]
    lines.append(f"- bias detected: **{_fmt(v['any_bias'])}**")
    lines.append("")
    lines.append(f"> {doc['narrative']}")
    lines.append("")
    if doc.get("nuisance"):
        nu = doc["nuisance"]
        lines.append("## Nuisance factor prediction (control wells)")
        lines.append("")
        lines.append(f"{nu['n_sites']} control sites, {nu['repeats']} permutation repeats, "
                     f"margin {_fmt(nu['margin'])}.")
        lines.append("")
        lines.append("| factor | classes | chance | real acc | baseline mean | baseline sd | biased |")
        lines.append("|---|---|---|---|---|---|---|")
        for name, fr in nu["factors"].items():
            lines.append(
                f"| {name} | {fr['n_classes']} | {_fmt(fr['chance'])} | "
                f"{_fmt(fr['real_accuracy'])} | {_fmt(fr['baseline_mean'])} | "
                f"{_fmt(fr['baseline_sd'])} | {_fmt(fr['biased'])} |"
            )
        lines.append("")
    disease = doc.get("disease") or {}
    for family, res in disease.items():
        lines.append(f"## Disease prediction ({family})")
        lines.append("")
        lines.append(
            f"median AUC {_fmt(res['median_auc'])}, worst fold "
            f"`{res['worst_fold']}` at {_fmt(res['min_auc'])}, "
            f"covariate coincidence: {_fmt(res['covariate_coincidence'])}."
        )
        lines.append("")
        lines.append("| fold | AUC | n train | n test | same source | note |")
        lines.append("|---|---|---|---|---|---|")
        for fo in res["folds"]:
            same = fo["annotations"].get("same_source")
            lines.append(
                f"| {fo['fold_id']} | {_fmt(fo['auc'])} | {fo['n_train']} | "
                f"{fo['n_test']} | {_fmt(same) if same is not None else '-'} | "
                f"{fo['error'] or '-'} |"
            )
        lines.append("")
    if doc.get("density_confound"):
        dc = doc["density_confound"]
        lines.append("## Density confound check")
        lines.append("")
        lines.append(
            f"full median AUC {_fmt(dc['full']['median_auc'])} vs density-only "
            f"{_fmt(dc['density_only']['median_auc'])}; confound flag: "
            f"{_fmt(dc['confound_flag'])}."
        )
        lines.append("")
        lines.append("| fold | AUC delta (full - density) |")
        lines.append("|---|---|")
        for fold_id in sorted(dc["fold_deltas"]):
            lines.append(f"| {fold_id} | {_fmt(dc['fold_deltas'][fold_id])} |")
        lines.append("")
        if dc.get("pdp"):
            p = dc["pdp"]
            lines.append(
                f"PDP of `{p['feature']}` ({p['feature_name']}): {p['direction']} "
                f"over the grid, probability range {_fmt(p['prob_range'])}."
            )
            lines.append("")
    for p in doc.get("pdp", []):
        lines.append(
            f"PDP `{p['feature']}` ({p['feature_name']}): {p['direction']}, "
            f"range {_fmt(p['prob_range'])}."
        )
        lines.append("")
    svgs = doc.get("svgs", [])
    if svgs:
        lines.append("## Figures")
        lines.append("")
        for s in svgs:
            lines.append(f"![{s}]({s})")
        lines.append("")
    return "\n".join(lines).rstrip() + "\n"
