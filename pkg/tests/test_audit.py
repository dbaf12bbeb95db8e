import json

import numpy as np
import pytest

from plateaudit import audit, features, learn, simulate
from plateaudit.audit import (
    AuditReport,
    density_confound_check,
    disease_audit,
    nuisance_audit,
    render_report,
    validate_report_dict,
)
from plateaudit.errors import AuditError, FormatError
from plateaudit.simulate import AffineShift, SimConfig

from conftest import PAIRS_8, build_bundle


# -------------------------------------------------------------- nuisance


def test_batchshift_flags_batch(sim_batchshift):
    res = nuisance_audit(sim_batchshift.table, repeats=5, seed=7)
    batch = res.factors["batch"]
    assert batch.n_classes == 2
    assert batch.real_accuracy >= 0.8
    assert abs(batch.baseline_mean - 0.5) <= 0.1
    assert batch.biased
    assert "batch" in res.biased_factors


def test_null_simulation_all_unbiased(sim_null):
    res = nuisance_audit(sim_null.table, repeats=5, seed=1)
    assert res.biased_factors == []
    for factor, r in res.factors.items():
        assert abs(r.real_accuracy - r.chance) <= 0.1, (factor, r.real_accuracy)


def test_plate_baseline_near_chance(sim_null):
    res = nuisance_audit(sim_null.table, factors=("plate",), repeats=5, seed=3)
    plate = res.factors["plate"]
    assert plate.n_classes == 4
    assert plate.chance == 0.25
    assert abs(plate.baseline_mean - 0.25) <= 0.1


def test_constant_factor_skipped(sim_density):
    res = nuisance_audit(sim_density.table, factors=("batch", "plate"), repeats=3, seed=1)
    assert res.factors["batch"].note.startswith("skipped")
    assert not res.factors["batch"].biased
    assert res.factors["plate"].real_accuracy is not None


def test_no_controls_rejected(sim_null):
    table = sim_null.table
    rows = [i for i, c in enumerate(table.metadata["is_control"]) if not c]
    with pytest.raises(AuditError, match="control"):
        nuisance_audit(table.subset(rows), repeats=3)


def test_too_few_samples_rejected(sim_null):
    table = sim_null.table
    controls = [i for i, c in enumerate(table.metadata["is_control"]) if c]
    with pytest.raises(AuditError, match="fewer than 10"):
        nuisance_audit(table.subset(controls[:40]), factors=("column",), repeats=3)


def test_repeats_minimum_enforced(sim_null):
    with pytest.raises(AuditError):
        nuisance_audit(sim_null.table, repeats=2)


def test_permuted_baseline_converges_to_chance(sim_null):
    res = nuisance_audit(sim_null.table, repeats=20, seed=11)
    for factor, r in res.factors.items():
        bound = 2.0 * r.baseline_sd / np.sqrt(20) + 0.05
        assert abs(r.baseline_mean - r.chance) <= bound, factor


def test_threads_do_not_change_results(sim_batchshift):
    a = nuisance_audit(sim_batchshift.table, repeats=4, seed=5, threads=1)
    b = nuisance_audit(sim_batchshift.table, repeats=4, seed=5, threads=8)
    assert a.to_dict() == b.to_dict()


@pytest.mark.slow
def test_monotone_power_single_crossing(tmp_path):
    verdicts = []
    for i, std in enumerate((0.0, 0.01, 0.05, 0.2, 0.5)):
        cfg = SimConfig(
            batches=2, plates_per_batch=1, sites_per_well=2,
            image_height=32, image_width=32,
            control_wells_per_plate=24, experimental_wells_per_plate=4,
            batch_shift=AffineShift(gain_std=std, offset_std=std),
            root_seed=900 + i,
        )
        bundle = build_bundle(cfg, tmp_path / f"power{i}")
        res = nuisance_audit(bundle.table, factors=("batch",), repeats=5, seed=2)
        verdicts.append(res.factors["batch"].biased)
    assert verdicts[0] is False
    assert verdicts[-1] is True
    first_biased = verdicts.index(True)
    assert all(verdicts[first_biased:])
    assert not any(verdicts[:first_biased])


# -------------------------------------------------------------- disease


def test_phenotype_gives_high_auc_no_flags(sim_phenotype):
    folds = learn.make_folds_leave_pair_out(sim_phenotype.table, PAIRS_8)
    res = disease_audit(sim_phenotype.table, folds, "full")
    assert res.median_auc >= 0.8
    assert not res.covariate_coincidence
    assert all(o.error == "" for o in res.folds)


def test_null_disease_aucs_near_half(sim_null):
    pairs = [{"healthy": "H1", "disease": "D1"}, {"healthy": "H2", "disease": "D2"}]
    folds = learn.make_folds_leave_pair_out(sim_null.table, pairs)
    res = disease_audit(sim_null.table, folds, "full")
    for o in res.folds:
        assert 0.35 <= o.auc <= 0.65, o
    assert abs(res.median_auc - 0.5) <= 0.15


def test_labsource_anomaly_flagged(sim_labsource):
    folds = learn.make_folds_leave_pair_out(sim_labsource.table, PAIRS_8)
    same = [f.annotations["same_source"] for f in folds]
    assert same == [False, False, False, True]
    res = disease_audit(sim_labsource.table, folds, "full")
    assert res.worst_fold == "pair:H4|D4"
    assert res.min_auc < 0.5
    assert res.median_auc - res.min_auc >= 0.15
    assert res.covariate_coincidence


def test_fold_order_does_not_matter(sim_phenotype):
    folds = learn.make_folds_leave_pair_out(sim_phenotype.table, PAIRS_8)
    a = disease_audit(sim_phenotype.table, folds, "full")
    b = disease_audit(sim_phenotype.table, list(reversed(folds)), "full")
    aucs_a = {o.fold_id: o.auc for o in a.folds}
    aucs_b = {o.fold_id: o.auc for o in b.folds}
    assert aucs_a == aucs_b
    assert a.median_auc == b.median_auc


def test_single_class_fold_recorded_as_error(sim_phenotype):
    table = sim_phenotype.table
    folds = learn.make_folds_leave_pair_out(table, PAIRS_8)
    # corrupt one fold: train only on healthy rows
    cond = table.metadata["condition"]
    key_ix = {k: i for i, k in enumerate(table.keys)}
    healthy_train = tuple(k for k in folds[0].train_keys
                          if cond[key_ix[k]] == "healthy")
    bad = learn.FoldSpec(fold_id="bad", train_keys=healthy_train,
                         test_keys=folds[0].test_keys, scheme="leave-pair-out",
                         annotations={})
    res = disease_audit(table, [bad], "full")
    assert res.folds[0].auc is None
    assert "single condition" in res.folds[0].error
    assert res.median_auc is None


# -------------------------------------------------------------- density


def test_density_confound_flagged(sim_density):
    folds = learn.make_folds_leave_pair_out(sim_density.table, PAIRS_8)
    check = density_confound_check(sim_density.table, folds)
    assert check.full.median_auc >= 0.75
    assert check.density_only.median_auc >= 0.75
    assert check.density_only.median_auc >= check.full.median_auc - 0.05
    assert check.confound_flag
    assert check.pdp["direction"] == "increasing"
    assert check.pdp["prob_range"] >= 0.3


def test_phenotype_only_density_flag_unset(sim_phenotype):
    folds = learn.make_folds_leave_pair_out(sim_phenotype.table, PAIRS_8)
    check = density_confound_check(sim_phenotype.table, folds)
    assert not check.confound_flag
    assert 0.35 <= check.density_only.median_auc <= 0.65
    assert check.full.median_auc > 0.75


def test_no_signal_density_flag_unset(sim_null):
    pairs = [{"healthy": "H1", "disease": "D1"}, {"healthy": "H2", "disease": "D2"}]
    folds = learn.make_folds_leave_pair_out(sim_null.table, pairs)
    check = density_confound_check(sim_null.table, folds)
    assert not check.confound_flag  # full median <= 0.6 gate


# -------------------------------------------------------------- report


def test_empty_report_valid_and_idempotent():
    report = AuditReport()
    doc = report.to_dict()
    validate_report_dict(doc)
    a = render_report(report, "json")
    b = render_report(report, "json")
    assert a == b
    md = render_report(report, "markdown")
    assert md.startswith("# Audit report")


def test_report_schema_violation_rejected():
    with pytest.raises(FormatError):
        validate_report_dict({"schema_version": 99})
    with pytest.raises(FormatError):
        render_report({"schema_version": 1, "kind": "audit_report"}, "json")


def test_markdown_references_every_svg(sim_batchshift):
    report = AuditReport(
        nuisance=nuisance_audit(sim_batchshift.table, repeats=3, seed=1),
        svgs=["plots/a.svg", "plots/b.svg"],
    )
    doc = report.to_dict()
    md = render_report(doc, "markdown")
    for svg in doc["svgs"]:
        assert svg in md


def test_full_report_roundtrips_through_json(sim_density):
    folds = learn.make_folds_leave_pair_out(sim_density.table, PAIRS_8)
    report = AuditReport(
        config_digest=sim_density.config.digest(),
        seed=3,
        density_confound=density_confound_check(sim_density.table, folds),
    )
    blob = render_report(report, "json")
    doc = json.loads(blob)
    validate_report_dict(doc)
    assert doc["verdicts"]["density_confound"] is True
    md = render_report(doc, "markdown")
    assert "Density confound check" in md
    assert render_report(doc, "json") == blob
