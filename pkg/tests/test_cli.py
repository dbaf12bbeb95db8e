import hashlib
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from plateaudit import features
from plateaudit.cli import main
from plateaudit.storage import load_manifest

from conftest import LABSOURCE_CONFIG, NULL_CONFIG, PAIRS_8


def write_config(tmp_path, config, **overrides) -> Path:
    doc = config.to_dict()
    doc.update(overrides)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(doc))
    return path


@pytest.fixture(scope="module")
def cli_sim(tmp_path_factory):
    """One small simulated experiment + features.csv shared by CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    cfg = write_config(
        root, NULL_CONFIG,
        batches=2, plates_per_batch=1, sites_per_well=3,
        image_height=32, image_width=32,
        control_wells_per_plate=24, experimental_wells_per_plate=8,
        root_seed=8101,
    )
    out = root / "sim"
    assert main(["simulate", "--config", str(cfg), "--out", str(out)]) == 0
    feats = root / "features.csv"
    assert main(["featurize", "--manifest", str(out / "manifest.jsonl"),
                 "--out", str(feats)]) == 0
    return root, out, feats


def test_simulate_writes_outputs(cli_sim):
    _root, out, _feats = cli_sim
    assert (out / "manifest.jsonl").exists()
    assert (out / "groundtruth.json").exists()
    manifest = load_manifest(out / "manifest.jsonl")
    assert len(manifest.sites) == (24 + 8) * 2 * 3
    assert (out / manifest.sites[0].image_path).exists()


def test_simulate_missing_config_exits_2(tmp_path):
    assert main(["simulate", "--config", str(tmp_path / "nope.json"),
                 "--out", str(tmp_path / "o")]) == 2


def test_simulate_bad_config_exits_2(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"batches": 0}))
    assert main(["simulate", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2


def test_simulate_rerun_identical_digests(tmp_path):
    cfg = write_config(tmp_path, NULL_CONFIG, batches=1, plates_per_batch=1,
                       sites_per_well=1, image_height=32, image_width=32,
                       control_wells_per_plate=0, experimental_wells_per_plate=4)

    def run(out):
        assert main(["simulate", "--config", str(cfg), "--out", str(out),
                     "--seed", "5"]) == 0
        h = hashlib.sha256()
        for p in sorted(Path(out).rglob("*")):
            if p.is_file():
                h.update(p.name.encode())
                h.update(p.read_bytes())
        return h.hexdigest()

    assert run(tmp_path / "r1") == run(tmp_path / "r2")


def test_featurize_row_count_and_units(cli_sim, tmp_path):
    root, out, feats = cli_sim
    table = features.read_features_csv(feats)
    assert table.n_rows == (24 + 8) * 2 * 3
    patch_csv = tmp_path / "patches.csv"
    assert main(["featurize", "--manifest", str(out / "manifest.jsonl"),
                 "--out", str(patch_csv), "--unit", "patch",
                 "--patch-size", "16"]) == 0
    patches = features.read_features_csv(patch_csv)
    # patch unit: one row per detection = sum of site cell-count features
    assert patches.n_rows == int(table.X[:, features.CELL_COUNT_FEATURE].sum())
    assert (patches.X[:, features.CELL_COUNT_FEATURE] == 1.0).all()


def test_featurize_corrupt_image_exits_2(cli_sim, tmp_path):
    root, out, _ = cli_sim
    manifest = load_manifest(out / "manifest.jsonl")
    victim = out / manifest.sites[0].image_path
    blob = victim.read_bytes()
    try:
        victim.write_bytes(blob[:40])
        code = main(["featurize", "--manifest", str(out / "manifest.jsonl"),
                     "--out", str(tmp_path / "x.csv")])
        assert code == 2
    finally:
        victim.write_bytes(blob)


def test_featurize_threads_identical(cli_sim, tmp_path):
    _root, out, feats = cli_sim
    alt = tmp_path / "threads8.csv"
    assert main(["featurize", "--manifest", str(out / "manifest.jsonl"),
                 "--out", str(alt), "--threads", "8"]) == 0
    assert alt.read_bytes() == feats.read_bytes()


def test_project_and_coords_deterministic(cli_sim, tmp_path, capsys):
    _root, _out, feats = cli_sim
    c1, c2 = tmp_path / "c1.csv", tmp_path / "c2.csv"
    args = ["project", "--features", str(feats), "--method", "tsne",
            "--perplexity", "12", "--iterations", "260", "--seed", "3",
            "--color-by", "batch"]
    assert main(args + ["--out", str(c1)]) == 0
    printed = capsys.readouterr().out
    assert "final_kl=" in printed and "purity_batch=" in printed
    assert main(args + ["--out", str(c2)]) == 0
    assert c1.read_bytes() == c2.read_bytes()
    assert c1.with_suffix(".svg").exists()


def test_project_perplexity_out_of_range_exits_2(cli_sim, tmp_path):
    _root, _out, feats = cli_sim
    code = main(["project", "--features", str(feats), "--perplexity", "10000",
                 "--out", str(tmp_path / "c.csv")])
    assert code == 2


def test_project_unknown_column_exits_2(cli_sim, tmp_path):
    _root, _out, feats = cli_sim
    code = main(["project", "--features", str(feats), "--color-by", "nope",
                 "--out", str(tmp_path / "c.csv")])
    assert code == 2


def test_audit_nuisance_null_exit_0(cli_sim, tmp_path):
    _root, _out, feats = cli_sim
    report = tmp_path / "report.json"
    assert main(["audit", "nuisance", "--features", str(feats),
                 "--out", str(report), "--seed", "1"]) == 0
    doc = json.loads(report.read_text())
    assert doc["verdicts"]["any_bias"] is False


def test_audit_missing_pairs_exits_2(cli_sim, tmp_path):
    _root, _out, feats = cli_sim
    assert main(["audit", "disease", "--features", str(feats), "--folds", "pair",
                 "--out", str(tmp_path / "r.json")]) == 2


def test_audit_bad_pairs_file_exits_2(cli_sim, tmp_path):
    _root, _out, feats = cli_sim
    pairs = tmp_path / "pairs.json"
    pairs.write_text(json.dumps([{"sick": "D1"}]))
    assert main(["audit", "disease", "--features", str(feats), "--folds", "pair",
                 "--pairs", str(pairs), "--out", str(tmp_path / "r.json")]) == 2


def test_audit_disease_batch_folds(cli_sim, tmp_path):
    _root, _out, feats = cli_sim
    report = tmp_path / "disease.json"
    code = main(["audit", "disease", "--features", str(feats), "--folds", "batch",
                 "--out", str(report)])
    assert code in (0, 1)
    doc = json.loads(report.read_text())
    assert set(doc["disease"]) == {"full"}
    assert len(doc["disease"]["full"]["folds"]) == 2


def test_audit_labsource_pipeline_exits_1(tmp_path):
    cfg = write_config(tmp_path, LABSOURCE_CONFIG)
    out = tmp_path / "sim"
    assert main(["simulate", "--config", str(cfg), "--out", str(out)]) == 0
    feats = tmp_path / "f.csv"
    assert main(["featurize", "--manifest", str(out / "manifest.jsonl"),
                 "--out", str(feats), "--threads", "4"]) == 0
    pairs = tmp_path / "pairs.json"
    pairs.write_text(json.dumps(PAIRS_8))
    report = tmp_path / "r.json"
    assert main(["audit", "disease", "--features", str(feats), "--folds", "pair",
                 "--pairs", str(pairs), "--out", str(report)]) == 1
    doc = json.loads(report.read_text())
    assert doc["verdicts"]["covariate_coincidence"] is True

    md = tmp_path / "r.md"
    assert main(["report", "--in", str(report), "--out", str(md)]) == 0
    first = md.read_bytes()
    assert main(["report", "--in", str(report), "--out", str(md)]) == 0
    assert md.read_bytes() == first


def test_report_schema_mismatch_exits_2(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"schema_version": 2, "kind": "audit_report"}))
    assert main(["report", "--in", str(bad), "--out", str(tmp_path / "r.md")]) == 2


def test_emit_config_prints_settings(cli_sim, tmp_path, capsys):
    _root, _out, feats = cli_sim
    main(["audit", "nuisance", "--features", str(feats),
          "--out", str(tmp_path / "r.json"), "--seed", "1", "--emit-config"])
    out = capsys.readouterr().out
    effective = json.loads(out.splitlines()[0])
    assert effective["seed"] == 1
    assert effective["repeats"] == 5


def test_usage_error_exits_2():
    assert main(["simulate"]) == 2
    assert main(["nonsense"]) == 2


def test_module_entrypoint_smoke():
    proc = subprocess.run([sys.executable, "-m", "plateaudit", "--help"],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    assert "simulate" in proc.stdout


def test_focus_map_cli(tmp_path, capsys):
    from conftest import FOCUS_CONFIG, SHARP_CONFIG
    sharp_cfg = write_config(tmp_path, SHARP_CONFIG)
    focus_dir = tmp_path / "gradient"
    sharp_dir = tmp_path / "sharp"
    assert main(["simulate", "--config", str(sharp_cfg), "--out", str(sharp_dir)]) == 0
    grad_cfg = write_config(tmp_path, FOCUS_CONFIG)
    assert main(["simulate", "--config", str(grad_cfg), "--out", str(focus_dir)]) == 0

    out_svg = tmp_path / "heat.svg"
    code = main(["focus-map", "--manifest", str(focus_dir / "manifest.jsonl"),
                 "--train-from", str(sharp_dir / "manifest.jsonl"),
                 "--save-model", str(tmp_path / "focus_model.json"),
                 "--out", str(out_svg)])
    assert code == 0
    printed = capsys.readouterr().out
    assert "delta=" in printed
    delta = float(printed.split("delta=")[1].split()[0])
    assert delta >= 0.2
    assert (tmp_path / "heat_B0_P00.svg").exists()
    assert (tmp_path / "focus_model.json").exists()

    # reuse the saved model
    code = main(["focus-map", "--manifest", str(focus_dir / "manifest.jsonl"),
                 "--model", str(tmp_path / "focus_model.json"),
                 "--out", str(tmp_path / "heat2.svg")])
    assert code == 0


def test_focus_map_requires_model_or_training(tmp_path, cli_sim):
    _root, out, _ = cli_sim
    assert main(["focus-map", "--manifest", str(out / "manifest.jsonl"),
                 "--out", str(tmp_path / "h.svg")]) == 2
