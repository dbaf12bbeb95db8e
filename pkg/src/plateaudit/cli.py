"""Command-line workflow: simulate -> featurize -> focus-map / project ->
audit -> report.

Exit codes: 0 clean, 1 a bias verdict fired (CI-gate friendly), 2 usage or
input error. Identical inputs and seeds produce byte-identical outputs, and
results do not depend on --threads.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import audit as audit_mod
from . import features as features_mod
from . import imaging, learn, project, simulate
from .core import WellAddress
from .errors import PlateAuditError
from .storage import load_manifest, read_image

EXIT_OK = 0
EXIT_BIAS = 1
EXIT_ERROR = 2


def _emit_config(args: argparse.Namespace) -> None:
    if getattr(args, "emit_config", False):
        effective = {
            k: v for k, v in sorted(vars(args).items())
            if k not in ("func", "emit_config")
        }
        print(json.dumps(effective, sort_keys=True, default=str))


def cmd_simulate(args) -> int:
    config = simulate.SimConfig.from_json(args.config)
    if args.seed is not None:
        config = simulate.with_seed(config, args.seed)
    config.validate()
    _emit_config(args)
    manifest, _truth = simulate.generate_experiment(config, args.out)
    print(f"simulated {len(manifest.sites)} sites -> {args.out}")
    return EXIT_OK


def cmd_featurize(args) -> int:
    manifest = load_manifest(args.manifest)
    _emit_config(args)
    table = features_mod.featurize_manifest(
        manifest, Path(args.manifest).parent, unit=args.unit, channel=args.channel,
        min_area=args.min_area, patch_size=args.patch_size, threads=args.threads,
    )
    features_mod.write_features_csv(table, args.out)
    print(f"featurized {table.n_rows} rows ({args.unit} unit) -> {args.out}")
    return EXIT_OK


def _train_focus_from_manifest(manifest_path: str, levels, train_sites: int,
                               seed: int) -> imaging.FocusModel:
    manifest = load_manifest(manifest_path)
    root = Path(manifest_path).parent
    patches = []
    for entry in manifest.sites[:train_sites]:
        image = read_image(root / entry.image_path)
        detections = imaging.segment_nuclei(image)
        size = min(48, image.height - image.height % 2, image.width - image.width % 2)
        patches.extend(p.data for p in imaging.crop_patches(image, detections, size=size))
    return imaging.train_focus_model(patches, levels, seed=seed)


def cmd_focus_map(args) -> int:
    if not args.model and not args.train_from:
        print("focus-map: either --model or --train-from is required", file=sys.stderr)
        return EXIT_ERROR
    _emit_config(args)
    levels = [float(v) for v in args.blur_levels.split(",")]
    if args.model and Path(args.model).exists() and not args.train_from:
        fm = imaging.FocusModel.load(args.model)
    else:
        fm = _train_focus_from_manifest(args.train_from, levels, args.train_sites, args.seed)
        if args.model:
            fm.save(args.model)
    if args.save_model:
        fm.save(args.save_model)

    manifest = load_manifest(args.manifest)
    root = Path(args.manifest).parent
    per_plate: dict[tuple[str, str], dict] = {}
    for entry in manifest.sites:
        image = read_image(root / entry.image_path)
        score = imaging.focus_score(fm, image)
        per_plate.setdefault((entry.key.batch, entry.key.plate), {})[
            (entry.key.row, entry.key.col, entry.key.site_index)
        ] = score

    out = Path(args.out)
    sites_per_well = max(k[2] for values in per_plate.values() for k in values) + 1
    center_wells = [(3, 5), (3, 6), (4, 5), (4, 6)]
    corner_wells = [(0, 0), (0, 11), (7, 0), (7, 11)]
    for (batch, plate), values in sorted(per_plate.items()):
        svg = imaging.plate_heatmap(values, sites_per_well, title=f"{batch} {plate} focus")
        path = out.with_name(f"{out.stem}_{batch}_{plate}{out.suffix or '.svg'}")
        path.write_text(svg, encoding="utf-8")
        well_means: dict[tuple[int, int], float] = {}
        for (r, c, _s), v in values.items():
            well_means.setdefault((r, c), []).append(v)  # type: ignore[arg-type]
        well_means = {k: float(np.mean(v)) for k, v in well_means.items()}
        center = float(np.mean([well_means[w] for w in center_wells if w in well_means]))
        corner = float(np.mean([well_means[w] for w in corner_wells if w in well_means]))
        spread = max(well_means.values()) - min(well_means.values())
        print(
            f"{batch} {plate}: center_mean={center:.4f} corner_mean={corner:.4f} "
            f"delta={center - corner:.4f} well_range={spread:.4f} -> {path}"
        )
    return EXIT_OK


def cmd_project(args) -> int:
    table = features_mod.read_features_csv(args.features)
    _emit_config(args)
    if args.color_by not in table.metadata:
        print(f"project: unknown --color-by column {args.color_by!r}", file=sys.stderr)
        return EXIT_ERROR
    X = table.X
    if args.method == "tsne":
        k = min(args.pca_dims, min(X.shape))
        if X.shape[1] > k:
            X = project.pca(X, k).projected
        proj = project.tsne(X, perplexity=args.perplexity, iterations=args.iterations,
                            seed=args.seed, keys=table.keys)
    else:
        res = project.pca(X, 2)
        proj = project.Projection2D(
            coords=res.projected, keys=table.keys, perplexity=0.0, iterations=0,
            seed=args.seed, kl_initial=0.0, kl_post_exaggeration=0.0, kl_final=0.0,
            n_uncalibrated=0,
        )
    project.write_coords_csv(proj, args.out)
    keys = proj.keys if proj.kept_indices is None else proj.keys
    row_of = {k: i for i, k in enumerate(table.keys)}
    aligned = [row_of[k] for k in keys]
    svg_path = Path(args.out).with_suffix(".svg")
    labels = [table.metadata[args.color_by][i] for i in aligned]
    svg_path.write_text(
        project.scatter_svg(proj, labels, color_by=args.color_by,
                            title=f"{args.method} colored by {args.color_by}"),
        encoding="utf-8",
    )
    print(f"final_kl={proj.kl_final:.6f}")
    for col in ("batch", "plate", "condition", "lab_source"):
        vals = [table.metadata[col][i] for i in aligned]
        if len(set(vals)) < 2 or len(vals) <= 15:
            continue
        purity = project.neighbor_purity(proj.coords, vals, k=15)
        print(f"purity_{col}={purity:.4f}")
    print(f"wrote {args.out} and {svg_path}")
    return EXIT_OK


def _load_pairs(path: str) -> list[dict]:
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(raw, list) or not all(
        isinstance(p, dict) and set(p) == {"healthy", "disease"} for p in raw
    ):
        raise PlateAuditError(
            f"{path}: pairs file must be a list of {{'healthy': id, 'disease': id}}"
        )
    return raw


def cmd_audit(args) -> int:
    table = features_mod.read_features_csv(args.features)
    _emit_config(args)
    report = audit_mod.AuditReport(seed=args.seed)

    if args.kind == "nuisance":
        report.nuisance = audit_mod.nuisance_audit(
            table, repeats=args.repeats, l2=args.l2, seed=args.seed,
            margin=args.margin, threads=args.threads,
        )
    else:
        if args.folds == "pair":
            if not args.pairs:
                print("audit: --pairs is required with --folds pair", file=sys.stderr)
                return EXIT_ERROR
            folds = learn.make_folds_leave_pair_out(table, _load_pairs(args.pairs))
        else:
            folds = learn.make_folds_leave_batch_out(table)
        if args.kind == "disease":
            report.disease[args.family] = audit_mod.disease_audit(
                table, folds, model_family=args.family, l2=args.l2
            )
        else:
            check = audit_mod.density_confound_check(table, folds, l2=args.l2)
            report.density_confound = check
            if check.pdp:
                curve = learn.PDPCurve(
                    feature_index=features_mod.CELL_COUNT_FEATURE,
                    feature_name="cell_count",
                    grid=np.array(check.pdp["grid"]),
                    mean_probability=np.array(check.pdp["probability"]),
                    target_class="disease",
                )
                pdp_path = Path(args.out).with_name(Path(args.out).stem + "_pdp.csv")
                curve.write_csv(pdp_path)

    Path(args.out).write_text(audit_mod.render_report(report, "json"), encoding="utf-8")
    verdicts = report.verdicts()
    print(f"wrote {args.out}; any_bias={'yes' if verdicts['any_bias'] else 'no'}")
    return EXIT_BIAS if verdicts["any_bias"] else EXIT_OK


def cmd_report(args) -> int:
    try:
        doc = json.loads(Path(args.infile).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        print(f"report: malformed JSON: {exc}", file=sys.stderr)
        return EXIT_ERROR
    md = audit_mod.render_report(doc, "markdown")
    Path(args.out).write_text(md, encoding="utf-8")
    print(f"wrote {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="plateaudit",
        description="Simulate plate-microscopy experiments with injected "
                    "confounders and audit feature tables for nuisance signal.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--emit-config", action="store_true",
                       help="print effective settings as JSON before running")

    p = sub.add_parser("simulate", help="generate a synthetic experiment")
    p.add_argument("--config", required=True, help="SimConfig JSON file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None,
                   help="override the config root_seed (default: use config value)")
    common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("featurize", help="segment and extract the 63-feature table")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="output features.csv")
    p.add_argument("--unit", choices=("site", "patch"), default="site")
    p.add_argument("--channel", type=int, default=0, help="nucleus channel (default 0)")
    p.add_argument("--min-area", type=int, default=5, dest="min_area")
    p.add_argument("--patch-size", type=int, default=48, dest="patch_size")
    p.add_argument("--threads", type=int, default=1)
    common(p)
    p.set_defaults(func=cmd_featurize)

    p = sub.add_parser("focus-map", help="score focus quality and render plate heatmaps")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="SVG path; plate ids are appended")
    p.add_argument("--model", default=None, help="focus model JSON to load (or save "
                   "when training)")
    p.add_argument("--train-from", default=None, dest="train_from",
                   help="manifest of in-focus images to train on")
    p.add_argument("--save-model", default=None, dest="save_model")
    p.add_argument("--blur-levels", default="0,0.5,1,2,4", dest="blur_levels")
    p.add_argument("--train-sites", type=int, default=24, dest="train_sites")
    p.add_argument("--seed", type=int, default=0)
    common(p)
    p.set_defaults(func=cmd_focus_map)

    p = sub.add_parser("project", help="PCA/t-SNE projection with scatter SVG")
    p.add_argument("--features", required=True)
    p.add_argument("--method", choices=("tsne", "pca"), default="tsne")
    p.add_argument("--perplexity", type=float, default=30.0)
    p.add_argument("--iterations", type=int, default=1000)
    p.add_argument("--pca-dims", type=int, default=30, dest="pca_dims",
                   help="PCA preconditioning width before t-SNE")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--color-by", default="batch", dest="color_by")
    p.add_argument("--out", required=True, help="coords CSV path")
    common(p)
    p.set_defaults(func=cmd_project)

    p = sub.add_parser("audit", help="run a bias audit; exit 1 when a verdict fires")
    p.add_argument("kind", choices=("nuisance", "disease", "density"))
    p.add_argument("--features", required=True)
    p.add_argument("--folds", choices=("pair", "batch"), default="batch")
    p.add_argument("--pairs", default=None, help="pairs.json for --folds pair")
    p.add_argument("--family", choices=audit_mod.MODEL_FAMILIES, default="full")
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--lambda", type=float, default=1e-2, dest="l2")
    p.add_argument("--margin", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", required=True, help="report JSON path")
    common(p)
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("report", help="render a report JSON as Markdown")
    p.add_argument("--in", required=True, dest="infile")
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_ERROR if exc.code else EXIT_OK
    try:
        return args.func(args)
    except PlateAuditError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_ERROR


def entry() -> None:
    sys.exit(main())
