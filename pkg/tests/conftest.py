"""Shared fixtures: session-scoped simulations reused across test modules.

Each bundle is generated once (images on disk in a session tmp dir) and
featurized once; tests treat the bundles as read-only.
"""

from dataclasses import dataclass
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

from plateaudit import features, imaging, simulate, storage
from plateaudit.core import CellLine, ExperimentManifest
from plateaudit.features import FeatureTable
from plateaudit.simulate import (
    AffineShift,
    CellModel,
    CountModel,
    DensityConfound,
    FocusGradient,
    GroundTruth,
    LabSourceSignal,
    PhenotypeSignal,
    SimConfig,
)

settings.register_profile(
    "ci", max_examples=25, deadline=None,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large],
)
settings.load_profile("ci")


@dataclass
class SimBundle:
    config: SimConfig
    root: Path
    manifest: ExperimentManifest
    truth: GroundTruth
    table: FeatureTable


def build_bundle(config: SimConfig, out: Path) -> SimBundle:
    manifest, truth = simulate.generate_experiment(config, out)
    table = features.featurize_manifest(manifest, out, threads=4)
    return SimBundle(config=config, root=out, manifest=manifest, truth=truth, table=table)


def eight_lines(sources=("A", "B", "A", "B", "A", "B", "A", "B")) -> tuple[CellLine, ...]:
    healthy = [CellLine(f"H{i}", f"subj-h{i}", "healthy", lab_source=sources[i - 1])
               for i in range(1, 5)]
    disease = [CellLine(f"D{i}", f"subj-d{i}", "disease", subtype="dz1",
                        lab_source=sources[4 + i - 1]) for i in range(1, 5)]
    return tuple(healthy + disease)


NULL_CONFIG = SimConfig(
    batches=2, plates_per_batch=2, sites_per_well=4,
    image_height=48, image_width=48,
    control_wells_per_plate=24, experimental_wells_per_plate=8,
    root_seed=2001,
)

BATCHSHIFT_CONFIG = SimConfig(
    batches=2, plates_per_batch=2, sites_per_well=4,
    image_height=48, image_width=48,
    control_wells_per_plate=24, experimental_wells_per_plate=8,
    batch_shift=AffineShift(gain_std=0.2, offset_std=0.2),
    root_seed=1001,
)

DENSITY_CONFIG = SimConfig(
    batches=1, plates_per_batch=2, sites_per_well=3,
    image_height=80, image_width=80,
    control_wells_per_plate=12, cell_lines=eight_lines(),
    cell=CellModel(count_healthy=CountModel(16.0, 0.02),
                   count_disease=CountModel(16.0, 0.02)),
    density_confound=DensityConfound(enabled=True, delta=1.5),
    root_seed=3001,
)

PHENOTYPE_CONFIG = SimConfig(
    batches=1, plates_per_batch=2, sites_per_well=3,
    image_height=64, image_width=64,
    control_wells_per_plate=12, cell_lines=eight_lines(),
    phenotype_signal=PhenotypeSignal(enabled=True, effect=0.35),
    root_seed=4001,
)

# Constructed same-source anomaly: lab-B offsets align with disease for 3 of
# 4 pairs; the 4th pair shares lab A with a brightness quirk that inverts it.
LABSOURCE_CONFIG = SimConfig(
    batches=1, plates_per_batch=2, sites_per_well=2,
    image_height=64, image_width=64,
    control_wells_per_plate=12,
    cell_lines=eight_lines(sources=("A", "A", "A", "A", "B", "B", "B", "A")),
    lab_source_signal=LabSourceSignal(offsets=(0.06,) * 5),
    line_brightness=(("D4", 0.88), ("H4", 1.12)),
    root_seed=5001,
)

FOCUS_CONFIG = SimConfig(
    batches=1, plates_per_batch=1, sites_per_well=1,
    image_height=64, image_width=64,
    control_wells_per_plate=0,
    focus_gradient=FocusGradient(sigma_max=3.0, gamma=1.0),
    root_seed=6001,
)

SHARP_CONFIG = SimConfig(
    batches=1, plates_per_batch=1, sites_per_well=1,
    image_height=64, image_width=64,
    control_wells_per_plate=0, experimental_wells_per_plate=16,
    root_seed=6002,
)

NULL_FEATURES_CONFIG = SimConfig(
    batches=1, plates_per_batch=3, sites_per_well=4,
    image_height=48, image_width=48,
    control_wells_per_plate=12,
    cell_lines=(
        CellLine("H1", "subj-h1", "healthy", lab_source="A"),
        CellLine("D1", "subj-d1", "disease", lab_source="A"),
    ),
    root_seed=7001,
)

PAIRS_8 = [{"healthy": f"H{i}", "disease": f"D{i}"} for i in range(1, 5)]


@pytest.fixture(scope="session")
def sims_dir(tmp_path_factory) -> Path:
    return tmp_path_factory.mktemp("sims")


@pytest.fixture(scope="session")
def sim_null(sims_dir) -> SimBundle:
    return build_bundle(NULL_CONFIG, sims_dir / "null")


@pytest.fixture(scope="session")
def sim_batchshift(sims_dir) -> SimBundle:
    return build_bundle(BATCHSHIFT_CONFIG, sims_dir / "batchshift")


@pytest.fixture(scope="session")
def sim_density(sims_dir) -> SimBundle:
    return build_bundle(DENSITY_CONFIG, sims_dir / "density")


@pytest.fixture(scope="session")
def sim_phenotype(sims_dir) -> SimBundle:
    return build_bundle(PHENOTYPE_CONFIG, sims_dir / "phenotype")


@pytest.fixture(scope="session")
def sim_labsource(sims_dir) -> SimBundle:
    return build_bundle(LABSOURCE_CONFIG, sims_dir / "labsource")


@pytest.fixture(scope="session")
def sim_focus(sims_dir):
    out = sims_dir / "focus"
    manifest, truth = simulate.generate_experiment(FOCUS_CONFIG, out)
    return FOCUS_CONFIG, out, manifest, truth


@pytest.fixture(scope="session")
def sim_null_features(sims_dir) -> SimBundle:
    return build_bundle(NULL_FEATURES_CONFIG, sims_dir / "null_features")


@pytest.fixture(scope="session")
def sharp_patches(sims_dir):
    """Pool of textured in-focus training patches from a sharp simulation."""
    out = sims_dir / "sharp"
    manifest, _ = simulate.generate_experiment(SHARP_CONFIG, out)
    patches = []
    for entry in manifest.sites:
        image = storage.read_image(out / entry.image_path)
        dets = imaging.segment_nuclei(image)
        patches.extend(p.data for p in imaging.crop_patches(image, dets, size=48))
    return patches


@pytest.fixture(scope="session")
def focus_model(sharp_patches) -> imaging.FocusModel:
    return imaging.train_focus_model(sharp_patches[:90], [0.0, 0.5, 1.0, 2.0, 4.0], seed=1)
