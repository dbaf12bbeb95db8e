"""Synthetic plate experiments with ground-truth injectable confounders.

A site image is background noise plus N isotropic Gaussian cell spots
(N drawn from a gamma-Poisson count model per condition), followed by
per-entity perturbations in this order: lab-source channel offsets, plate
affine shift, batch affine shift, then the focus-gradient blur. Pixel values
are clamped to [0, 1] after every stage and every applied effect is recorded
in the ground truth, so downstream audits can be checked against what was
actually injected.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .core import (
    PLATE_COLS,
    PLATE_ROWS,
    CellLine,
    ExperimentManifest,
    RngStream,
    SiteEntry,
    SiteImage,
    SiteKey,
    WellAddress,
    derive_stream,
)
from .errors import ConfigError, FormatError
from .storage import save_manifest, write_image

CONTROL_LINE_ID = "CTRL"


# --------------------------------------------------------------------------
# Configuration
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class CountModel:
    mean: float = 10.0
    dispersion: float = 0.05


@dataclass(frozen=True)
class CellModel:
    nucleus_radius_px: float = 2.5
    radius_jitter: float = 0.1
    channel_profile: tuple[float, ...] = (0.9, 0.65, 0.5, 0.4, 0.3)
    amplitude_jitter: float = 0.1
    background_level: float = 0.05
    noise_std: float = 0.02
    count_healthy: CountModel = CountModel()
    count_disease: CountModel = CountModel()


@dataclass(frozen=True)
class FocusGradient:
    sigma_max: float = 0.0
    gamma: float = 1.0


@dataclass(frozen=True)
class AffineShift:
    gain_std: float = 0.0
    offset_std: float = 0.0


@dataclass(frozen=True)
class DensityConfound:
    enabled: bool = False
    delta: float = 1.5


@dataclass(frozen=True)
class LabSourceSignal:
    # additive per-channel offsets applied to sites of lab-B cell lines
    offsets: tuple[float, ...] = ()


@dataclass(frozen=True)
class PhenotypeSignal:
    enabled: bool = False
    effect: float = 0.0


def _default_lines() -> tuple[CellLine, ...]:
    return (
        CellLine("H1", "subj-h1", "healthy", lab_source="A"),
        CellLine("H2", "subj-h2", "healthy", lab_source="B"),
        CellLine("D1", "subj-d1", "disease", lab_source="A"),
        CellLine("D2", "subj-d2", "disease", lab_source="B"),
    )


@dataclass(frozen=True)
class SimConfig:
    batches: int = 2
    plates_per_batch: int = 3
    sites_per_well: int = 4
    image_height: int = 64
    image_width: int = 64
    channels: int = 5
    cell_lines: tuple[CellLine, ...] = field(default_factory=_default_lines)
    control_wells_per_plate: int = 24
    experimental_wells_per_plate: int | None = None
    line_brightness: tuple[tuple[str, float], ...] = ()
    cell: CellModel = CellModel()
    focus_gradient: FocusGradient = FocusGradient()
    batch_shift: AffineShift = AffineShift()
    plate_shift: AffineShift = AffineShift()
    density_confound: DensityConfound = DensityConfound()
    lab_source_signal: LabSourceSignal = LabSourceSignal()
    phenotype_signal: PhenotypeSignal = PhenotypeSignal()
    root_seed: int = 0

    def validate(self) -> None:
        if self.batches < 1 or self.plates_per_batch < 1 or self.sites_per_well < 1:
            raise ConfigError("batches, plates_per_batch and sites_per_well must be >= 1")
        if self.image_height < 16 or self.image_width < 16:
            raise ConfigError("image dims must be >= 16")
        if self.channels < 1:
            raise ConfigError("channels must be >= 1")
        if not self.cell_lines:
            raise ConfigError("at least one cell line is required")
        if len(self.cell.channel_profile) != self.channels:
            raise ConfigError(
                f"channel_profile has {len(self.cell.channel_profile)} entries "
                f"for {self.channels} channels"
            )
        if self.lab_source_signal.offsets and len(self.lab_source_signal.offsets) != self.channels:
            raise ConfigError("lab_source_signal offsets must match channel count")
        if not (0 <= self.control_wells_per_plate <= 96):
            raise ConfigError("control_wells_per_plate must be in [0, 96]")
        if self.experimental_wells_per_plate is not None and self.experimental_wells_per_plate < 1:
            raise ConfigError("experimental_wells_per_plate must be >= 1 when set")
        if self.focus_gradient.sigma_max < 0:
            raise ConfigError("focus sigma_max must be >= 0")
        if self.focus_gradient.gamma <= 0:
            raise ConfigError("focus gamma must be > 0")
        if self.batch_shift.gain_std < 0 or self.batch_shift.offset_std < 0:
            raise ConfigError("batch_shift stds must be >= 0")
        if self.plate_shift.gain_std < 0 or self.plate_shift.offset_std < 0:
            raise ConfigError("plate_shift stds must be >= 0")
        if self.density_confound.delta <= 0:
            raise ConfigError("density delta must be > 0")
        if not math.isfinite(self.phenotype_signal.effect):
            raise ConfigError("phenotype effect must be finite")
        for cm in (self.cell.count_healthy, self.cell.count_disease):
            if cm.mean < 0 or cm.dispersion < 0:
                raise ConfigError("count mean and dispersion must be >= 0")
        if self.cell.nucleus_radius_px <= 0:
            raise ConfigError("nucleus radius must be > 0")
        names = [ln.id for ln in self.cell_lines]
        if len(set(names)) != len(names):
            raise ConfigError("duplicate cell line ids")
        if CONTROL_LINE_ID in names:
            raise ConfigError(f"cell line id {CONTROL_LINE_ID!r} is reserved for controls")
        for lid, gain in self.line_brightness:
            if lid not in names:
                raise ConfigError(f"line_brightness references unknown line {lid!r}")
            if gain <= 0:
                raise ConfigError("line brightness gains must be > 0")

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:16]

    def to_dict(self) -> dict:
        return {
            "batches": self.batches,
            "plates_per_batch": self.plates_per_batch,
            "sites_per_well": self.sites_per_well,
            "image_height": self.image_height,
            "image_width": self.image_width,
            "channels": self.channels,
            "cell_lines": [
                {
                    "id": ln.id,
                    "subject_id": ln.subject_id,
                    "condition": ln.condition,
                    "subtype": ln.subtype,
                    "lab_source": ln.lab_source,
                }
                for ln in self.cell_lines
            ],
            "control_wells_per_plate": self.control_wells_per_plate,
            "experimental_wells_per_plate": self.experimental_wells_per_plate,
            "line_brightness": {lid: gain for lid, gain in self.line_brightness},
            "cell": {
                "nucleus_radius_px": self.cell.nucleus_radius_px,
                "radius_jitter": self.cell.radius_jitter,
                "channel_profile": list(self.cell.channel_profile),
                "amplitude_jitter": self.cell.amplitude_jitter,
                "background_level": self.cell.background_level,
                "noise_std": self.cell.noise_std,
                "count_healthy": {"mean": self.cell.count_healthy.mean,
                                  "dispersion": self.cell.count_healthy.dispersion},
                "count_disease": {"mean": self.cell.count_disease.mean,
                                  "dispersion": self.cell.count_disease.dispersion},
            },
            "focus_gradient": {"sigma_max": self.focus_gradient.sigma_max,
                               "gamma": self.focus_gradient.gamma},
            "batch_shift": {"gain_std": self.batch_shift.gain_std,
                            "offset_std": self.batch_shift.offset_std},
            "plate_shift": {"gain_std": self.plate_shift.gain_std,
                            "offset_std": self.plate_shift.offset_std},
            "density_confound": {"enabled": self.density_confound.enabled,
                                 "delta": self.density_confound.delta},
            "lab_source_signal": {"offsets": list(self.lab_source_signal.offsets)},
            "phenotype_signal": {"enabled": self.phenotype_signal.enabled,
                                 "effect": self.phenotype_signal.effect},
            "root_seed": self.root_seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        def take(obj, where, **fields):
            unknown = sorted(set(obj) - set(fields))
            if unknown:
                raise ConfigError(f"{where}: unknown keys {unknown}")
            return {k: obj.get(k, default) for k, default in fields.items()}

        top = take(
            d,
            "config",
            batches=2, plates_per_batch=3, sites_per_well=4,
            image_height=64, image_width=64, channels=5,
            cell_lines=None, control_wells_per_plate=24,
            experimental_wells_per_plate=None, line_brightness={},
            cell={}, focus_gradient={}, batch_shift={}, plate_shift={},
            density_confound={}, lab_source_signal={}, phenotype_signal={},
            root_seed=0,
        )
        if top["cell_lines"] is None:
            lines = _default_lines()
        else:
            lines = tuple(
                CellLine(
                    **take(raw, f"cell_lines[{i}]", id=None, subject_id="",
                           condition=None, subtype="", lab_source="A")
                )
                for i, raw in enumerate(top["cell_lines"])
            )
        cell_raw = take(
            top["cell"], "cell",
            nucleus_radius_px=3.0, radius_jitter=0.1,
            channel_profile=None, amplitude_jitter=0.1,
            background_level=0.05, noise_std=0.02,
            count_healthy={}, count_disease={},
        )
        profile = cell_raw["channel_profile"]
        if profile is None:
            profile = CellModel().channel_profile[: top["channels"]]
            if len(profile) < top["channels"]:
                profile = tuple(profile) + (0.3,) * (top["channels"] - len(profile))
        cell = CellModel(
            nucleus_radius_px=cell_raw["nucleus_radius_px"],
            radius_jitter=cell_raw["radius_jitter"],
            channel_profile=tuple(profile),
            amplitude_jitter=cell_raw["amplitude_jitter"],
            background_level=cell_raw["background_level"],
            noise_std=cell_raw["noise_std"],
            count_healthy=CountModel(**take(cell_raw["count_healthy"], "count_healthy",
                                            mean=12.0, dispersion=0.05)),
            count_disease=CountModel(**take(cell_raw["count_disease"], "count_disease",
                                            mean=12.0, dispersion=0.05)),
        )
        offsets = take(top["lab_source_signal"], "lab_source_signal", offsets=[])["offsets"]
        cfg = cls(
            batches=top["batches"],
            plates_per_batch=top["plates_per_batch"],
            sites_per_well=top["sites_per_well"],
            image_height=top["image_height"],
            image_width=top["image_width"],
            channels=top["channels"],
            cell_lines=lines,
            control_wells_per_plate=top["control_wells_per_plate"],
            experimental_wells_per_plate=top["experimental_wells_per_plate"],
            line_brightness=tuple(sorted(dict(top["line_brightness"]).items())),
            cell=cell,
            focus_gradient=FocusGradient(**take(top["focus_gradient"], "focus_gradient",
                                                sigma_max=0.0, gamma=1.0)),
            batch_shift=AffineShift(**take(top["batch_shift"], "batch_shift",
                                           gain_std=0.0, offset_std=0.0)),
            plate_shift=AffineShift(**take(top["plate_shift"], "plate_shift",
                                           gain_std=0.0, offset_std=0.0)),
            density_confound=DensityConfound(**take(top["density_confound"], "density_confound",
                                                    enabled=False, delta=1.5)),
            lab_source_signal=LabSourceSignal(offsets=tuple(offsets)),
            phenotype_signal=PhenotypeSignal(**take(top["phenotype_signal"], "phenotype_signal",
                                                    enabled=False, effect=0.0)),
            root_seed=top["root_seed"],
        )
        cfg.validate()
        return cfg

    @classmethod
    def from_json(cls, path: str | Path) -> "SimConfig":
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: malformed JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top-level config must be an object")
        return cls.from_dict(raw)


# --------------------------------------------------------------------------
# Ground truth
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SiteTruth:
    key: SiteKey
    cell_line: str
    is_control: bool
    cell_count: int
    blur_sigma: float
    batch_gain: tuple[float, ...]
    batch_offset: tuple[float, ...]
    plate_gain: tuple[float, ...]
    plate_offset: tuple[float, ...]
    lab_offsets: tuple[float, ...]
    line_gain: float
    phenotype_applied: bool
    count_mean: float


@dataclass(frozen=True)
class GroundTruth:
    root_seed: int
    active_confounders: tuple[str, ...]
    sites: tuple[SiteTruth, ...]

    def by_key(self) -> dict[str, SiteTruth]:
        return {t.key.key_str(): t for t in self.sites}

    def save(self, path: str | Path) -> None:
        doc = {
            "kind": "groundtruth",
            "version": 1,
            "root_seed": self.root_seed,
            "active_confounders": list(self.active_confounders),
            "sites": [
                {
                    "key": t.key.key_str(),
                    "cell_line": t.cell_line,
                    "is_control": t.is_control,
                    "cell_count": t.cell_count,
                    "blur_sigma": t.blur_sigma,
                    "batch_gain": list(t.batch_gain),
                    "batch_offset": list(t.batch_offset),
                    "plate_gain": list(t.plate_gain),
                    "plate_offset": list(t.plate_offset),
                    "lab_offsets": list(t.lab_offsets),
                    "line_gain": t.line_gain,
                    "phenotype_applied": t.phenotype_applied,
                    "count_mean": t.count_mean,
                }
                for t in self.sites
            ],
        }
        Path(path).write_text(json.dumps(doc, sort_keys=True), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "GroundTruth":
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        if doc.get("kind") != "groundtruth" or doc.get("version") != 1:
            raise FormatError(f"{path}: not a version-1 groundtruth file")
        sites = tuple(
            SiteTruth(
                key=SiteKey.from_key_str(raw["key"]),
                cell_line=raw["cell_line"],
                is_control=raw["is_control"],
                cell_count=raw["cell_count"],
                blur_sigma=raw["blur_sigma"],
                batch_gain=tuple(raw["batch_gain"]),
                batch_offset=tuple(raw["batch_offset"]),
                plate_gain=tuple(raw["plate_gain"]),
                plate_offset=tuple(raw["plate_offset"]),
                lab_offsets=tuple(raw["lab_offsets"]),
                line_gain=raw["line_gain"],
                phenotype_applied=raw["phenotype_applied"],
                count_mean=raw["count_mean"],
            )
            for raw in doc["sites"]
        )
        return cls(
            root_seed=doc["root_seed"],
            active_confounders=tuple(doc["active_confounders"]),
            sites=sites,
        )


# --------------------------------------------------------------------------
# Layout helpers
# --------------------------------------------------------------------------


def default_control_wells(n: int) -> list[WellAddress]:
    """Deterministic control layout spread across rows and columns.

    Rows cycle 0..7 and columns advance with stride 5 (coprime to 12) plus a
    small per-24 block shift, which keeps the first 96 positions distinct and
    makes any multiple of 24 exactly balanced over rows and columns.
    """
    wells = []
    seen = set()
    for k in range(n):
        addr = (k % PLATE_ROWS, (5 * k + 3 * (k // 24)) % PLATE_COLS)
        if addr in seen:
            raise ConfigError(f"control layout collision at {addr}")
        seen.add(addr)
        wells.append(WellAddress(*addr))
    return wells


def plate_layout(config: SimConfig, plate_ordinal: int) -> list[tuple[WellAddress, str, bool]]:
    """Assign each used well on one plate to a cell line.

    Control wells come from `default_control_wells`; the remaining wells (in
    row-major order, optionally truncated by `experimental_wells_per_plate`)
    are dealt round-robin over the configured lines, rotated by the plate
    ordinal so no line is pinned to fixed positions across plates.
    """
    controls = set((w.row, w.col) for w in default_control_wells(config.control_wells_per_plate))
    layout = [(WellAddress(r, c), CONTROL_LINE_ID, True) for (r, c) in sorted(controls)]
    experimental = [
        (r, c)
        for r in range(PLATE_ROWS)
        for c in range(PLATE_COLS)
        if (r, c) not in controls
    ]
    if config.experimental_wells_per_plate is not None:
        experimental = experimental[: config.experimental_wells_per_plate]
    lines = config.cell_lines
    for i, (r, c) in enumerate(experimental):
        line = lines[(i + plate_ordinal) % len(lines)]
        layout.append((WellAddress(r, c), line.id, False))
    return layout


# --------------------------------------------------------------------------
# Injection operations
# --------------------------------------------------------------------------


def blur_sigma_for_well(well: WellAddress, sigma_max: float, gamma: float = 1.0) -> float:
    """sigma_max * d^gamma with d the normalized center distance in [0, 1]."""
    return sigma_max * well.center_distance() ** gamma


def gaussian_blur(data: np.ndarray, sigma: float) -> np.ndarray:
    """Per-channel Gaussian blur with a kernel truncated at radius
    ceil(3*sigma) and edge-clamped boundaries."""
    if sigma <= 0:
        return data
    radius = int(math.ceil(3.0 * sigma))
    if data.ndim == 2:
        return ndimage.gaussian_filter(data, sigma=sigma, radius=radius, mode="nearest")
    out = np.empty_like(data)
    for c in range(data.shape[2]):
        out[:, :, c] = ndimage.gaussian_filter(
            data[:, :, c], sigma=sigma, radius=radius, mode="nearest"
        )
    return out


def inject_focus_gradient(image: SiteImage, well: WellAddress, sigma_max: float,
                          gamma: float = 1.0) -> SiteImage:
    """Blur by the well's position: sharper near the plate center, blurrier
    toward the corners (corner wells get exactly sigma_max)."""
    if sigma_max < 0:
        raise ConfigError("sigma_max must be >= 0")
    sigma = blur_sigma_for_well(well, sigma_max, gamma)
    if sigma <= 0:
        return image
    blurred = gaussian_blur(image.data.astype(np.float64), sigma)
    return SiteImage(data=np.clip(blurred, 0.0, 1.0).astype(np.float32))


def affine_shift_params(kind: str, entity_id: str, channels: int, shift: AffineShift,
                        root_seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Draw per-channel (gain, offset) once per entity from its own stream;
    all sites in the entity share the same draw."""
    stream = derive_stream(root_seed, [kind, entity_id, "shift"])
    gains = 1.0 + stream.normal(channels) * shift.gain_std
    offsets = stream.normal(channels) * shift.offset_std
    return gains, offsets


def apply_affine(data: np.ndarray, gains: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    return np.clip(data * gains[None, None, :] + offsets[None, None, :], 0.0, 1.0)


def inject_batch_shift(image: SiteImage, batch_id: str, shift: AffineShift,
                       root_seed: int) -> SiteImage:
    gains, offsets = affine_shift_params("batch", batch_id, image.channels, shift, root_seed)
    return SiteImage(data=apply_affine(image.data.astype(np.float64), gains, offsets)
                     .astype(np.float32))


def inject_plate_shift(image: SiteImage, plate_id: str, shift: AffineShift,
                       root_seed: int) -> SiteImage:
    gains, offsets = affine_shift_params("plate", plate_id, image.channels, shift, root_seed)
    return SiteImage(data=apply_affine(image.data.astype(np.float64), gains, offsets)
                     .astype(np.float32))


# --------------------------------------------------------------------------
# Rendering
# --------------------------------------------------------------------------


def render_cells(height: int, width: int, channels: int,
                 cells: list[tuple[float, float, float, np.ndarray]],
                 background_level: float, noise_std: float,
                 noise_stream: RngStream | None) -> np.ndarray:
    """Render Gaussian spots onto a noisy background; float64, clamped [0,1].

    `cells` entries are (y, x, radius, per-channel peak amplitudes).
    """
    img = np.full((height, width, channels), background_level, dtype=np.float64)
    if noise_std > 0 and noise_stream is not None:
        img += noise_stream.normal(height * width * channels).reshape(height, width, channels) \
            * noise_std
    for cy, cx, radius, amps in cells:
        reach = int(math.ceil(3.5 * radius))
        y0, y1 = max(0, int(cy) - reach), min(height, int(cy) + reach + 1)
        x0, x1 = max(0, int(cx) - reach), min(width, int(cx) + reach + 1)
        if y0 >= y1 or x0 >= x1:
            continue
        yy = np.arange(y0, y1, dtype=np.float64)[:, None]
        xx = np.arange(x0, x1, dtype=np.float64)[None, :]
        g = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * radius * radius))
        img[y0:y1, x0:x1, :] += g[:, :, None] * amps[None, None, :]
    return np.clip(img, 0.0, 1.0)


def _count_model_for(config: SimConfig, line: CellLine) -> tuple[float, float]:
    cm = config.cell.count_healthy if line.condition == "healthy" else config.cell.count_disease
    mean = cm.mean
    if config.density_confound.enabled and line.condition == "disease":
        mean *= config.density_confound.delta
    return mean, cm.dispersion


def _site_cells(config: SimConfig, line: CellLine, line_gain: float,
                stream: RngStream) -> tuple[list, int, float]:
    mean, dispersion = _count_model_for(config, line)
    count_stream = stream.substream("count")
    if mean <= 0:
        n = 0
    elif dispersion > 0:
        rate = count_stream.gamma(1.0 / dispersion, mean * dispersion)
        n = count_stream.poisson(rate)
    else:
        n = count_stream.poisson(mean)

    cells = []
    if n > 0:
        cell_stream = stream.substream("cells")
        h, w = config.image_height, config.image_width
        margin = 2.0
        profile = np.asarray(config.cell.channel_profile, dtype=np.float64)
        phenotype = (
            config.phenotype_signal.enabled
            and line.condition == "disease"
            and line.id != CONTROL_LINE_ID
        )
        # nuclei exclude each other: dart-throwing placement with a minimum
        # separation of 3 nucleus radii (falls back to the last draw when a
        # site gets crowded)
        min_sep_sq = (3.0 * config.cell.nucleus_radius_px) ** 2
        placed: list[tuple[float, float]] = []
        for _ in range(n):
            cy = cx = 0.0
            for _attempt in range(30):
                cy = margin + cell_stream.uniform() * (h - 2 * margin)
                cx = margin + cell_stream.uniform() * (w - 2 * margin)
                if all((cy - py) ** 2 + (cx - px) ** 2 >= min_sep_sq for py, px in placed):
                    break
            placed.append((cy, cx))
            radius = config.cell.nucleus_radius_px * math.exp(
                config.cell.radius_jitter * cell_stream.normal()
            )
            amp_scale = max(0.0, 1.0 + config.cell.amplitude_jitter * cell_stream.normal()) \
                * line_gain
            amps = profile * amp_scale
            if phenotype:
                amps = amps.copy()
                amps[1:] *= 1.0 + config.phenotype_signal.effect
            cells.append((cy, cx, radius, amps))
    return cells, n, mean


def render_site(config: SimConfig, key: SiteKey, line: CellLine,
                batch_gain: np.ndarray, batch_offset: np.ndarray,
                plate_gain: np.ndarray, plate_offset: np.ndarray) -> tuple[SiteImage, SiteTruth]:
    """Render one site image and its ground-truth record."""
    stream = derive_stream(
        config.root_seed, ["site", key.batch, key.plate, key.row, key.col, key.site_index]
    )
    gain_map = dict(config.line_brightness)
    line_gain = float(gain_map.get(line.id, 1.0))
    cells, n, mean = _site_cells(config, line, line_gain, stream)
    img = render_cells(
        config.image_height, config.image_width, config.channels,
        cells, config.cell.background_level, config.cell.noise_std,
        stream.substream("noise"),
    )

    lab_offsets = np.zeros(config.channels)
    if config.lab_source_signal.offsets and line.lab_source == "B":
        lab_offsets = np.asarray(config.lab_source_signal.offsets, dtype=np.float64)
        img = np.clip(img + lab_offsets[None, None, :], 0.0, 1.0)

    img = apply_affine(img, plate_gain, plate_offset)
    img = apply_affine(img, batch_gain, batch_offset)

    sigma = blur_sigma_for_well(key.well, config.focus_gradient.sigma_max,
                                config.focus_gradient.gamma)
    if sigma > 0:
        img = np.clip(gaussian_blur(img, sigma), 0.0, 1.0)

    site_image = SiteImage(data=img.astype(np.float32))
    truth = SiteTruth(
        key=key,
        cell_line=line.id,
        is_control=line.id == CONTROL_LINE_ID,
        cell_count=n,
        blur_sigma=sigma,
        batch_gain=tuple(batch_gain.tolist()),
        batch_offset=tuple(batch_offset.tolist()),
        plate_gain=tuple(plate_gain.tolist()),
        plate_offset=tuple(plate_offset.tolist()),
        lab_offsets=tuple(lab_offsets.tolist()),
        line_gain=line_gain,
        phenotype_applied=bool(
            config.phenotype_signal.enabled and line.condition == "disease"
            and line.id != CONTROL_LINE_ID
        ),
        count_mean=mean,
    )
    return site_image, truth


def _active_confounders(config: SimConfig) -> tuple[str, ...]:
    active = []
    if config.focus_gradient.sigma_max > 0:
        active.append("focus_gradient")
    if config.batch_shift.gain_std > 0 or config.batch_shift.offset_std > 0:
        active.append("batch_shift")
    if config.plate_shift.gain_std > 0 or config.plate_shift.offset_std > 0:
        active.append("plate_shift")
    if config.density_confound.enabled:
        active.append("density_confound")
    if any(o != 0 for o in config.lab_source_signal.offsets):
        active.append("lab_source_signal")
    if config.line_brightness:
        active.append("line_brightness")
    if config.phenotype_signal.enabled:
        active.append("phenotype_signal")
    return tuple(active)


def generate_experiment(config: SimConfig, out_dir: str | Path,
                        write_images: bool = True) -> tuple[ExperimentManifest, GroundTruth]:
    """Generate a full experiment: images on disk plus manifest.jsonl and
    groundtruth.json under `out_dir`. Deterministic for a fixed config."""
    config.validate()
    out = Path(out_dir)
    images_dir = out / "images"
    if write_images:
        images_dir.mkdir(parents=True, exist_ok=True)
    else:
        out.mkdir(parents=True, exist_ok=True)

    control_line = CellLine(CONTROL_LINE_ID, "control", "healthy", subtype="control",
                            lab_source="A")
    lines_by_id = {ln.id: ln for ln in config.cell_lines}
    lines_by_id[CONTROL_LINE_ID] = control_line

    uses_controls = config.control_wells_per_plate > 0
    manifest_lines = tuple(config.cell_lines) + ((control_line,) if uses_controls else ())

    sites: list[SiteEntry] = []
    truths: list[SiteTruth] = []
    plate_ordinal = 0
    for bi in range(config.batches):
        batch_id = f"B{bi}"
        batch_gain, batch_offset = affine_shift_params(
            "batch", batch_id, config.channels, config.batch_shift, config.root_seed
        )
        for _pi in range(config.plates_per_batch):
            plate_id = f"P{plate_ordinal:02d}"
            plate_gain, plate_offset = affine_shift_params(
                "plate", plate_id, config.channels, config.plate_shift, config.root_seed
            )
            for well, line_id, is_control in plate_layout(config, plate_ordinal):
                line = lines_by_id[line_id]
                for si in range(config.sites_per_well):
                    key = SiteKey(batch_id, plate_id, well.row, well.col, si)
                    image, truth = render_site(
                        config, key, line, batch_gain, batch_offset, plate_gain, plate_offset
                    )
                    rel_path = (
                        f"images/{batch_id}_{plate_id}_r{well.row}c{well.col:02d}_s{si}.ptns"
                    )
                    if write_images:
                        write_image(image, out / rel_path)
                    sites.append(
                        SiteEntry(key=key, cell_line=line_id, image_path=rel_path,
                                  is_control=is_control)
                    )
                    truths.append(truth)
            plate_ordinal += 1

    manifest = ExperimentManifest(
        sites=tuple(sites),
        cell_lines=manifest_lines,
        config_digest=config.digest(),
    )
    truth = GroundTruth(
        root_seed=config.root_seed,
        active_confounders=_active_confounders(config),
        sites=tuple(truths),
    )
    save_manifest(manifest, out / "manifest.jsonl")
    truth.save(out / "groundtruth.json")
    return manifest, truth


def with_seed(config: SimConfig, seed: int) -> SimConfig:
    return replace(config, root_seed=int(seed))
