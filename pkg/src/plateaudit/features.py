"""Hand-engineered image-statistics features and the tabular container that
carries them together with experiment metadata.

The site-level schema is fixed at 63 features: 12 per-channel statistics
over 5 channels plus 3 detection-based globals. Column ids are f000..f062;
`FEATURE_DESCRIPTIONS` maps them to readable names. Patch-level rows reuse
the per-channel statistics with the cell count pinned to 1 and the area
taken from the patch's own detection.
"""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .core import ExperimentManifest, SiteImage, SiteKey
from .errors import InputError, JoinError, SchemaError
from .imaging import NucleusDetection, crop_patches, otsu_threshold, segment_nuclei, _laplacian
from .storage import read_image

N_CHANNELS = 5
PER_CHANNEL_STATS = (
    "fg_area_frac", "fg_mean", "fg_std", "bg_mean", "bg_std", "contrast",
    "total_intensity", "p75", "saturated_frac", "lap_energy", "edge_density",
    "local_var_mean",
)
GLOBAL_STATS = ("cell_count", "det_area_mean", "det_area_std")
N_FEATURES = len(PER_CHANNEL_STATS) * N_CHANNELS + len(GLOBAL_STATS)
FEATURE_COLUMNS = tuple(f"f{i:03d}" for i in range(N_FEATURES))
FEATURE_DESCRIPTIONS = tuple(
    [f"ch{c}_{name}" for c in range(N_CHANNELS) for name in PER_CHANNEL_STATS]
    + list(GLOBAL_STATS)
)
CELL_COUNT_FEATURE = FEATURE_DESCRIPTIONS.index("cell_count")  # f060

META_COLUMNS = (
    "batch", "plate", "row", "col", "site", "cell_line", "condition",
    "lab_source", "is_control",
)

_EDGE_THRESHOLD = 0.05  # gradient magnitude above this counts as an edge pixel


def _channel_stats(x: np.ndarray) -> list[float]:
    total = float(x.sum())
    p75 = float(np.percentile(x, 75))
    saturated = float((x >= 0.99).mean())
    if float(x.std()) < 1e-12:
        mask = np.zeros_like(x, dtype=bool)
    else:
        mask = x > otsu_threshold(x)
    fg = x[mask]
    bg = x[~mask]
    fg_mean = float(fg.mean()) if fg.size else 0.0
    fg_std = float(fg.std()) if fg.size else 0.0
    bg_mean = float(bg.mean()) if bg.size else 0.0
    bg_std = float(bg.std()) if bg.size else 0.0
    lap = _laplacian(x)
    gy, gx = np.gradient(x)
    grad_mag = np.sqrt(gy * gy + gx * gx)
    local_mean = ndimage.uniform_filter(x, size=3, mode="nearest")
    local_sq = ndimage.uniform_filter(x * x, size=3, mode="nearest")
    local_var = np.clip(local_sq - local_mean * local_mean, 0.0, None)
    return [
        float(mask.mean()),
        fg_mean,
        fg_std,
        bg_mean,
        bg_std,
        fg_mean - bg_mean,
        total,
        p75,
        saturated,
        float((lap * lap).mean()),
        float((grad_mag > _EDGE_THRESHOLD).mean()),
        float(local_var.mean()),
    ]


def extract_features(image: SiteImage | np.ndarray,
                     detections: list[NucleusDetection]) -> np.ndarray:
    """The 63-feature vector of one site image given its detections."""
    data = image.data if isinstance(image, SiteImage) else image
    if data.shape[2] != N_CHANNELS:
        raise SchemaError(
            f"the 63-feature schema requires {N_CHANNELS} channels, got {data.shape[2]}"
        )
    values: list[float] = []
    for c in range(N_CHANNELS):
        values.extend(_channel_stats(data[:, :, c].astype(np.float64)))
    areas = np.array([d.area_px for d in detections], dtype=np.float64)
    values.append(float(len(detections)))
    values.append(float(areas.mean()) if areas.size else 0.0)
    values.append(float(areas.std()) if areas.size else 0.0)
    return np.array(values)


def extract_patch_features(patch_data: np.ndarray, detection: NucleusDetection) -> np.ndarray:
    """Patch-level variant: per-channel statistics of the crop, cell count
    fixed at 1, area stats from the patch's own detection."""
    if patch_data.shape[2] != N_CHANNELS:
        raise SchemaError(
            f"the 63-feature schema requires {N_CHANNELS} channels, got {patch_data.shape[2]}"
        )
    values: list[float] = []
    for c in range(N_CHANNELS):
        values.extend(_channel_stats(patch_data[:, :, c].astype(np.float64)))
    values.extend([1.0, float(detection.area_px), 0.0])
    return np.array(values)


def cell_density(detections) -> int:
    """Number of detected cells in the site image."""
    return len(detections)


# --------------------------------------------------------------------------
# FeatureTable
# --------------------------------------------------------------------------


@dataclass
class FeatureTable:
    """Numeric feature rows plus joined metadata columns, keyed by site or
    patch id. Rows are kept in sorted structured-key order."""

    keys: list[str]
    X: np.ndarray
    feature_names: list[str]
    metadata: dict[str, list] = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.keys)
        if len(set(self.keys)) != n:
            raise InputError("duplicate keys in feature table")
        if self.X.shape != (n, len(self.feature_names)):
            raise InputError(
                f"X shape {self.X.shape} inconsistent with {n} keys x "
                f"{len(self.feature_names)} features"
            )
        if n and not np.isfinite(self.X).all():
            raise InputError("feature matrix contains non-finite values")
        for col in META_COLUMNS:
            if col not in self.metadata:
                raise InputError(f"missing metadata column {col!r}")
            if len(self.metadata[col]) != n:
                raise InputError(f"metadata column {col!r} has wrong length")

    @property
    def n_rows(self) -> int:
        return len(self.keys)

    def subset(self, indices) -> "FeatureTable":
        indices = list(indices)
        return FeatureTable(
            keys=[self.keys[i] for i in indices],
            X=self.X[indices],
            feature_names=list(self.feature_names),
            metadata={c: [v[i] for i in indices] for c, v in self.metadata.items()},
        )

    def rows_for_keys(self, wanted) -> "FeatureTable":
        index = {k: i for i, k in enumerate(self.keys)}
        missing = [k for k in wanted if k not in index]
        if missing:
            raise JoinError(f"{len(missing)} keys not present in table (first: {missing[0]!r})")
        return self.subset(index[k] for k in wanted)

    def column(self, name: str) -> list:
        if name not in self.metadata:
            raise InputError(f"unknown metadata column {name!r}; have {sorted(self.metadata)}")
        return self.metadata[name]


def _sort_rows(keys, X, metadata, sort_keys):
    order = sorted(range(len(keys)), key=lambda i: sort_keys[i])
    return (
        [keys[i] for i in order],
        X[order] if len(keys) else X,
        {c: [v[i] for i in order] for c, v in metadata.items()},
    )


def _site_metadata(manifest: ExperimentManifest) -> dict[str, dict]:
    lines = {ln.id: ln for ln in manifest.cell_lines}
    meta = {}
    for s in manifest.sites:
        line = lines[s.cell_line]
        meta[s.key.key_str()] = {
            "batch": s.key.batch,
            "plate": s.key.plate,
            "row": str(s.key.row),
            "col": str(s.key.col),
            "site": str(s.key.site_index),
            "cell_line": s.cell_line,
            "condition": line.condition,
            "lab_source": line.lab_source,
            "is_control": s.is_control,
            "_sort": (s.key.batch, s.key.plate, s.key.row, s.key.col, s.key.site_index),
        }
    return meta


def featurize_manifest(manifest: ExperimentManifest, root_dir: str | Path,
                       unit: str = "site", channel: int = 0, min_area: int = 5,
                       patch_size: int = 48, threads: int = 1) -> FeatureTable:
    """Segment + featurize every site of a manifest (or every detected patch
    when unit='patch'). Output order is independent of thread count."""
    if unit not in ("site", "patch"):
        raise InputError(f"unit must be 'site' or 'patch', got {unit!r}")
    root = Path(root_dir)
    meta_by_site = _site_metadata(manifest)

    def work(entry):
        image = read_image(root / entry.image_path)
        detections = segment_nuclei(image, channel=channel, min_area=min_area)
        site_key = entry.key.key_str()
        rows = []
        if unit == "site":
            rows.append((site_key, extract_features(image, detections),
                         meta_by_site[site_key]))
        else:
            size = min(patch_size, image.height - image.height % 2,
                       image.width - image.width % 2)
            patches = crop_patches(image, detections, size=size, parent=entry.key)
            for pi, (patch, det) in enumerate(zip(patches, detections)):
                rows.append((f"{site_key}:p{pi}", extract_patch_features(patch.data, det),
                             meta_by_site[site_key]))
        return rows

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            per_site = list(pool.map(work, manifest.sites))
    else:
        per_site = [work(s) for s in manifest.sites]

    keys, vectors, metadata, sort_keys = [], [], {c: [] for c in META_COLUMNS}, []
    for rows in per_site:
        for pi, (key, vec, meta) in enumerate(rows):
            keys.append(key)
            vectors.append(vec)
            for c in META_COLUMNS:
                metadata[c].append(meta[c])
            sort_keys.append(meta["_sort"] + (pi,))
    X = np.vstack(vectors) if vectors else np.zeros((0, N_FEATURES))
    keys, X, metadata = _sort_rows(keys, X, metadata, sort_keys)
    return FeatureTable(keys=keys, X=X, feature_names=list(FEATURE_COLUMNS),
                        metadata=metadata)


# --------------------------------------------------------------------------
# CSV I/O
# --------------------------------------------------------------------------


def write_features_csv(table: FeatureTable, path: str | Path) -> None:
    """features.csv: key, the metadata columns, then the feature columns;
    floats at 9 significant digits."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["key", *META_COLUMNS, *table.feature_names])
        for i, key in enumerate(table.keys):
            meta = [
                ("true" if table.metadata[c][i] else "false") if c == "is_control"
                else str(table.metadata[c][i])
                for c in META_COLUMNS
            ]
            writer.writerow([key, *meta, *[f"{v:.9g}" for v in table.X[i]]])


def read_features_csv(path: str | Path) -> FeatureTable:
    """Read a features.csv produced by `write_features_csv`."""
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise InputError(f"{path}: empty CSV") from None
        expected_prefix = ["key", *META_COLUMNS]
        if header[: len(expected_prefix)] != expected_prefix:
            raise SchemaError(
                f"{path}: header must start with {','.join(expected_prefix)}"
            )
        feature_names = header[len(expected_prefix) :]
        keys, rows = [], []
        metadata: dict[str, list] = {c: [] for c in META_COLUMNS}
        for rix, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise InputError(f"{path}:{rix}: expected {len(header)} cells, got {len(row)}")
            keys.append(row[0])
            for ci, c in enumerate(META_COLUMNS, start=1):
                metadata[c].append(row[ci] == "true" if c == "is_control" else row[ci])
            try:
                rows.append([float(v) for v in row[len(expected_prefix) :]])
            except ValueError as exc:
                raise InputError(f"{path}:{rix}: non-numeric feature cell ({exc})") from exc
    X = np.array(rows) if rows else np.zeros((0, len(feature_names)))
    return FeatureTable(keys=keys, X=X, feature_names=feature_names, metadata=metadata)


def import_external_embeddings(path: str | Path,
                               manifest: ExperimentManifest) -> FeatureTable:
    """Ingest an arbitrary-width numeric embedding CSV and join it to a
    manifest.

    The CSV must have a `key` column whose values are site keys (or patch
    keys `<site>:p<i>`, which join on their site part). Columns named like
    the standard metadata columns are ignored; every other column must be
    numeric. Unmatched keys abort with a JoinError reporting the count.
    """
    meta_by_site = _site_metadata(manifest)
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise InputError(f"{path}: empty CSV") from None
        if "key" not in header:
            raise SchemaError(f"{path}: missing required 'key' column")
        key_ix = header.index("key")
        feature_ix = [
            i for i, name in enumerate(header)
            if i != key_ix and name not in META_COLUMNS
        ]
        feature_names = [header[i] for i in feature_ix]
        if not feature_names:
            raise SchemaError(f"{path}: no numeric feature columns found")
        keys, rows, sort_keys = [], [], []
        metadata: dict[str, list] = {c: [] for c in META_COLUMNS}
        unmatched = 0
        first_unmatched = None
        for rix, row in enumerate(reader, start=2):
            key = row[key_ix]
            site_part = ":".join(key.split(":")[:5])
            meta = meta_by_site.get(site_part)
            if meta is None:
                unmatched += 1
                if first_unmatched is None:
                    first_unmatched = key
                continue
            values = []
            for i in feature_ix:
                try:
                    values.append(float(row[i]))
                except ValueError:
                    raise InputError(
                        f"{path}:{rix}: column {header[i]!r} is not numeric: {row[i]!r}"
                    ) from None
            keys.append(key)
            rows.append(values)
            for c in META_COLUMNS:
                metadata[c].append(meta[c])
            sort_keys.append(meta["_sort"] + (key,))
        if unmatched:
            raise JoinError(
                f"{path}: {unmatched} keys not present in manifest "
                f"(first: {first_unmatched!r})"
            )
    X = np.array(rows) if rows else np.zeros((0, len(feature_names)))
    keys, X, metadata = _sort_rows(keys, X, metadata, sort_keys)
    return FeatureTable(keys=keys, X=X, feature_names=feature_names, metadata=metadata)
