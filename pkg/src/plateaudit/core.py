"""Core data model and deterministic RNG streams.

The experiment hierarchy is batch -> plate -> well -> site; plates are fixed
at the 96-well (8x12) geometry. All value types are immutable after
construction and safe to share between workers.

Randomness is provided by counter-based splitmix64 streams keyed by a
(root_seed, path) pair, so any entity in the hierarchy can draw its own
numbers independently of evaluation order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError, ValidationError

PLATE_ROWS = 8
PLATE_COLS = 12
WELLS_PER_PLATE = PLATE_ROWS * PLATE_COLS

CONDITIONS = ("healthy", "disease")
LAB_SOURCES = ("A", "B")


@dataclass(frozen=True)
class WellAddress:
    """Position of a well on the fixed 8x12 plate grid."""

    row: int
    col: int

    def __post_init__(self):
        if not (0 <= self.row < PLATE_ROWS):
            raise ValidationError(f"well row {self.row} outside [0, {PLATE_ROWS})")
        if not (0 <= self.col < PLATE_COLS):
            raise ValidationError(f"well col {self.col} outside [0, {PLATE_COLS})")

    def center_distance(self) -> float:
        """Euclidean distance from the plate center (3.5, 5.5), normalized by
        the corner distance so the result lies in [0, 1]."""
        d = math.hypot(self.row - 3.5, self.col - 5.5)
        return d / math.hypot(3.5, 5.5)


@dataclass(frozen=True, order=True)
class SiteKey:
    """Globally unique address of one imaged site within a manifest."""

    batch: str
    plate: str
    row: int
    col: int
    site_index: int

    def __post_init__(self):
        for name, value in (("batch", self.batch), ("plate", self.plate)):
            if not value or ":" in value:
                raise ValidationError(f"{name} id {value!r} must be nonempty and contain no ':'")
        WellAddress(self.row, self.col)
        if self.site_index < 0:
            raise ValidationError(f"site_index {self.site_index} must be >= 0")

    @property
    def well(self) -> WellAddress:
        return WellAddress(self.row, self.col)

    def key_str(self) -> str:
        return f"{self.batch}:{self.plate}:{self.row}:{self.col}:{self.site_index}"

    @classmethod
    def from_key_str(cls, s: str) -> "SiteKey":
        parts = s.split(":")
        if len(parts) != 5:
            raise ValidationError(f"malformed site key {s!r}")
        return cls(parts[0], parts[1], int(parts[2]), int(parts[3]), int(parts[4]))


@dataclass(frozen=True)
class CellLine:
    """A cultured line from one individual, with its condition and origin lab."""

    id: str
    subject_id: str
    condition: str
    subtype: str = ""
    lab_source: str = "A"

    def __post_init__(self):
        if not self.id or ":" in self.id:
            raise ValidationError(f"cell line id {self.id!r} must be nonempty and contain no ':'")
        if self.condition not in CONDITIONS:
            raise ValidationError(f"condition {self.condition!r} not one of {CONDITIONS}")
        if self.lab_source not in LAB_SOURCES:
            raise ValidationError(f"lab_source {self.lab_source!r} not one of {LAB_SOURCES}")


@dataclass(frozen=True)
class SiteEntry:
    key: SiteKey
    cell_line: str
    image_path: str
    is_control: bool


@dataclass(frozen=True)
class ExperimentManifest:
    """Metadata tree for one experiment: every site plus the cell-line table."""

    sites: tuple[SiteEntry, ...]
    cell_lines: tuple[CellLine, ...]
    config_digest: str = ""

    def __post_init__(self):
        self.validate()

    def validate(self):
        known = {line.id for line in self.cell_lines}
        if len(known) != len(self.cell_lines):
            raise ValidationError("duplicate cell line ids in manifest")
        dangling = [s.key.key_str() for s in self.sites if s.cell_line not in known]
        if dangling:
            shown = ", ".join(dangling[:5])
            missing = sorted({s.cell_line for s in self.sites if s.cell_line not in known})
            raise ValidationError(
                f"sites reference unknown cell lines {missing}: {shown}"
                + ("..." if len(dangling) > 5 else "")
            )
        keys = [s.key for s in self.sites]
        if len(set(keys)) != len(keys):
            raise ValidationError("duplicate site keys in manifest")

    def line_by_id(self, line_id: str) -> CellLine:
        for line in self.cell_lines:
            if line.id == line_id:
                return line
        raise ValidationError(f"unknown cell line {line_id!r}")


MIN_IMAGE_DIM = 16


@dataclass(frozen=True)
class SiteImage:
    """Multi-channel raster, channel-last float32. Values produced by this
    package are in [0, 1]; the container round-trips any finite payload."""

    data: np.ndarray

    def __post_init__(self):
        d = self.data
        if d.ndim != 3:
            raise InputError(f"image data must be 3-D (h, w, c), got shape {d.shape}")
        if d.dtype != np.float32:
            raise InputError(f"image data must be float32, got {d.dtype}")
        h, w, c = d.shape
        if h < MIN_IMAGE_DIM or w < MIN_IMAGE_DIM:
            raise InputError(f"image dims {h}x{w} below the minimum {MIN_IMAGE_DIM}")
        if c < 1:
            raise InputError("image must have at least one channel")
        if not np.isfinite(d).all():
            raise InputError("image contains non-finite values")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


# --------------------------------------------------------------------------
# Deterministic RNG streams
# --------------------------------------------------------------------------

_U64 = np.uint64
_GOLDEN = 0x9E3779B97F4A7C15
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1


def _fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for b in data:
        h = ((h ^ b) * _FNV_PRIME) & _MASK64
    return h


def _mix64(z: np.ndarray) -> np.ndarray:
    # splitmix64 finalizer, vectorized over uint64 arrays
    z = (z ^ (z >> _U64(30))) * _U64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> _U64(27))) * _U64(0x94D049BB133111EB)
    return z ^ (z >> _U64(31))


def _mix64_int(z: int) -> int:
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def _fold(state: int, label: str | int) -> int:
    h = _fnv1a64(str(label).encode("utf-8"))
    return _mix64_int(state ^ h)


@dataclass
class RngStream:
    """Counter-based random stream keyed by (root_seed, path).

    The i-th raw draw is splitmix64(base + (i+1)*golden) where base is a hash
    fold of the seed and the path labels, so identical (seed, path) pairs
    yield identical sequences no matter what other streams were consumed.
    """

    root_seed: int
    path: tuple[str, ...]
    _base: int = field(init=False)
    _counter: int = field(init=False, default=0)

    def __post_init__(self):
        if not self.path:
            raise InputError("stream path must be nonempty")
        self.path = tuple(str(p) for p in self.path)
        state = self.root_seed & _MASK64
        for label in self.path:
            state = _fold(state, label)
        self._base = state

    def substream(self, *labels: str | int) -> "RngStream":
        """Derive an independent child stream; equivalent to extending the path."""
        return derive_stream(self.root_seed, list(self.path) + [str(x) for x in labels])

    def _raw(self, n: int) -> np.ndarray:
        idx = np.arange(self._counter + 1, self._counter + n + 1, dtype=np.uint64)
        self._counter += n
        return _mix64(_U64(self._base) + idx * _U64(_GOLDEN))

    def uniform(self, size: int | None = None):
        """Uniform draws in [0, 1) with 53-bit resolution."""
        n = 1 if size is None else size
        u = (self._raw(n) >> _U64(11)).astype(np.float64) * (2.0**-53)
        return float(u[0]) if size is None else u

    def normal(self, size: int | None = None):
        """Standard-normal draws via Box-Muller on uniform pairs."""
        n = 1 if size is None else size
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs)
        u1, u2 = u[:pairs], u[pairs:]
        r = np.sqrt(-2.0 * np.log1p(-u1))
        theta = 2.0 * np.pi * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        return float(z[0]) if size is None else z

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates permutation of range(n) driven by uniform draws."""
        order = np.arange(n)
        if n < 2:
            return order
        u = self.uniform(n - 1)
        for i in range(n - 1, 0, -1):
            j = int(u[n - 1 - i] * (i + 1))
            order[i], order[j] = order[j], order[i]
        return order

    def poisson(self, lam: float) -> int:
        """Knuth's product method; adequate for the desk-scale rates used here."""
        if lam < 0:
            raise InputError("poisson rate must be >= 0")
        if lam == 0:
            return 0
        limit = math.exp(-lam)
        k, prod = 0, 1.0
        while True:
            prod *= self.uniform()
            if prod <= limit:
                return k
            k += 1

    def gamma(self, shape: float, scale: float = 1.0) -> float:
        """Marsaglia-Tsang sampler (with the boost for shape < 1)."""
        if shape <= 0 or scale <= 0:
            raise InputError("gamma shape and scale must be > 0")
        if shape < 1.0:
            u = self.uniform()
            return self.gamma(shape + 1.0, scale) * (max(u, 1e-300) ** (1.0 / shape))
        d = shape - 1.0 / 3.0
        c = 1.0 / math.sqrt(9.0 * d)
        while True:
            x = self.normal()
            v = (1.0 + c * x) ** 3
            if v <= 0:
                continue
            u = self.uniform()
            if math.log(max(u, 1e-300)) < 0.5 * x * x + d - d * v + d * math.log(v):
                return d * v * scale


def derive_stream(root_seed: int, path: list[str | int] | tuple) -> RngStream:
    """Build the deterministic stream for (root_seed, path)."""
    return RngStream(root_seed=int(root_seed), path=tuple(str(p) for p in path))


def derive_seed(root_seed: int, path: list[str | int] | tuple) -> int:
    """Collapse (root_seed, path) to a 64-bit integer usable as a child seed."""
    return derive_stream(root_seed, path)._base
