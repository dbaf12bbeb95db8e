"""Persistence formats: the PTNS1 image container and the JSONL manifest.

Image container layout: magic "PTNS1" (5 bytes), then height, width, channels
as little-endian u32, then height*width*channels float32 little-endian values
in channel-last row-major order. Round trips are bit-exact for any finite
payload.

Manifest layout: UTF-8 JSON lines. The first line is a header object
{"kind": "manifest", "version": 1, "config_digest": ..., "cell_lines": [...]};
each following line is one site object with keys
{"batch", "plate", "row", "col", "site", "cell_line", "is_control",
"image_path"}. Unknown keys are rejected by name.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .core import CellLine, ExperimentManifest, SiteEntry, SiteImage, SiteKey
from .errors import CorruptionError, FormatError

IMAGE_MAGIC = b"PTNS1"
MANIFEST_VERSION = 1

_HEADER_KEYS = {"kind", "version", "config_digest", "cell_lines"}
_LINE_KEYS = {"id", "subject_id", "condition", "subtype", "lab_source"}
_SITE_KEYS = {"batch", "plate", "row", "col", "site", "cell_line", "is_control", "image_path"}


def write_image(image: SiteImage | np.ndarray, path: str | Path) -> None:
    data = image.data if isinstance(image, SiteImage) else image
    if data.ndim != 3 or data.dtype != np.float32:
        raise FormatError(f"expected float32 (h, w, c) array, got {data.dtype} {data.shape}")
    h, w, c = data.shape
    payload = np.ascontiguousarray(data, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(IMAGE_MAGIC)
        fh.write(struct.pack("<III", h, w, c))
        fh.write(payload.tobytes())


def read_image(path: str | Path) -> SiteImage:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(IMAGE_MAGIC) + 12:
        raise CorruptionError(f"{path}: truncated header")
    if blob[: len(IMAGE_MAGIC)] != IMAGE_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:5]!r}, expected {IMAGE_MAGIC!r}")
    h, w, c = struct.unpack("<III", blob[5:17])
    if h < 1 or w < 1 or c < 1 or h * w * c > 2**28:
        raise FormatError(f"{path}: implausible dims {h}x{w}x{c}")
    expected = 17 + 4 * h * w * c
    if len(blob) != expected:
        raise CorruptionError(f"{path}: expected {expected} bytes, found {len(blob)}")
    data = np.frombuffer(blob[17:], dtype="<f4").reshape(h, w, c)
    if not np.isfinite(data).all():
        raise CorruptionError(f"{path}: non-finite pixel values")
    return SiteImage(data=np.ascontiguousarray(data, dtype=np.float32))


def _reject_unknown(obj: dict, allowed: set, where: str) -> None:
    unknown = sorted(set(obj) - allowed)
    if unknown:
        raise FormatError(f"{where}: unknown keys {unknown}")


def save_manifest(manifest: ExperimentManifest, path: str | Path) -> None:
    manifest.validate()
    header = {
        "kind": "manifest",
        "version": MANIFEST_VERSION,
        "config_digest": manifest.config_digest,
        "cell_lines": [
            {
                "id": line.id,
                "subject_id": line.subject_id,
                "condition": line.condition,
                "subtype": line.subtype,
                "lab_source": line.lab_source,
            }
            for line in manifest.cell_lines
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for s in manifest.sites:
            fh.write(
                json.dumps(
                    {
                        "batch": s.key.batch,
                        "plate": s.key.plate,
                        "row": s.key.row,
                        "col": s.key.col,
                        "site": s.key.site_index,
                        "cell_line": s.cell_line,
                        "is_control": s.is_control,
                        "image_path": s.image_path,
                    },
                    sort_keys=True,
                )
                + "\n"
            )


def load_manifest(path: str | Path) -> ExperimentManifest:
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    if not lines:
        raise FormatError(f"{path}: empty manifest file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: malformed header: {exc}") from exc
    if not isinstance(header, dict) or header.get("kind") != "manifest":
        raise FormatError(f"{path}: first line is not a manifest header")
    if header.get("version") != MANIFEST_VERSION:
        raise FormatError(f"{path}: unsupported manifest version {header.get('version')!r}")
    _reject_unknown(header, _HEADER_KEYS, f"{path} header")

    cell_lines = []
    for raw in header.get("cell_lines", []):
        _reject_unknown(raw, _LINE_KEYS, f"{path} cell line {raw.get('id')!r}")
        cell_lines.append(
            CellLine(
                id=raw["id"],
                subject_id=raw.get("subject_id", ""),
                condition=raw["condition"],
                subtype=raw.get("subtype", ""),
                lab_source=raw.get("lab_source", "A"),
            )
        )

    sites = []
    for i, ln in enumerate(lines[1:], start=2):
        try:
            raw = json.loads(ln)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}:{i}: malformed site line: {exc}") from exc
        _reject_unknown(raw, _SITE_KEYS, f"{path}:{i}")
        try:
            key = SiteKey(raw["batch"], raw["plate"], int(raw["row"]), int(raw["col"]), int(raw["site"]))
        except KeyError as exc:
            raise FormatError(f"{path}:{i}: missing site key field {exc}") from exc
        sites.append(
            SiteEntry(
                key=key,
                cell_line=raw["cell_line"],
                image_path=raw["image_path"],
                is_control=bool(raw["is_control"]),
            )
        )

    return ExperimentManifest(
        sites=tuple(sites),
        cell_lines=tuple(cell_lines),
        config_digest=header.get("config_digest", ""),
    )
