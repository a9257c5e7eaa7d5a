"""Dataset schema: image records, manifests, and subject-level splits.

The on-disk manifest is line-delimited JSON (``manifest.jsonl``): an
optional header line ``{"version": ...}``, then one object per image
record, then one object per longitudinal pair (recognized by its
``delta_days`` field). Record field names match the in-memory types
one-to-one. All paths inside records are relative to the directory
holding the manifest.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    DanglingPath,
    DataError,
    DegenerateSplit,
    MissingFile,
    SchemaViolation,
    UnknownModality,
)
from .hashing import sha256_hex
from .imaging import load_png, png_size, to_float

__all__ = [
    "Modality",
    "DiseaseLabel",
    "LandmarkSet",
    "BiomarkerPanel",
    "LongitudinalPair",
    "ImageRecord",
    "Manifest",
    "DEFAULT_PANEL_ID",
    "panel_names",
    "load_manifest",
    "save_manifest",
    "split_dataset",
    "load_record_image",
    "manifest_digest",
]

MANIFEST_VERSION = "1"

LANDMARK_SEMANTICS = ("sclera_spur", "angle_recess", "auxiliary")


class Modality(enum.Enum):
    """The eight imaging modalities a record can carry."""

    FUNDUS = "FUNDUS"
    OCT = "OCT"
    UBM = "UBM"
    SLIT_LAMP = "SLIT_LAMP"
    FFA = "FFA"
    MRI = "MRI"
    B_ULTRASOUND = "B_ULTRASOUND"
    EXTERNAL_EYE = "EXTERNAL_EYE"


# --- biomarker panel specs --------------------------------------------------

DEFAULT_PANEL_ID = "default-38"

_NAMED_BIOMARKERS = ("HGB", "RBC", "UA", "MCHC", "TC")
_PANELS: dict[str, tuple[str, ...]] = {
    DEFAULT_PANEL_ID: _NAMED_BIOMARKERS + tuple(f"BM{i:02d}" for i in range(6, 39)),
}


def panel_names(panel_spec_id: str = DEFAULT_PANEL_ID) -> tuple[str, ...]:
    """Ordered biomarker names of a registered panel spec."""
    try:
        return _PANELS[panel_spec_id]
    except KeyError:
        raise DataError(f"unknown biomarker panel spec {panel_spec_id!r}") from None


# --- value types ------------------------------------------------------------

@dataclass(frozen=True)
class DiseaseLabel:
    class_index: int
    class_name: str
    grade: int | None = None


@dataclass(frozen=True)
class LandmarkSet:
    """Exactly three (x, y) pixel points: sclera spur, angle recess, auxiliary."""

    points: tuple[tuple[float, float], tuple[float, float], tuple[float, float]]

    def __post_init__(self):
        if len(self.points) != 3:
            raise DataError(f"LandmarkSet needs exactly 3 points, got {len(self.points)}")

    def validate_bounds(self, height: int, width: int) -> None:
        for i, (x, y) in enumerate(self.points):
            if not (0 <= x <= width - 1 and 0 <= y <= height - 1):
                raise DataError(f"landmark {i} ({x}, {y}) outside {width}x{height} bounds")


@dataclass(frozen=True)
class BiomarkerPanel:
    values: Mapping[str, float]
    panel_spec_id: str = DEFAULT_PANEL_ID

    def __post_init__(self):
        names = panel_names(self.panel_spec_id)
        if set(self.values) != set(names):
            missing = set(names) - set(self.values)
            extra = set(self.values) - set(names)
            raise DataError(
                f"panel key set mismatch for {self.panel_spec_id!r}: "
                f"missing {sorted(missing)}, extra {sorted(extra)}"
            )
        for k, v in self.values.items():
            if not math.isfinite(v):
                raise DataError(f"biomarker {k!r} is non-finite: {v}")

    def as_vector(self) -> np.ndarray:
        """Values in panel-spec order."""
        return np.array([self.values[n] for n in panel_names(self.panel_spec_id)], dtype=np.float64)


@dataclass(frozen=True)
class LongitudinalPair:
    subject_id: str
    image_t0: str  # id of the current-visit record
    delta_days: float
    outcome: int  # 1 if progressed at the next visit

    def __post_init__(self):
        if not self.delta_days > 0:
            raise DataError(f"delta_days must be > 0, got {self.delta_days}")
        if self.outcome not in (0, 1):
            raise DataError(f"outcome must be 0 or 1, got {self.outcome}")


@dataclass
class ImageRecord:
    id: str
    subject_id: str
    modality: Modality
    image_path: str
    height: int
    width: int
    labels: DiseaseLabel | None = None
    mask_path: str | None = None
    landmarks: LandmarkSet | None = None
    biomarkers: BiomarkerPanel | None = None
    visit_date: str | None = None
    synthetic: bool = False


@dataclass
class Manifest:
    records: list[ImageRecord]
    pairs: list[LongitudinalPair] = field(default_factory=list)
    version: str = MANIFEST_VERSION
    root_dir: Path = Path(".")

    def __len__(self) -> int:
        return len(self.records)

    def record_ids(self) -> list[str]:
        return [r.id for r in self.records]

    def by_id(self) -> dict[str, ImageRecord]:
        return {r.id: r for r in self.records}

    def subjects(self) -> list[str]:
        seen: dict[str, None] = {}
        for r in self.records:
            seen.setdefault(r.subject_id, None)
        return list(seen)


# --- serialization ----------------------------------------------------------

_RECORD_FIELDS = {
    "id", "subject_id", "modality", "image_path", "height", "width",
    "labels", "mask_path", "landmarks", "biomarkers", "visit_date", "synthetic",
}
_PAIR_FIELDS = {"subject_id", "image_t0", "delta_days", "outcome"}


def _record_to_obj(r: ImageRecord) -> dict:
    obj: dict = {
        "id": r.id,
        "subject_id": r.subject_id,
        "modality": r.modality.value,
        "image_path": r.image_path,
        "height": r.height,
        "width": r.width,
    }
    if r.labels is not None:
        lab = {"class_index": r.labels.class_index, "class_name": r.labels.class_name}
        if r.labels.grade is not None:
            lab["grade"] = r.labels.grade
        obj["labels"] = lab
    if r.mask_path is not None:
        obj["mask_path"] = r.mask_path
    if r.landmarks is not None:
        obj["landmarks"] = {"points": [[float(x), float(y)] for x, y in r.landmarks.points]}
    if r.biomarkers is not None:
        obj["biomarkers"] = {
            "values": {k: float(v) for k, v in r.biomarkers.values.items()},
            "panel_spec_id": r.biomarkers.panel_spec_id,
        }
    if r.visit_date is not None:
        obj["visit_date"] = r.visit_date
    if r.synthetic:
        obj["synthetic"] = True
    return obj


def _require(obj: dict, key: str, line: int):
    if key not in obj:
        raise SchemaViolation(line, key, "missing required field")
    return obj[key]


def _record_from_obj(obj: dict, line: int) -> ImageRecord:
    unknown = set(obj) - _RECORD_FIELDS
    if unknown:
        raise SchemaViolation(line, sorted(unknown)[0], "unknown field")
    modality_raw = _require(obj, "modality", line)
    try:
        modality = Modality(modality_raw)
    except ValueError:
        raise UnknownModality(modality_raw, line) from None

    labels = None
    if obj.get("labels") is not None:
        lab = obj["labels"]
        unknown = set(lab) - {"class_index", "class_name", "grade"}
        if unknown:
            raise SchemaViolation(line, f"labels.{sorted(unknown)[0]}", "unknown field")
        labels = DiseaseLabel(
            class_index=int(_require(lab, "class_index", line)),
            class_name=str(_require(lab, "class_name", line)),
            grade=None if lab.get("grade") is None else int(lab["grade"]),
        )
    landmarks = None
    if obj.get("landmarks") is not None:
        pts = _require(obj["landmarks"], "points", line)
        if len(pts) != 3:
            raise SchemaViolation(line, "landmarks.points", f"need 3 points, got {len(pts)}")
        landmarks = LandmarkSet(points=tuple((float(p[0]), float(p[1])) for p in pts))
    biomarkers = None
    if obj.get("biomarkers") is not None:
        bio = obj["biomarkers"]
        try:
            biomarkers = BiomarkerPanel(
                values={str(k): float(v) for k, v in _require(bio, "values", line).items()},
                panel_spec_id=str(bio.get("panel_spec_id", DEFAULT_PANEL_ID)),
            )
        except DataError as e:
            raise SchemaViolation(line, "biomarkers", str(e)) from None

    try:
        height = int(_require(obj, "height", line))
        width = int(_require(obj, "width", line))
    except (TypeError, ValueError):
        raise SchemaViolation(line, "height", "height/width must be integers") from None

    return ImageRecord(
        id=str(_require(obj, "id", line)),
        subject_id=str(_require(obj, "subject_id", line)),
        modality=modality,
        image_path=str(_require(obj, "image_path", line)),
        height=height,
        width=width,
        labels=labels,
        mask_path=None if obj.get("mask_path") is None else str(obj["mask_path"]),
        landmarks=landmarks,
        biomarkers=biomarkers,
        visit_date=None if obj.get("visit_date") is None else str(obj["visit_date"]),
        synthetic=bool(obj.get("synthetic", False)),
    )


def _pair_from_obj(obj: dict, line: int) -> LongitudinalPair:
    unknown = set(obj) - _PAIR_FIELDS
    if unknown:
        raise SchemaViolation(line, sorted(unknown)[0], "unknown field")
    try:
        return LongitudinalPair(
            subject_id=str(_require(obj, "subject_id", line)),
            image_t0=str(_require(obj, "image_t0", line)),
            delta_days=float(_require(obj, "delta_days", line)),
            outcome=int(_require(obj, "outcome", line)),
        )
    except DataError as e:
        raise SchemaViolation(line, "delta_days", str(e)) from None


def save_manifest(manifest: Manifest, path: str | Path) -> Path:
    """Write ``manifest.jsonl``: header line, record lines, pair lines."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [json.dumps({"version": manifest.version}, sort_keys=True)]
    lines += [json.dumps(_record_to_obj(r), sort_keys=True) for r in manifest.records]
    for p in manifest.pairs:
        lines.append(json.dumps(
            {"subject_id": p.subject_id, "image_t0": p.image_t0,
             "delta_days": p.delta_days, "outcome": p.outcome},
            sort_keys=True,
        ))
    path.write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")
    return path


def load_manifest(path: str | Path, check_files: bool = True) -> Manifest:
    """Load and eagerly validate a line-delimited JSON manifest.

    Checks: unique ids, known modalities, referenced files present with
    matching PNG dimensions (header read only), pairs referencing
    existing FUNDUS records, landmark bounds.
    """
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"manifest not found: {path}")
    root = path.parent

    records: list[ImageRecord] = []
    pairs: list[LongitudinalPair] = []
    version = MANIFEST_VERSION
    for line_no, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        raw = raw.strip()
        if not raw:
            continue
        try:
            obj = json.loads(raw)
        except json.JSONDecodeError as e:
            raise SchemaViolation(line_no, "<json>", str(e)) from None
        if not isinstance(obj, dict):
            raise SchemaViolation(line_no, "<json>", "each line must be a JSON object")
        if set(obj) == {"version"}:
            version = str(obj["version"])
        elif "delta_days" in obj:
            pairs.append(_pair_from_obj(obj, line_no))
        else:
            records.append(_record_from_obj(obj, line_no))

    manifest = Manifest(records=records, pairs=pairs, version=version, root_dir=root)
    _validate_manifest(manifest, check_files=check_files)
    return manifest


def _validate_manifest(manifest: Manifest, check_files: bool) -> None:
    seen: set[str] = set()
    for r in manifest.records:
        if r.id in seen:
            raise DataError(f"duplicate record id {r.id!r}")
        seen.add(r.id)
        if r.landmarks is not None:
            r.landmarks.validate_bounds(r.height, r.width)
        if check_files:
            img = manifest.root_dir / r.image_path
            if not img.is_file():
                raise DanglingPath(r.id, r.image_path)
            h, w = png_size(img)
            if (h, w) != (r.height, r.width):
                raise DataError(
                    f"record {r.id!r}: image is {h}x{w}, manifest declares {r.height}x{r.width}"
                )
            if r.mask_path is not None and not (manifest.root_dir / r.mask_path).is_file():
                raise DanglingPath(r.id, r.mask_path)
    by_id = manifest.by_id()
    for p in manifest.pairs:
        rec = by_id.get(p.image_t0)
        if rec is None:
            raise DanglingPath(p.image_t0, "<pair image_t0>")
        if rec.modality is not Modality.FUNDUS:
            raise DataError(f"pair for {p.image_t0!r}: forecasting pairs must be FUNDUS records")


def load_record_image(manifest: Manifest, record: ImageRecord) -> np.ndarray:
    """Decode a record's image to float64 (H, W, C) in [0, 1]."""
    arr = load_png(manifest.root_dir / record.image_path)
    if arr.shape[:2] != (record.height, record.width):
        raise DataError(
            f"record {record.id!r}: decoded {arr.shape[:2]}, declared "
            f"({record.height}, {record.width})"
        )
    return to_float(arr)


def load_record_mask(manifest: Manifest, record: ImageRecord) -> np.ndarray:
    """Decode a record's mask to int64 (H, W) of class indices."""
    if record.mask_path is None:
        raise DataError(f"record {record.id!r} has no mask")
    arr = load_png(manifest.root_dir / record.mask_path)
    if arr.ndim != 2:
        raise DataError(f"mask for {record.id!r} must be single-channel")
    return arr.astype(np.int64)


def manifest_digest(manifest: Manifest) -> str:
    """Content digest over records and pairs (order-sensitive)."""
    payload = json.dumps(
        {
            "version": manifest.version,
            "records": [_record_to_obj(r) for r in manifest.records],
            "pairs": [[p.subject_id, p.image_t0, p.delta_days, p.outcome] for p in manifest.pairs],
        },
        sort_keys=True,
    )
    return sha256_hex(payload.encode("utf-8"))


# --- splitting --------------------------------------------------------------

def split_dataset(
    manifest: Manifest,
    fractions: tuple[float, float, float],
    seed: int,
) -> tuple[Manifest, Manifest, Manifest]:
    """Deterministic subject-level split into (train, val, test).

    All records of one subject land in the same split. Subject counts per
    split are assigned by largest-remainder apportionment of the shuffled
    subject list, so equal-sized subjects give exact fractions.
    """
    if len(fractions) != 3:
        raise DataError(f"need 3 fractions, got {len(fractions)}")
    if any(f < 0 for f in fractions):
        raise DataError(f"fractions must be nonnegative: {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise DataError(f"fractions must sum to 1 within 1e-9, got {sum(fractions)}")

    subjects = sorted({r.subject_id for r in manifest.records})
    rng = np.random.default_rng(seed)
    order = [subjects[i] for i in rng.permutation(len(subjects))]

    n = len(order)
    quotas = [f * n for f in fractions]
    counts = [int(math.floor(q)) for q in quotas]
    remainders = [q - c for q, c in zip(quotas, counts)]
    for _ in range(n - sum(counts)):
        i = max(range(3), key=lambda j: (remainders[j], -j))
        counts[i] += 1
        remainders[i] = -1.0

    if n >= 3:
        for frac, count in zip(fractions, counts):
            if frac > 1e-12 and count == 0:
                raise DegenerateSplit(
                    f"fraction {frac} yields an empty split for {n} subjects"
                )

    assignment: dict[str, int] = {}
    start = 0
    for split_idx, count in enumerate(counts):
        for s in order[start:start + count]:
            assignment[s] = split_idx
        start += count

    outs: list[Manifest] = []
    for split_idx in range(3):
        recs = [r for r in manifest.records if assignment[r.subject_id] == split_idx]
        prs = [p for p in manifest.pairs if assignment.get(p.subject_id) == split_idx]
        outs.append(Manifest(records=recs, pairs=prs, version=manifest.version,
                             root_dir=manifest.root_dir))
    return outs[0], outs[1], outs[2]


def subset_manifest(manifest: Manifest, records: Iterable[ImageRecord]) -> Manifest:
    """A manifest view over a subset of records (pairs restricted to kept ids)."""
    recs = list(records)
    ids = {r.id for r in recs}
    prs = [p for p in manifest.pairs if p.image_t0 in ids]
    return Manifest(records=recs, pairs=prs, version=manifest.version, root_dir=manifest.root_dir)
