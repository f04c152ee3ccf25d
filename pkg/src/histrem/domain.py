"""Domain types: Geboes grades, binary labels, the dataset hierarchy, splits.

The manifest format is UTF-8 JSON lines, one record per line, with a `kind`
field of `patient`, `segment`, or `image`. Segment records carry the Geboes
grade as a string; image records carry a path relative to the manifest's
directory and an optional `synthetic` flag. Serialization is byte-stable so
manifests can be golden-file tested.
"""

from __future__ import annotations

import functools
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .seeding import rng_for

GRADE_MAJORS = ("0", "1", "2A", "2B", "3", "4", "5")
MAX_SUBSCORE = 3


class MalformedGrade(ValueError):
    """Raised for strings that are not valid Geboes grade tokens."""


class ManifestError(ValueError):
    """Base class for manifest parsing/linking failures."""


class MissingField(ManifestError):
    pass


class DanglingReference(ManifestError):
    pass


class DuplicateId(ManifestError):
    pass


class SizeMismatch(ValueError):
    """Split sizes do not sum to the number of split units."""


@functools.total_ordering
@dataclass(frozen=True)
class GeboesGrade:
    """One Geboes grade token: a major grade plus an optional subscore.

    Majors are totally ordered 0 < 1 < 2A < 2B < 3 < 4 < 5; within a major,
    ordering follows the subscore. A missing subscore parses as 0, so "3"
    sorts below "3.2".
    """

    major: str
    subscore: int = 0

    def __post_init__(self):
        if self.major not in GRADE_MAJORS:
            raise MalformedGrade(f"unknown major grade {self.major!r}")
        if not 0 <= self.subscore <= MAX_SUBSCORE:
            raise MalformedGrade(f"subscore out of range: {self.subscore}")

    @property
    def _key(self) -> tuple[int, int]:
        return (GRADE_MAJORS.index(self.major), self.subscore)

    def __lt__(self, other: "GeboesGrade") -> bool:
        return self._key < other._key

    def __str__(self) -> str:
        if self.subscore == 0:
            return self.major
        return f"{self.major}.{self.subscore}"


#: Activity threshold: grades below this are histologic remission.
ACTIVITY_THRESHOLD = GeboesGrade("3", 2)


def all_grades() -> list[GeboesGrade]:
    """Every representable grade token, in ascending order (28 total)."""
    return [
        GeboesGrade(major, sub)
        for major in GRADE_MAJORS
        for sub in range(MAX_SUBSCORE + 1)
    ]


def parse_grade(s: str) -> GeboesGrade:
    """Parse a grade string such as "2B", "3.2", or "0".

    Raises MalformedGrade for anything outside `<major>` or
    `<major>.<digit>` with digit in 0..3.
    """
    if not isinstance(s, str):
        raise MalformedGrade(f"grade must be a string, got {type(s).__name__}")
    major, dot, sub = s.partition(".")
    if major not in GRADE_MAJORS:
        raise MalformedGrade(f"invalid grade string {s!r}")
    if not dot:
        return GeboesGrade(major, 0)
    if len(sub) != 1 or not sub.isdigit() or int(sub) > MAX_SUBSCORE:
        raise MalformedGrade(f"invalid grade string {s!r}")
    return GeboesGrade(major, int(sub))


class BinaryLabel(int):
    """Two-valued label; remission is the negative class everywhere."""

    def __new__(cls, value: int):
        if value not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {value}")
        return super().__new__(cls, value)

    def __repr__(self) -> str:
        return "REMISSION" if self == 0 else "ACTIVITY"


REMISSION = BinaryLabel(0)
ACTIVITY = BinaryLabel(1)


def binarize(grade: GeboesGrade) -> BinaryLabel:
    """Remission iff the grade sorts strictly below 3.2."""
    return REMISSION if grade < ACTIVITY_THRESHOLD else ACTIVITY


@dataclass
class ImageRecord:
    image_id: str
    segment_id: str
    path: str
    synthetic: bool = False
    pixels: np.ndarray | None = None  # [H,W,3] uint8, loaded lazily

    def load_pixels(self, root: Path) -> np.ndarray:
        if self.pixels is None:
            from PIL import Image

            with Image.open(Path(root) / self.path) as im:
                self.pixels = np.asarray(im.convert("RGB"), dtype=np.uint8)
        return self.pixels


@dataclass
class SegmentRecord:
    segment_id: str
    patient_id: str
    grade: GeboesGrade
    label: BinaryLabel
    image_ids: list[str] = field(default_factory=list)


@dataclass
class PatientRecord:
    patient_id: str
    segment_ids: list[str] = field(default_factory=list)
    metadata: dict[str, str] = field(default_factory=dict)


@dataclass
class Dataset:
    """Fully linked manifest contents plus the directory paths resolve from."""

    root: Path
    patients: dict[str, PatientRecord]
    segments: dict[str, SegmentRecord]
    images: dict[str, ImageRecord]

    def segment_image_ids(self, segment_id: str) -> list[str]:
        return self.segments[segment_id].image_ids


def _require(record: dict, key: str, lineno: int) -> object:
    if key not in record:
        raise MissingField(f"line {lineno}: {record.get('kind', '?')} record missing {key!r}")
    return record[key]


def load_manifest(path: str | Path) -> Dataset:
    """Load and link a manifest, validating the full hierarchy.

    Errors name the offending line: MissingField, DuplicateId, or
    DanglingReference (image -> segment or segment -> patient).
    """
    path = Path(path)
    patients: dict[str, PatientRecord] = {}
    segments: dict[str, SegmentRecord] = {}
    images: dict[str, ImageRecord] = {}
    seg_lines: dict[str, int] = {}
    img_lines: dict[str, int] = {}

    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"line {lineno}: not valid JSON ({exc.msg})") from exc
            kind = _require(record, "kind", lineno)
            if kind == "patient":
                pid = str(_require(record, "patient_id", lineno))
                if pid in patients:
                    raise DuplicateId(f"line {lineno}: duplicate patient_id {pid!r}")
                patients[pid] = PatientRecord(pid, metadata=dict(record.get("metadata", {})))
            elif kind == "segment":
                sid = str(_require(record, "segment_id", lineno))
                if sid in segments:
                    raise DuplicateId(f"line {lineno}: duplicate segment_id {sid!r}")
                grade = parse_grade(str(_require(record, "geboes", lineno)))
                segments[sid] = SegmentRecord(
                    segment_id=sid,
                    patient_id=str(_require(record, "patient_id", lineno)),
                    grade=grade,
                    label=binarize(grade),
                )
                seg_lines[sid] = lineno
            elif kind == "image":
                iid = str(_require(record, "image_id", lineno))
                if iid in images:
                    raise DuplicateId(f"line {lineno}: duplicate image_id {iid!r}")
                images[iid] = ImageRecord(
                    image_id=iid,
                    segment_id=str(_require(record, "segment_id", lineno)),
                    path=str(_require(record, "path", lineno)),
                    synthetic=bool(record.get("synthetic", False)),
                )
                img_lines[iid] = lineno
            else:
                raise ManifestError(f"line {lineno}: unknown record kind {kind!r}")

    for sid, seg in segments.items():
        if seg.patient_id not in patients:
            raise DanglingReference(
                f"line {seg_lines[sid]}: segment {sid!r} references missing patient {seg.patient_id!r}"
            )
        patients[seg.patient_id].segment_ids.append(sid)
    for iid, img in images.items():
        if img.segment_id not in segments:
            raise DanglingReference(
                f"line {img_lines[iid]}: image {iid!r} references missing segment {img.segment_id!r}"
            )
        segments[img.segment_id].image_ids.append(iid)

    for pat in patients.values():
        pat.segment_ids.sort()
        if not pat.segment_ids:
            raise MissingField(f"patient {pat.patient_id!r}: no segment records reference it")
    for seg in segments.values():
        seg.image_ids.sort()
        if not seg.image_ids:
            raise MissingField(f"segment {seg.segment_id!r}: no image records reference it")

    return Dataset(root=path.parent, patients=patients, segments=segments, images=images)


def manifest_lines(
    patients: list[PatientRecord],
    segments: list[SegmentRecord],
    images: list[ImageRecord],
) -> list[str]:
    """Canonical byte-stable manifest serialization (sorted ids, sorted keys)."""
    out = []
    for p in sorted(patients, key=lambda p: p.patient_id):
        rec = {"kind": "patient", "patient_id": p.patient_id, "metadata": p.metadata}
        out.append(json.dumps(rec, sort_keys=True, separators=(",", ":")))
    for s in sorted(segments, key=lambda s: s.segment_id):
        rec = {
            "kind": "segment",
            "segment_id": s.segment_id,
            "patient_id": s.patient_id,
            "geboes": str(s.grade),
        }
        out.append(json.dumps(rec, sort_keys=True, separators=(",", ":")))
    for im in sorted(images, key=lambda i: i.image_id):
        rec = {
            "kind": "image",
            "image_id": im.image_id,
            "segment_id": im.segment_id,
            "path": im.path,
        }
        if im.synthetic:
            rec["synthetic"] = True
        out.append(json.dumps(rec, sort_keys=True, separators=(",", ":")))
    return out


@dataclass(frozen=True)
class DatasetSplit:
    train: frozenset[str]
    validation: frozenset[str]
    test: frozenset[str]

    def all_ids(self) -> frozenset[str]:
        return self.train | self.validation | self.test


def make_split(
    segments: dict[str, SegmentRecord],
    sizes: tuple[int, int, int],
    seed: int,
    unit: str = "segment",
) -> DatasetSplit:
    """Random disjoint train/validation/test split, deterministic per seed.

    With unit="segment" the sizes count segments; with unit="patient" they
    count patients and no patient's segments straddle splits.
    """
    n_train, n_val, n_test = sizes
    if unit == "segment":
        unit_ids = sorted(segments)
        members = {sid: [sid] for sid in unit_ids}
    elif unit == "patient":
        members: dict[str, list[str]] = {}
        for seg in segments.values():
            members.setdefault(seg.patient_id, []).append(seg.segment_id)
        unit_ids = sorted(members)
    else:
        raise ValueError(f"unknown split unit {unit!r}")

    if n_train + n_val + n_test != len(unit_ids):
        raise SizeMismatch(
            f"sizes {sizes} sum to {n_train + n_val + n_test}, "
            f"but there are {len(unit_ids)} {unit} units"
        )
    order = list(unit_ids)
    rng_for(seed, "split", unit).shuffle(order)

    def collect(units: list[str]) -> frozenset[str]:
        return frozenset(sid for u in units for sid in members[u])

    return DatasetSplit(
        train=collect(order[:n_train]),
        validation=collect(order[n_train : n_train + n_val]),
        test=collect(order[n_train + n_val :]),
    )


def split_lines(split: DatasetSplit) -> list[str]:
    """Split manifest: three lines, each `name: id,id,...` with sorted ids."""
    return [
        "train: " + ",".join(sorted(split.train)),
        "val: " + ",".join(sorted(split.validation)),
        "test: " + ",".join(sorted(split.test)),
    ]


def parse_split(text: str) -> DatasetSplit:
    parts: dict[str, frozenset[str]] = {}
    for line in text.strip().splitlines():
        name, _, ids = line.partition(":")
        ids = ids.strip()
        parts[name.strip()] = frozenset(ids.split(",")) if ids else frozenset()
    try:
        return DatasetSplit(parts["train"], parts["val"], parts["test"])
    except KeyError as exc:
        raise ManifestError(f"split manifest missing section {exc}") from exc
