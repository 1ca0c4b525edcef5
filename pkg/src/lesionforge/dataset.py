"""Annotation store: volumes, 2D and 3D box records, CSV ingestion.

A store lives on disk as three CSV files in one directory::

    volumes.csv  volume_id,patient_id,num_slices,split
    ann2d.csv    volume_id,slice_index,x1,y1,x2,y2,tag,source[,lesion_id,copies]
    ann3d.csv    volume_id,x1,y1,x2,y2,z1,z2,tag,source

``lesion_id`` and ``copies`` are only written when some record needs them
(mined boxes grouped into a 3D lesion, upsampling repetition counter); files
without them load with the defaults.
"""

from __future__ import annotations

import csv
import enum
import io
import logging
import os
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

from lesionforge.geometry import (
    CLASSES,
    Box2D,
    Box3D,
    ClassLabel,
    exceeds,
    iou_2d,
)

log = logging.getLogger(__name__)

DEFAULT_MAP_IOU = 0.10
COORD_DECIMALS = 6

VOLUMES_FILE = "volumes.csv"
ANN2D_FILE = "ann2d.csv"
ANN3D_FILE = "ann3d.csv"

VOLUME_COLUMNS = ("volume_id", "patient_id", "num_slices", "split")
ANN2D_COLUMNS = ("volume_id", "slice_index", "x1", "y1", "x2", "y2", "tag", "source")
ANN2D_EXTRA = ("lesion_id", "copies")
ANN3D_COLUMNS = ("volume_id", "x1", "y1", "x2", "y2", "z1", "z2", "tag", "source")


class Split(str, enum.Enum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"
    UNLABELED_POOL = "unlabeled_pool"

    def __str__(self) -> str:
        return self.value


class Source(str, enum.Enum):
    GROUND_TRUTH = "ground_truth"
    MINED = "mined"

    def __str__(self) -> str:
        return self.value


class SchemaError(ValueError):
    """A CSV row that violates the store schema."""

    def __init__(self, file: str, line: int, column: str, message: str):
        self.file = file
        self.line = line
        self.column = column
        super().__init__(f"{file}: line {line}, column {column!r}: {message}")


class StoreIntegrityError(ValueError):
    pass


@dataclass(frozen=True, order=True)
class VolumeMeta:
    volume_id: str
    patient_id: str
    num_slices: int
    split: Split

    def __post_init__(self) -> None:
        if not self.volume_id:
            raise ValueError("empty volume_id")
        if self.num_slices < 1:
            raise ValueError(f"{self.volume_id}: num_slices must be >= 1")


@dataclass(frozen=True)
class Annotation2D:
    volume_id: str
    slice_index: int
    box: Box2D
    tag: Optional[ClassLabel] = None
    source: Source = Source.GROUND_TRUTH
    lesion_id: str = ""
    copies: int = 1

    def __post_init__(self) -> None:
        if self.slice_index < 0:
            raise ValueError("negative slice_index")
        if self.copies < 1:
            raise ValueError("copies must be >= 1")

    def sort_key(self) -> tuple:
        return (
            self.volume_id,
            self.slice_index,
            self.box.as_tuple(),
            self.tag.value if self.tag else "",
            self.source.value,
            self.lesion_id,
            self.copies,
        )

    def identity(self) -> tuple:
        """What makes two mined boxes duplicates: volume, slice, coordinates, tag."""
        return (self.volume_id, self.slice_index, self.box.as_tuple(), self.tag)


@dataclass(frozen=True)
class Annotation3D:
    volume_id: str
    box: Box3D
    tag: Optional[ClassLabel] = None
    source: Source = Source.GROUND_TRUTH

    def sort_key(self) -> tuple:
        return (self.volume_id, self.box.as_tuple(), self.tag.value if self.tag else "", self.source.value)


def quantize(v: float) -> float:
    return round(float(v), COORD_DECIMALS)


def quantize_box(b: Box2D) -> Box2D:
    return Box2D(*(quantize(v) for v in b.as_tuple()))


@dataclass(frozen=True)
class AnnotationStore:
    """Immutable collection of volumes and annotations.

    Records are kept in a canonical sorted order, so two stores holding the
    same records compare equal regardless of how they were built.
    """

    volumes: tuple[VolumeMeta, ...] = ()
    ann2d: tuple[Annotation2D, ...] = ()
    ann3d: tuple[Annotation3D, ...] = ()
    _index: dict = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "volumes", tuple(sorted(self.volumes)))
        object.__setattr__(self, "ann2d", tuple(sorted(self.ann2d, key=Annotation2D.sort_key)))
        object.__setattr__(self, "ann3d", tuple(sorted(self.ann3d, key=Annotation3D.sort_key)))
        object.__setattr__(self, "_index", {v.volume_id: v for v in self.volumes})
        self._validate()

    def _validate(self) -> None:
        if len(self._index) != len(self.volumes):
            dup = [k for k, n in Counter(v.volume_id for v in self.volumes).items() if n > 1]
            raise StoreIntegrityError(f"duplicate volume ids: {dup}")
        for a in self.ann2d:
            vol = self._index.get(a.volume_id)
            if vol is None:
                raise StoreIntegrityError(f"2D annotation references unknown volume {a.volume_id!r}")
            if a.slice_index >= vol.num_slices:
                raise StoreIntegrityError(
                    f"{a.volume_id}: slice_index {a.slice_index} >= num_slices {vol.num_slices}"
                )
            if (
                a.source is Source.GROUND_TRUTH
                and a.tag is None
                and vol.split in (Split.VAL, Split.TEST)
            ):
                raise StoreIntegrityError(
                    f"{a.volume_id}: untagged ground-truth 2D annotation in {vol.split} split"
                )
        for a in self.ann3d:
            vol = self._index.get(a.volume_id)
            if vol is None:
                raise StoreIntegrityError(f"3D annotation references unknown volume {a.volume_id!r}")
            if a.box.z2 >= vol.num_slices:
                raise StoreIntegrityError(
                    f"{a.volume_id}: z2 {a.box.z2} >= num_slices {vol.num_slices}"
                )
        for name, recs in (("2D", self.ann2d), ("3D", self.ann3d)):
            for prev, cur in zip(recs, recs[1:]):
                if prev == cur:
                    raise StoreIntegrityError(f"duplicate {name} annotation {cur}")

    # -- lookups -----------------------------------------------------------

    def volume(self, volume_id: str) -> VolumeMeta:
        try:
            return self._index[volume_id]
        except KeyError:
            raise KeyError(f"unknown volume {volume_id!r}") from None

    def has_volume(self, volume_id: str) -> bool:
        return volume_id in self._index

    def volume_ids(self, split: Split | str | None = None) -> list[str]:
        if split is None:
            return [v.volume_id for v in self.volumes]
        split = Split(split)
        return [v.volume_id for v in self.volumes if v.split is split]

    def patients(self) -> set[str]:
        return {v.patient_id for v in self.volumes}

    def ann2d_by_volume(self) -> dict[str, list[Annotation2D]]:
        out: dict[str, list[Annotation2D]] = {}
        for a in self.ann2d:
            out.setdefault(a.volume_id, []).append(a)
        return out

    def ann3d_by_volume(self) -> dict[str, list[Annotation3D]]:
        out: dict[str, list[Annotation3D]] = {}
        for a in self.ann3d:
            out.setdefault(a.volume_id, []).append(a)
        return out

    def ground_truth(self) -> "AnnotationStore":
        return replace_records(
            self,
            ann2d=[a for a in self.ann2d if a.source is Source.GROUND_TRUTH],
            ann3d=[a for a in self.ann3d if a.source is Source.GROUND_TRUTH],
        )

    def select(self, splits: Iterable[Split | str] | None = None, volume_ids: Iterable[str] | None = None) -> "AnnotationStore":
        """Sub-store restricted to the given splits and/or volumes."""
        keep = set(self._index)
        if splits is not None:
            wanted = {Split(s) for s in splits}
            keep &= {v.volume_id for v in self.volumes if v.split in wanted}
        if volume_ids is not None:
            keep &= set(volume_ids)
        return AnnotationStore(
            volumes=tuple(v for v in self.volumes if v.volume_id in keep),
            ann2d=tuple(a for a in self.ann2d if a.volume_id in keep),
            ann3d=tuple(a for a in self.ann3d if a.volume_id in keep),
        )

    def union(self, other: "AnnotationStore") -> "AnnotationStore":
        vols = {v.volume_id: v for v in self.volumes}
        for v in other.volumes:
            if v.volume_id in vols and vols[v.volume_id] != v:
                raise StoreIntegrityError(f"conflicting metadata for volume {v.volume_id!r}")
            vols[v.volume_id] = v
        return AnnotationStore(
            volumes=tuple(vols.values()),
            ann2d=tuple(dict.fromkeys(self.ann2d + other.ann2d)),
            ann3d=tuple(dict.fromkeys(self.ann3d + other.ann3d)),
        )


def replace_records(
    store: AnnotationStore,
    ann2d: Optional[Iterable[Annotation2D]] = None,
    ann3d: Optional[Iterable[Annotation3D]] = None,
) -> AnnotationStore:
    return AnnotationStore(
        volumes=store.volumes,
        ann2d=tuple(store.ann2d if ann2d is None else ann2d),
        ann3d=tuple(store.ann3d if ann3d is None else ann3d),
    )


# --------------------------------------------------------------------------
# CSV I/O
# --------------------------------------------------------------------------


def format_number(v: float) -> str:
    """Fixed 6-decimal formatting with trailing zeros removed."""
    text = f"{quantize(v):.{COORD_DECIMALS}f}".rstrip("0").rstrip(".")
    return "0" if text in ("-0", "") else text


def _writer(fh) -> "csv._writer":
    return csv.writer(fh, lineterminator="\n")


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = _writer(fh)
        w.writerow(header)
        w.writerows(rows)


def save_store(store: AnnotationStore, path: str | os.PathLike) -> Path:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    write_csv(
        root / VOLUMES_FILE,
        VOLUME_COLUMNS,
        ((v.volume_id, v.patient_id, v.num_slices, v.split.value) for v in store.volumes),
    )
    extra = any(a.lesion_id or a.copies != 1 for a in store.ann2d)
    header2d = ANN2D_COLUMNS + (ANN2D_EXTRA if extra else ())
    rows2d = []
    for a in store.ann2d:
        row = [a.volume_id, a.slice_index, *map(format_number, a.box.as_tuple()),
               a.tag.value if a.tag else "", a.source.value]
        if extra:
            row += [a.lesion_id, a.copies]
        rows2d.append(row)
    write_csv(root / ANN2D_FILE, header2d, rows2d)
    write_csv(
        root / ANN3D_FILE,
        ANN3D_COLUMNS,
        (
            [a.volume_id, *map(format_number, a.box.as_tuple()[:4]), a.box.z1, a.box.z2,
             a.tag.value if a.tag else "", a.source.value]
            for a in store.ann3d
        ),
    )
    return root


class _RowReader:
    """Parses one CSV file and converts fields with row/column diagnostics."""

    def __init__(self, path: Path, required: Sequence[str], optional: Sequence[str] = ()):
        self.path = path
        self.name = path.name
        self.required = tuple(required)
        self.optional = tuple(optional)

    def rows(self):
        try:
            text = self.path.read_text(encoding="utf-8")
        except UnicodeDecodeError as exc:
            raise SchemaError(self.name, 1, "", f"not valid UTF-8 ({exc.reason})") from None
        reader = csv.reader(io.StringIO(text, newline=""))
        header = next(reader, None)
        if header is None:
            raise SchemaError(self.name, 1, "", "missing header row")
        header = [h.strip() for h in header]
        missing = [c for c in self.required if c not in header]
        if missing:
            raise SchemaError(self.name, 1, missing[0], "required column missing from header")
        unknown = [c for c in header if c not in self.required + self.optional]
        if unknown:
            raise SchemaError(self.name, 1, unknown[0], "unknown column")
        for line, raw in enumerate(reader, start=2):
            if not raw or (len(raw) == 1 and not raw[0].strip()):
                continue
            if len(raw) != len(header):
                raise SchemaError(self.name, line, "", f"expected {len(header)} fields, got {len(raw)}")
            yield line, dict(zip(header, (f.strip() for f in raw)))

    def _fail(self, line: int, column: str, msg: str):
        raise SchemaError(self.name, line, column, msg)

    def text(self, line, row, col, allow_empty=False) -> str:
        v = row[col]
        if not v and not allow_empty:
            self._fail(line, col, "empty value")
        return v

    def integer(self, line, row, col) -> int:
        try:
            return int(row[col])
        except ValueError:
            self._fail(line, col, f"not an integer: {row[col]!r}")

    def real(self, line, row, col) -> float:
        try:
            v = float(row[col])
        except ValueError:
            self._fail(line, col, f"not a number: {row[col]!r}")
        if v != v or v in (float("inf"), float("-inf")):
            self._fail(line, col, "non-finite number")
        return v

    def tag(self, line, row, col="tag") -> Optional[ClassLabel]:
        v = row[col]
        if not v:
            return None
        try:
            return ClassLabel.parse(v)
        except ValueError as exc:
            self._fail(line, col, str(exc))

    def enum(self, line, row, col, kind):
        try:
            return kind(row[col])
        except ValueError:
            allowed = ", ".join(k.value for k in kind)
            self._fail(line, col, f"{row[col]!r} not one of {{{allowed}}}")

    def build(self, line, col, factory, *args):
        try:
            return factory(*args)
        except ValueError as exc:
            self._fail(line, col, str(exc))


def load_store(path: str | os.PathLike) -> AnnotationStore:
    """Read and validate a store directory; raises :class:`SchemaError`."""
    root = Path(path)
    vpath = root / VOLUMES_FILE
    if not vpath.is_file():
        raise SchemaError(VOLUMES_FILE, 0, "", f"file not found in {root}")

    r = _RowReader(vpath, VOLUME_COLUMNS)
    volumes: list[VolumeMeta] = []
    lines: dict[str, int] = {}
    for line, row in r.rows():
        vid = r.text(line, row, "volume_id")
        if vid in lines:
            r._fail(line, "volume_id", f"duplicate volume id (first on line {lines[vid]})")
        lines[vid] = line
        n = r.integer(line, row, "num_slices")
        split = r.enum(line, row, "split", Split)
        volumes.append(r.build(line, "num_slices", VolumeMeta, vid, r.text(line, row, "patient_id"), n, split))
    index = {v.volume_id: v for v in volumes}

    ann2d: list[Annotation2D] = []
    seen2d: dict[Annotation2D, int] = {}
    p2 = root / ANN2D_FILE
    if p2.is_file():
        r = _RowReader(p2, ANN2D_COLUMNS, ANN2D_EXTRA)
        for line, row in r.rows():
            vid = r.text(line, row, "volume_id")
            vol = index.get(vid)
            if vol is None:
                r._fail(line, "volume_id", f"unknown volume {vid!r}")
            z = r.integer(line, row, "slice_index")
            if not 0 <= z < vol.num_slices:
                r._fail(line, "slice_index", f"{z} outside [0, {vol.num_slices})")
            box = r.build(line, "x1", Box2D, *(r.real(line, row, c) for c in ("x1", "y1", "x2", "y2")))
            tag = r.tag(line, row)
            source = r.enum(line, row, "source", Source)
            if source is Source.GROUND_TRUTH and tag is None and vol.split in (Split.VAL, Split.TEST):
                r._fail(line, "tag", f"ground-truth annotation in {vol.split} split must be tagged")
            lesion_id = row.get("lesion_id", "")
            copies = r.integer(line, row, "copies") if row.get("copies", "") else 1
            rec = r.build(line, "copies", Annotation2D, vid, z, box, tag, source, lesion_id, copies)
            if rec in seen2d:
                r._fail(line, "", f"duplicate of line {seen2d[rec]}")
            seen2d[rec] = line
            ann2d.append(rec)

    ann3d: list[Annotation3D] = []
    seen3d: dict[Annotation3D, int] = {}
    p3 = root / ANN3D_FILE
    if p3.is_file():
        r = _RowReader(p3, ANN3D_COLUMNS)
        for line, row in r.rows():
            vid = r.text(line, row, "volume_id")
            vol = index.get(vid)
            if vol is None:
                r._fail(line, "volume_id", f"unknown volume {vid!r}")
            coords = [r.real(line, row, c) for c in ("x1", "y1", "x2", "y2")]
            z1 = r.integer(line, row, "z1")
            z2 = r.integer(line, row, "z2")
            box = r.build(line, "z1", Box3D, *coords, z1, z2)
            if z2 >= vol.num_slices:
                r._fail(line, "z2", f"{z2} >= num_slices {vol.num_slices}")
            rec = Annotation3D(vid, box, r.tag(line, row), r.enum(line, row, "source", Source))
            if rec in seen3d:
                r._fail(line, "", f"duplicate of line {seen3d[rec]}")
            seen3d[rec] = line
            ann3d.append(rec)

    return AnnotationStore(tuple(volumes), tuple(ann2d), tuple(ann3d))


# --------------------------------------------------------------------------
# curation
# --------------------------------------------------------------------------


def map_tags_2d_to_3d(store: AnnotationStore, map_iou: float = DEFAULT_MAP_IOU) -> AnnotationStore:
    """Copy tags from tagged 2D ground truth onto untagged 3D records.

    A 2D box qualifies when its slice lies inside the 3D record's slice range
    and its IoU with the 3D footprint is strictly above ``map_iou``.  This is
    deliberately strict, unlike the inclusive overlap thresholds used when
    linking and evaluating.  Among qualifying boxes the highest IoU wins, then
    the higher slice index, then the lexicographically smaller box.  Existing
    3D tags are never touched.
    """
    by_vol: dict[str, list[Annotation2D]] = {}
    for a in store.ann2d:
        if a.tag is not None and a.source is Source.GROUND_TRUTH:
            by_vol.setdefault(a.volume_id, []).append(a)

    out: list[Annotation3D] = []
    unmapped = 0
    for rec in store.ann3d:
        if rec.tag is not None:
            out.append(rec)
            continue
        foot = rec.box.footprint
        best = None
        for a in by_vol.get(rec.volume_id, ()):
            if not rec.box.contains_slice(a.slice_index):
                continue
            ov = iou_2d(a.box, foot)
            if not exceeds(ov, map_iou):
                continue
            key = (-ov, -a.slice_index, a.box.as_tuple())
            if best is None or key < best[0]:
                best = (key, a.tag)
        if best is None:
            unmapped += 1
            out.append(rec)
        else:
            out.append(replace(rec, tag=best[1]))
    if unmapped:
        log.warning("%d 3D record(s) left untagged after tag mapping", unmapped)
    return replace_records(store, ann3d=out)


def untagged_3d(store: AnnotationStore) -> list[Annotation3D]:
    """3D records still lacking a tag (e.g. after :func:`map_tags_2d_to_3d`)."""
    return [a for a in store.ann3d if a.tag is None]


def remove_patient_overlap(protected: AnnotationStore, other: AnnotationStore) -> AnnotationStore:
    """Drop every volume of ``other`` whose patient also appears in ``protected``."""
    banned = protected.patients()
    keep = [v.volume_id for v in other.volumes if v.patient_id not in banned]
    return other.select(volume_ids=keep)


def class_counts(
    store: AnnotationStore,
    split: Split | str | None = None,
    include_mined: bool = False,
    kind: str = "2d",
) -> dict[str, int]:
    """Tagged-record counts per class plus ``total``.

    ``split=None`` counts every split.  Mined records are excluded unless
    ``include_mined`` is set.
    """
    vols = set(store.volume_ids(split))
    if kind == "2d":
        recs = store.ann2d
    elif kind == "3d":
        recs = store.ann3d
    else:
        raise ValueError(f"kind must be '2d' or '3d', got {kind!r}")
    counts = {c.value: 0 for c in CLASSES}
    for a in recs:
        if a.volume_id not in vols or a.tag is None:
            continue
        if a.source is Source.MINED and not include_mined:
            continue
        counts[a.tag.value] += 1
    counts["total"] = sum(counts[c.value] for c in CLASSES)
    return counts
