"""Pseudo-label mining: confidence filtering, class rebalancing, merging."""

from __future__ import annotations

import hashlib
import os
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence, TypeVar

import numpy as np

from lesionforge.dataset import (
    Annotation2D,
    AnnotationStore,
    Source,
    Split,
    quantize_box,
    replace_records,
    write_csv,
)
from lesionforge.geometry import CLASSES, ClassLabel, at_least, iou_2d
from lesionforge.stacking import Lesion3D

T = TypeVar("T")

GT_OVERLAP_IOU = 0.30


@dataclass(frozen=True)
class MiningPolicy:
    thresholds: tuple[float, ...]
    upsample: bool = True

    def __post_init__(self) -> None:
        object.__setattr__(self, "thresholds", tuple(float(t) for t in self.thresholds))
        if not self.thresholds:
            raise ValueError("a mining policy needs at least one round")
        for t in self.thresholds:
            if not 0.0 < t <= 1.0:
                raise ValueError(f"threshold {t} outside (0, 1]")

    @property
    def rounds(self) -> int:
        return len(self.thresholds)

    @classmethod
    def static(cls, rounds: int = 4, threshold: float = 0.8, upsample: bool = True) -> "MiningPolicy":
        return cls((threshold,) * rounds, upsample)

    @classmethod
    def variable(
        cls, rounds: int = 4, start: float = 0.8, step: float = 0.1, upsample: bool = True
    ) -> "MiningPolicy":
        # round() keeps 0.8 - 0.1 from becoming 0.7000000000000001
        return cls(tuple(round(start - k * step, 10) for k in range(rounds)), upsample)

    @classmethod
    def named(cls, name: str, rounds: int = 4, upsample: bool = True) -> "MiningPolicy":
        if name == "static":
            return cls.static(rounds, upsample=upsample)
        if name == "variable":
            return cls.variable(rounds, upsample=upsample)
        raise ValueError(f"unknown policy {name!r}; expected 'static' or 'variable'")


def filter_by_confidence(
    proposals: Sequence[Lesion3D], round_index: int, policy: MiningPolicy
) -> list[Lesion3D]:
    if not 0 <= round_index < policy.rounds:
        raise IndexError(f"round {round_index} outside policy with {policy.rounds} rounds")
    t = policy.thresholds[round_index]
    return [p for p in proposals if at_least(p.score, t)]


def group_by_class(lesions: Sequence[Lesion3D]) -> dict[ClassLabel, list[Lesion3D]]:
    """Bucket lesions by tag in canonical class order; untagged ones are dropped."""
    out: dict[ClassLabel, list[Lesion3D]] = {c: [] for c in CLASSES}
    for les in lesions:
        if les.tag is not None:
            out[les.tag].append(les)
    return out


def _class_rng(seed: int, label) -> np.random.Generator:
    digest = hashlib.sha256(str(label).encode()).digest()
    return np.random.default_rng([seed, int.from_bytes(digest[:8], "little")])


def balance_upsample(mined: Mapping[ClassLabel, Sequence[T]], seed: int = 0) -> dict[ClassLabel, list[T]]:
    """Repeat every non-empty class up to the largest class count.

    Each class gets ``max // n`` full copies of its sequence plus ``max % n``
    items drawn without replacement, with a generator keyed by (seed, class).
    Empty classes stay empty.
    """
    sizes = {c: len(v) for c, v in mined.items()}
    target = max(sizes.values(), default=0)
    if target == 0:
        raise ValueError("balance_upsample needs at least one non-empty class")
    out: dict[ClassLabel, list[T]] = {}
    for c, items in mined.items():
        items = list(items)
        n = len(items)
        if n == 0:
            out[c] = []
            continue
        reps, rem = divmod(target, n)
        extra = []
        if rem:
            pick = _class_rng(seed, c).choice(n, size=rem, replace=False)
            extra = [items[i] for i in sorted(pick)]
        out[c] = items * reps + extra
    return out


@dataclass
class RoundReport:
    round_index: int
    threshold: float
    mined_counts: dict[str, int] = field(default_factory=dict)
    rejected_counts: dict[str, int] = field(default_factory=dict)
    post_balance_counts: dict[str, int] = field(default_factory=dict)
    intra_patient: int = 0
    inter_patient: int = 0
    boxes_added: int = 0

    @property
    def accepted(self) -> int:
        return sum(self.mined_counts.values())

    @property
    def rejected(self) -> int:
        return sum(self.rejected_counts.values())

    COLUMNS = ("round", "class", "threshold", "proposals", "mined", "rejected", "post_balance")

    def rows(self) -> list[list]:
        rows = []
        for c in CLASSES:
            m = self.mined_counts.get(c.value, 0)
            r = self.rejected_counts.get(c.value, 0)
            rows.append([self.round_index, c.value, f"{self.threshold:g}", m + r, m, r,
                         self.post_balance_counts.get(c.value, 0)])
        rows.append([self.round_index, "total", f"{self.threshold:g}", self.accepted + self.rejected,
                     self.accepted, self.rejected, sum(self.post_balance_counts.values())])
        return rows

    def write(self, directory: str | os.PathLike) -> Path:
        path = Path(directory) / f"round_{self.round_index}_report.csv"
        write_csv(path, self.COLUMNS, self.rows())
        return path


def build_report(
    round_index: int,
    threshold: float,
    proposals: Sequence[Lesion3D],
    accepted: Sequence[Lesion3D],
    balanced: Mapping[ClassLabel, Sequence[Lesion3D]],
    store: AnnotationStore,
) -> RoundReport:
    acc_ids = Counter(id(p) for p in accepted)
    mined = Counter(p.tag.value for p in accepted if p.tag is not None)
    rejected = Counter(
        p.tag.value for p in proposals if p.tag is not None and not acc_ids.get(id(p))
    )
    intra = sum(1 for p in accepted if store.volume(p.volume_id).split is not Split.UNLABELED_POOL)
    return RoundReport(
        round_index=round_index,
        threshold=threshold,
        mined_counts={c.value: mined.get(c.value, 0) for c in CLASSES},
        rejected_counts={c.value: rejected.get(c.value, 0) for c in CLASSES},
        post_balance_counts={c.value: len(balanced.get(c, ())) for c in CLASSES},
        intra_patient=intra,
        inter_patient=len(accepted) - intra,
    )


def merge_into_training(
    store: AnnotationStore,
    mined: Sequence[Lesion3D],
    gt_overlap_iou: float = GT_OVERLAP_IOU,
) -> AnnotationStore:
    """Add mined lesions to the store as per-slice ``mined`` 2D records.

    A lesion appearing k times in ``mined`` (upsampling replicas) is stored
    once with ``copies = k``.  A member box overlapping ground truth on its
    slice at IoU >= ``gt_overlap_iou`` is skipped, as is any box identical in
    volume, slice, coordinates and tag to a record already present.
    """
    multiplicity: dict[str, int] = {}
    unique: dict[str, Lesion3D] = {}
    for les in mined:
        if les.volume_id is None or not store.has_volume(les.volume_id):
            raise ValueError(f"mined lesion references unknown volume {les.volume_id!r}")
        k = les.key()
        multiplicity[k] = multiplicity.get(k, 0) + 1
        unique.setdefault(k, les)

    gt_by_slice: dict[tuple[str, int], list[Annotation2D]] = {}
    present = set()
    for a in store.ann2d:
        if a.source is Source.GROUND_TRUTH:
            gt_by_slice.setdefault((a.volume_id, a.slice_index), []).append(a)
        else:
            present.add(a.identity())

    added: list[Annotation2D] = []
    for k in sorted(unique):
        les = unique[k]
        for m in les.members:
            box = quantize_box(m.box)
            gts = gt_by_slice.get((les.volume_id, m.slice_index), ())
            if any(at_least(iou_2d(box, g.box), gt_overlap_iou) for g in gts):
                continue
            rec = Annotation2D(
                les.volume_id, m.slice_index, box, les.tag, Source.MINED, k, multiplicity[k]
            )
            if rec.identity() in present:
                continue
            present.add(rec.identity())
            added.append(rec)
    if not added:
        return store
    return replace_records(store, ann2d=store.ann2d + tuple(added))
