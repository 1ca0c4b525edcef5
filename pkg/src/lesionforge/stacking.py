"""Link per-slice boxes on consecutive slices into 3D lesion proposals.

Between slice ``z`` and ``z + 1`` every box on ``z`` is the tail of exactly one
open track, so the linking step is a one-to-one matching between the two
slices.  Candidate pairs with IoU >= ``link_iou`` are accepted greedily in the
order given by :func:`link_order_key`; unmatched boxes on ``z + 1`` open new
tracks.  Tracks never bridge a gap and ignore tags while linking.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Optional, Sequence

from lesionforge.fusion import weighted_mean_box
from lesionforge.geometry import (
    Box3D,
    ClassLabel,
    ScoredBox2D,
    at_least,
    boxes_to_array,
    pairwise_iou_2d,
)

DEFAULT_LINK_IOU = 0.30
SCORE_MODES = ("max", "mean")


@dataclass(frozen=True)
class Lesion3D:
    members: tuple[ScoredBox2D, ...]
    fused_box: Box3D
    tag: Optional[ClassLabel]
    score: float
    volume_id: Optional[str] = None
    provenance: str = field(default="", compare=False)

    @classmethod
    def from_members(
        cls,
        members: Sequence[ScoredBox2D],
        volume_id: Optional[str] = None,
        score_mode: str = "max",
    ) -> "Lesion3D":
        if not members:
            raise ValueError("a lesion needs at least one member box")
        members = tuple(sorted(members, key=lambda m: m.slice_index))
        zs = [m.slice_index for m in members]
        if zs != list(range(zs[0], zs[0] + len(zs))):
            raise ValueError(f"member slices are not one-per-slice contiguous: {zs}")
        xy = weighted_mean_box(members)
        fused = Box3D(xy.x1, xy.y1, xy.x2, xy.y2, zs[0], zs[-1])
        # ties on score go to the lowest slice
        best = max(members, key=lambda m: (m.score, -m.slice_index))
        if score_mode == "max":
            score = best.score
        elif score_mode == "mean":
            score = sum(m.score for m in members) / len(members)
        else:
            raise ValueError(f"score_mode must be one of {SCORE_MODES}, got {score_mode!r}")
        return cls(members, fused, best.tag, score, volume_id)

    @property
    def z_range(self) -> tuple[int, int]:
        return self.fused_box.z1, self.fused_box.z2

    def key(self) -> str:
        """Stable content identifier, used as the mined-lesion id."""
        h = hashlib.sha1()
        h.update(str(self.volume_id).encode())
        for m in self.members:
            h.update(
                f"|{m.slice_index}:{m.box.x1:.6f},{m.box.y1:.6f},{m.box.x2:.6f},{m.box.y2:.6f}".encode()
            )
        return h.hexdigest()[:16]


def link_order_key(iou: float, tail: ScoredBox2D, box: ScoredBox2D) -> tuple:
    """Greedy acceptance order for (track tail, next-slice box) candidates.

    Higher IoU first, then higher score of the incoming box, then its
    coordinates, then the tail's score and coordinates so the order is total.
    """
    return (-iou, -box.score, box.box.as_tuple(), -tail.score, tail.box.as_tuple())


def match_adjacent(
    prev: Sequence[ScoredBox2D], nxt: Sequence[ScoredBox2D], link_iou: float
) -> list[tuple[int, int]]:
    """One-to-one greedy matching between boxes on two consecutive slices."""
    if not prev or not nxt:
        return []
    ious = pairwise_iou_2d(boxes_to_array([p.box for p in prev]), boxes_to_array([n.box for n in nxt]))
    cands = [
        (link_order_key(float(ious[i, j]), prev[i], nxt[j]), i, j)
        for i in range(len(prev))
        for j in range(len(nxt))
        if at_least(float(ious[i, j]), link_iou)
    ]
    cands.sort()
    used_prev: set[int] = set()
    used_next: set[int] = set()
    pairs = []
    for _, i, j in cands:
        if i in used_prev or j in used_next:
            continue
        used_prev.add(i)
        used_next.add(j)
        pairs.append((i, j))
    return pairs


def _single_volume(boxes: Sequence[ScoredBox2D], volume_id: Optional[str]) -> Optional[str]:
    ids = {b.volume_id for b in boxes if b.volume_id is not None}
    if volume_id is not None:
        ids.add(volume_id)
    if len(ids) > 1:
        raise ValueError(f"stack_2d_to_3d expects one volume, got {sorted(ids)}")
    return next(iter(ids)) if ids else None


def stack_2d_to_3d(
    boxes: Sequence[ScoredBox2D],
    link_iou: float = DEFAULT_LINK_IOU,
    volume_id: Optional[str] = None,
    score_mode: str = "max",
) -> list[Lesion3D]:
    if not (0.0 < link_iou <= 1.0):
        raise ValueError(f"link_iou must be in (0, 1], got {link_iou}")
    vid = _single_volume(boxes, volume_id)
    by_slice: dict[int, list[ScoredBox2D]] = {}
    for b in boxes:
        by_slice.setdefault(b.slice_index, []).append(b)

    tracks: list[list[ScoredBox2D]] = []
    open_tracks: list[int] = []  # track index per box on the previous slice
    prev_slice: Optional[int] = None
    prev_boxes: list[ScoredBox2D] = []
    for z in sorted(by_slice):
        cur = sorted(by_slice[z], key=ScoredBox2D.sort_key)
        assigned: list[Optional[int]] = [None] * len(cur)
        if prev_slice is not None and z == prev_slice + 1:
            for i, j in match_adjacent(prev_boxes, cur, link_iou):
                assigned[j] = open_tracks[i]
        for j, b in enumerate(cur):
            if assigned[j] is None:
                tracks.append([])
                assigned[j] = len(tracks) - 1
            tracks[assigned[j]].append(b)
        open_tracks = [t for t in assigned if t is not None]
        prev_slice, prev_boxes = z, cur

    lesions = [Lesion3D.from_members(t, volume_id=vid, score_mode=score_mode) for t in tracks]
    lesions.sort(key=lambda l: (-l.score, l.fused_box.as_tuple(), l.key()))
    return lesions
