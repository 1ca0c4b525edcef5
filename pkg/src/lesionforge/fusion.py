"""Weighted Boxes Fusion of same-slice predictions from several sources.

Sources are epochs of one model or several models.  Boxes are visited in
descending score order; each joins the first existing cluster whose current
fused box overlaps it with IoU >= ``iou_threshold``, else opens a new cluster.
A cluster's box is the score-weighted mean of its members and its score is the
mean member score scaled by ``min(n, T) / T``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

from lesionforge.geometry import Box2D, ScoredBox2D, at_least, iou_2d

DEFAULT_WBF_IOU = 0.55
DEFAULT_SOURCE_COUNT = 5


@dataclass(frozen=True)
class FusionConfig:
    iou_threshold: float = DEFAULT_WBF_IOU
    source_count: int = DEFAULT_SOURCE_COUNT
    per_class: bool = True
    rescale: bool = True

    def __post_init__(self) -> None:
        if not (0.0 < self.iou_threshold <= 1.0):
            raise ValueError(f"iou_threshold must be in (0, 1], got {self.iou_threshold}")
        if self.source_count < 1:
            raise ValueError(f"source_count must be >= 1, got {self.source_count}")


def weighted_mean_box(members: Sequence[ScoredBox2D]) -> Box2D:
    """Score-weighted mean of member coordinates (plain mean if all scores are 0)."""
    total = sum(m.score for m in members)
    if total > 0.0:
        weights = [m.score / total for m in members]
    else:
        weights = [1.0 / len(members)] * len(members)
    coords = [0.0, 0.0, 0.0, 0.0]
    for w, m in zip(weights, members):
        for k, v in enumerate(m.box.as_tuple()):
            coords[k] += w * v
    # keep the mean inside the members' hull despite rounding
    for k in range(4):
        lo = min(m.box.as_tuple()[k] for m in members)
        hi = max(m.box.as_tuple()[k] for m in members)
        coords[k] = min(max(coords[k], lo), hi)
    return Box2D(*coords)


def _flatten(sources: Iterable[Sequence[ScoredBox2D]]) -> list[ScoredBox2D]:
    boxes = [b for src in sources for b in src]
    slices = {b.slice_index for b in boxes}
    if len(slices) > 1:
        raise ValueError(f"wbf_fuse expects boxes from one slice, got slices {sorted(slices)}")
    return sorted(boxes, key=ScoredBox2D.sort_key)


def wbf_fuse(
    sources: Iterable[Sequence[ScoredBox2D]], cfg: FusionConfig | None = None
) -> list[ScoredBox2D]:
    cfg = cfg or FusionConfig()
    boxes = _flatten(sources)
    if not boxes:
        return []

    clusters: list[list[ScoredBox2D]] = []
    fused: list[Box2D] = []
    for b in boxes:
        for k, members in enumerate(clusters):
            if cfg.per_class and members[0].tag != b.tag:
                continue
            if at_least(iou_2d(fused[k], b.box), cfg.iou_threshold):
                members.append(b)
                fused[k] = weighted_mean_box(members)
                break
        else:
            clusters.append([b])
            fused.append(b.box)

    T = cfg.source_count
    out = []
    for members, box in zip(clusters, fused):
        n = len(members)
        score = sum(m.score for m in members) / n
        if cfg.rescale:
            score *= min(n, T) / T
        first = members[0]
        out.append(
            ScoredBox2D(
                box=box,
                slice_index=first.slice_index,
                score=min(max(score, 0.0), 1.0),
                tag=first.tag,
                volume_id=first.volume_id,
            )
        )
    out.sort(key=ScoredBox2D.sort_key)
    return out


def fuse_by_slice(
    sources: Sequence[Sequence[ScoredBox2D]], cfg: FusionConfig | None = None
) -> list[ScoredBox2D]:
    """Run :func:`wbf_fuse` independently on every slice present in ``sources``."""
    per_slice: dict[int, list[list[ScoredBox2D]]] = {}
    for s, src in enumerate(sources):
        for b in src:
            per_slice.setdefault(b.slice_index, [[] for _ in sources])[s].append(b)
    out: list[ScoredBox2D] = []
    for z in sorted(per_slice):
        out.extend(wbf_fuse(per_slice[z], cfg))
    return out
