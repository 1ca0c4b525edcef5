"""FROC sensitivity, per-class detection+tagging metrics, confusion matrices."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from lesionforge.dataset import Annotation3D, format_number, write_csv
from lesionforge.geometry import CLASSES, ClassLabel, at_least, boxes_to_array, pairwise_overlap_3d
from lesionforge.stacking import Lesion3D

FP_POINTS = (0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0)
DEFAULT_EVAL_THRESHOLD = 0.30
DEFAULT_MEASURE = "iobb"


@dataclass
class VolumeMatch:
    """Greedy matching result for one volume.

    ``scores[i]`` / ``is_tp[i]`` describe the i-th prediction in evaluation
    order; ``pairs`` holds (prediction, gt) index pairs into ``preds`` / ``gts``.
    """

    preds: list[Lesion3D]
    gts: list[Annotation3D]
    scores: list[float]
    is_tp: list[bool]
    pairs: list[tuple[int, int]]

    @property
    def n_gt(self) -> int:
        return len(self.gts)

    @property
    def fp_scores(self) -> list[float]:
        return [s for s, tp in zip(self.scores, self.is_tp) if not tp]

    @property
    def tp_scores(self) -> list[float]:
        return [s for s, tp in zip(self.scores, self.is_tp) if tp]


def _gt_array(gts: Sequence[Annotation3D]) -> np.ndarray:
    return boxes_to_array([g.box for g in gts], width=6)


def match_volume(
    preds: Sequence[Lesion3D],
    gts: Sequence[Annotation3D],
    measure: str = DEFAULT_MEASURE,
    threshold: float = DEFAULT_EVAL_THRESHOLD,
    tag_aware: bool = True,
) -> VolumeMatch:
    """Score-ordered greedy one-to-one matching of predictions to ground truth.

    Predictions are visited by descending score (ties: larger best overlap
    first, then coordinates); each takes the unmatched GT with the largest
    overlap >= ``threshold`` (ties: smaller GT coordinates).  Under
    ``tag_aware`` a GT is only eligible when its tag equals the prediction's.
    """
    gts = sorted(gts, key=Annotation3D.sort_key)
    preds = list(preds)
    ov = pairwise_overlap_3d(
        boxes_to_array([p.fused_box for p in preds], width=6), _gt_array(gts), measure
    )
    best = ov.max(axis=1) if gts else np.zeros(len(preds))
    order = sorted(
        range(len(preds)),
        key=lambda i: (
            -preds[i].score,
            -best[i],
            preds[i].fused_box.as_tuple(),
            preds[i].tag.value if preds[i].tag else "",
        ),
    )
    preds = [preds[i] for i in order]
    ov = ov[order] if len(order) else ov

    taken = [False] * len(gts)
    is_tp: list[bool] = []
    pairs: list[tuple[int, int]] = []
    for i, p in enumerate(preds):
        pick = -1
        for j, g in enumerate(gts):
            if taken[j] or not at_least(float(ov[i, j]), threshold):
                continue
            if tag_aware and (g.tag is None or g.tag != p.tag):
                continue
            # gts are in coordinate order, so strict > keeps the smaller box on ties
            if pick < 0 or ov[i, j] > ov[i, pick]:
                pick = j
        if pick >= 0:
            taken[pick] = True
            pairs.append((i, pick))
        is_tp.append(pick >= 0)
    return VolumeMatch(preds, gts, [p.score for p in preds], is_tp, pairs)


def sweep_sensitivity(
    tp_scores: Sequence[float],
    fp_scores: Sequence[float],
    n_gt: int,
    n_volumes: int,
    fp_points: Sequence[float] = FP_POINTS,
) -> Optional[list[float]]:
    """Step-function FROC: sensitivity at each allowed FP-per-volume rate.

    At rate f the operating threshold is the smallest prediction score t whose
    count of FPs scoring >= t is at most ``f * n_volumes``; sensitivity is the
    TP count at that threshold over ``n_gt``.  ``None`` when ``n_gt`` is 0.
    """
    if n_gt == 0:
        return None
    if n_volumes < 1:
        raise ValueError("FROC needs at least one volume")
    tp = np.sort(np.asarray(tp_scores, dtype=np.float64))
    fp = np.sort(np.asarray(fp_scores, dtype=np.float64))
    cands = np.unique(np.concatenate([tp, fp]))[::-1]
    # counts of scores >= each candidate threshold
    fp_at = len(fp) - np.searchsorted(fp, cands, side="left")
    tp_at = len(tp) - np.searchsorted(tp, cands, side="left")
    out = []
    for f in fp_points:
        ok = np.nonzero(fp_at <= f * n_volumes + 1e-9)[0]
        # fp_at grows as the threshold drops, so admissible thresholds are a prefix
        out.append(float(tp_at[ok[-1]]) / n_gt if ok.size else 0.0)
    return out


def froc(
    matches: Sequence[VolumeMatch],
    fp_points: Sequence[float] = FP_POINTS,
    n_volumes: Optional[int] = None,
) -> Optional[list[float]]:
    n_volumes = len(matches) if n_volumes is None else n_volumes
    tp = [s for m in matches for s in m.tp_scores]
    fp = [s for m in matches for s in m.fp_scores]
    return sweep_sensitivity(tp, fp, sum(m.n_gt for m in matches), n_volumes, fp_points)


@dataclass
class ConfusionMatrix:
    counts: np.ndarray = field(default_factory=lambda: np.zeros((len(CLASSES), len(CLASSES)), dtype=np.int64))

    @property
    def normalized(self) -> np.ndarray:
        rows = self.counts.sum(axis=1, keepdims=True).astype(np.float64)
        out = np.zeros(self.counts.shape)
        np.divide(self.counts, rows, out=out, where=rows > 0)
        return out

    def add(self, gt: ClassLabel, pred: ClassLabel, n: int = 1) -> None:
        self.counts[gt.index, pred.index] += n


def confusion(matches: Sequence[VolumeMatch]) -> ConfusionMatrix:
    """(GT tag, predicted tag) counts over matched pairs; untagged sides skipped."""
    cm = ConfusionMatrix()
    for m in matches:
        for i, j in m.pairs:
            g, p = m.gts[j].tag, m.preds[i].tag
            if g is not None and p is not None:
                cm.add(g, p)
    return cm


@dataclass
class FrocResult:
    fp_points: tuple[float, ...]
    n_volumes: int
    overall: Optional[list[float]]
    per_class: dict[str, Optional[list[float]]]
    total_gt: int
    gt_per_class: dict[str, int]
    confusion: ConfusionMatrix
    detection_only: Optional[list[float]] = None

    @staticmethod
    def _mean(values: Optional[list[float]]) -> Optional[float]:
        return None if values is None else float(sum(values)) / len(values)

    @property
    def average(self) -> Optional[float]:
        return self._mean(self.overall)

    def class_average(self, label: str) -> Optional[float]:
        return self._mean(self.per_class.get(label))

    def at(self, fp: float, label: Optional[str] = None) -> Optional[float]:
        series = self.overall if label is None else self.per_class.get(label)
        if series is None:
            return None
        return series[self.fp_points.index(fp)]

    @property
    def sensitivity_at_4fp(self) -> dict[str, Optional[float]]:
        return {c: self.at(4.0, c) for c in self.per_class} if 4.0 in self.fp_points else {}

    def mean_class_sensitivity_at(self, fp: float = 4.0) -> Optional[float]:
        """Mean over classes with ground truth; undefined classes are left out."""
        vals = [v for v in (self.at(fp, c) for c in self.per_class) if v is not None]
        return float(sum(vals)) / len(vals) if vals else None

    # -- serialization -------------------------------------------------------

    METRIC_COLUMNS = ("class", "fp_per_volume", "sensitivity", "num_gt")

    def metric_rows(self) -> list[list[str]]:
        rows = []

        def emit(name, series, n_gt):
            for k, f in enumerate(self.fp_points):
                rows.append([name, format_number(f), _fmt(None if series is None else series[k]), n_gt])
            rows.append([name, "average", _fmt(self._mean(series)), n_gt])

        emit("all", self.overall, self.total_gt)
        if self.detection_only is not None:
            emit("detection_only", self.detection_only, self.total_gt)
        for c in CLASSES:
            emit(c.value, self.per_class.get(c.value), self.gt_per_class.get(c.value, 0))
        return rows


def _fmt(v: Optional[float]) -> str:
    return "" if v is None else f"{v:.6f}"


def evaluate(
    preds: Mapping[str, Sequence[Lesion3D]],
    gts: Mapping[str, Sequence[Annotation3D]],
    volume_ids: Optional[Sequence[str]] = None,
    measure: str = DEFAULT_MEASURE,
    threshold: float = DEFAULT_EVAL_THRESHOLD,
    tag_aware: bool = True,
    fp_points: Sequence[float] = FP_POINTS,
    per_class_fp: str = "class",
) -> FrocResult:
    """Full evaluation over a set of volumes.

    ``overall`` uses ``tag_aware`` matching.  Per-class curves always match
    tags; with ``per_class_fp="class"`` a class-c FP is a class-c prediction
    left unmatched by class-c ground truth, with ``"global"`` every FP of the
    tag-aware matching counts.  The confusion matrix and ``detection_only``
    curve come from tag-agnostic matching.
    """
    if per_class_fp not in ("class", "global"):
        raise ValueError("per_class_fp must be 'class' or 'global'")
    vids = sorted(set(preds) | set(gts)) if volume_ids is None else list(volume_ids)
    if not vids:
        raise ValueError("evaluation needs at least one volume")
    n_vol = len(vids)

    def run(tag_flag):
        return [match_volume(preds.get(v, ()), gts.get(v, ()), measure, threshold, tag_flag) for v in vids]

    det = run(False)
    main = det if not tag_aware else run(True)
    tagged = main if tag_aware else run(True)

    per_class: dict[str, Optional[list[float]]] = {}
    gt_per_class: dict[str, int] = {}
    global_fp = [s for m in tagged for s in m.fp_scores]
    for c in CLASSES:
        n_gt = sum(1 for v in vids for g in gts.get(v, ()) if g.tag is c)
        gt_per_class[c.value] = n_gt
        tp = [m.scores[i] for m in tagged for i, j in m.pairs if m.gts[j].tag is c]
        if per_class_fp == "class":
            fp = [s for m in tagged for s, ok, p in zip(m.scores, m.is_tp, m.preds) if not ok and p.tag is c]
        else:
            fp = global_fp
        per_class[c.value] = sweep_sensitivity(tp, fp, n_gt, n_vol, fp_points)

    return FrocResult(
        fp_points=tuple(fp_points),
        n_volumes=n_vol,
        overall=froc(main, fp_points, n_vol),
        per_class=per_class,
        total_gt=sum(m.n_gt for m in main),
        gt_per_class=gt_per_class,
        confusion=confusion(det),
        detection_only=froc(det, fp_points, n_vol),
    )


# --------------------------------------------------------------------------
# writers
# --------------------------------------------------------------------------


def write_metrics(result: FrocResult, path: str | os.PathLike) -> Path:
    path = Path(path)
    write_csv(path, FrocResult.METRIC_COLUMNS, result.metric_rows())
    return path


def write_confusion(cm: ConfusionMatrix, path: str | os.PathLike) -> Path:
    path = Path(path)
    names = [c.value for c in CLASSES]
    rows = []
    for i, c in enumerate(names):
        rows.append(["raw", c, *(str(int(v)) for v in cm.counts[i])])
    norm = cm.normalized
    for i, c in enumerate(names):
        rows.append(["normalized", c, *(f"{v:.6f}" for v in norm[i])])
    write_csv(path, ("kind", "gt_tag", *names), rows)
    return path


def froc_svg(result: FrocResult, title: str = "FROC") -> str:
    """Static step plot of overall sensitivity against FP per volume (log2 axis)."""
    W, H, L, R, T, B = 480, 320, 56, 16, 32, 44
    pw, ph = W - L - R, H - T - B
    fps = result.fp_points
    lo, hi = math.log2(fps[0]), math.log2(fps[-1])
    span = hi - lo or 1.0

    def x(f):
        return L + (math.log2(f) - lo) / span * pw

    def y(s):
        return T + (1.0 - s) * ph

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
        f'<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>',
        f'<text x="{W / 2:.1f}" y="20" text-anchor="middle" font-family="sans-serif" font-size="13">{title}</text>',
        f'<rect x="{L}" y="{T}" width="{pw}" height="{ph}" fill="none" stroke="black"/>',
    ]
    for f in fps:
        parts.append(
            f'<text x="{x(f):.1f}" y="{T + ph + 16}" text-anchor="middle" font-family="sans-serif" '
            f'font-size="10">{format_number(f)}</text>'
        )
    for s in (0.0, 0.25, 0.5, 0.75, 1.0):
        parts.append(
            f'<text x="{L - 6}" y="{y(s) + 3:.1f}" text-anchor="end" font-family="sans-serif" '
            f'font-size="10">{s:.2f}</text>'
        )
        parts.append(f'<line x1="{L}" y1="{y(s):.1f}" x2="{L + pw}" y2="{y(s):.1f}" stroke="#ddd"/>')
    parts.append(
        f'<text x="{L + pw / 2:.1f}" y="{H - 8}" text-anchor="middle" font-family="sans-serif" '
        f'font-size="11">false positives per volume</text>'
    )
    series = result.overall or [0.0] * len(fps)
    pts = []
    for k, f in enumerate(fps):
        if k:
            pts.append((x(f), y(series[k - 1])))
        pts.append((x(f), y(series[k])))
    path = " ".join(f"{px:.1f},{py:.1f}" for px, py in pts)
    parts.append(f'<polyline points="{path}" fill="none" stroke="#1f5fa8" stroke-width="2"/>')
    for k, f in enumerate(fps):
        parts.append(f'<circle cx="{x(f):.1f}" cy="{y(series[k]):.1f}" r="3" fill="#1f5fa8"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def write_froc_svg(result: FrocResult, path: str | os.PathLike, title: str = "FROC") -> Path:
    path = Path(path)
    path.write_text(froc_svg(result, title), encoding="utf-8")
    return path
