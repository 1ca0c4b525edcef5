"""Detector adapter contract and the deterministic synthetic stand-in.

The synthetic detector is a simulation device, not a model of any network.
It sees the hidden per-slice truth of every volume and reproduces three
things the mining loop depends on:

* detection probability per class grows with the amount of training data,
  ``p_c = p_max * (1 - exp(-n_c / tau))``;
* emitted boxes carry coordinate jitter, confusable tags and imperfect scores;
* false positives appear at a Poisson rate per volume.

All randomness for a volume comes from a generator keyed by
``(seed, volume_id)`` and is drawn unconditionally for every truth box, so a
higher ``p_c`` detects a superset of boxes with identical jitter and scores.
"""

from __future__ import annotations

import abc
import hashlib
import math
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from lesionforge.dataset import Annotation2D, Annotation3D, AnnotationStore, Split
from lesionforge.geometry import CLASSES, Box2D, ClassLabel, ScoredBox2D

IMAGE_SIZE = 512.0
N_CLASSES = len(CLASSES)


class DetectorAdapter(abc.ABC):
    """What the self-training loop needs from a detector.

    ``train`` starts from scratch every time and returns an opaque state;
    ``predict`` must be deterministic for a given state and volume.
    """

    @abc.abstractmethod
    def train(self, training: AnnotationStore):
        ...

    @abc.abstractmethod
    def predict(self, state, volume_id: str) -> list[ScoredBox2D]:
        ...

    def predict_epochs(self, state, volume_id: str) -> list[list[ScoredBox2D]]:
        """Predictions from each retained epoch/checkpoint, fused downstream."""
        return [self.predict(state, volume_id)]

    @property
    def epochs(self) -> int:
        return 1


def default_confusion(diagonal: float = 0.85) -> tuple[tuple[float, ...], ...]:
    off = (1.0 - diagonal) / (N_CLASSES - 1)
    return tuple(
        tuple(diagonal if i == j else off for j in range(N_CLASSES)) for i in range(N_CLASSES)
    )


def identity_confusion() -> tuple[tuple[float, ...], ...]:
    return default_confusion(1.0)


@dataclass(frozen=True)
class SyntheticDetectorParams:
    p_max: float = 0.9
    tau: float = 100.0
    jitter_sigma: float = 0.03
    fp_rate: float = 2.0
    confusion: tuple[tuple[float, ...], ...] = field(default_factory=default_confusion)
    score_tp_alpha: float = 5.0
    score_tp_beta: float = 2.0
    score_fp_alpha: float = 2.0
    score_fp_beta: float = 5.0
    seed: int = 0
    epochs: int = 1

    def __post_init__(self) -> None:
        if not 0.0 < self.p_max <= 1.0:
            raise ValueError("p_max must be in (0, 1]")
        if self.tau <= 0:
            raise ValueError("tau must be > 0")
        if self.jitter_sigma < 0 or self.fp_rate < 0:
            raise ValueError("jitter_sigma and fp_rate must be >= 0")
        for name in ("score_tp_alpha", "score_tp_beta", "score_fp_alpha", "score_fp_beta"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        conf = np.asarray(self.confusion, dtype=np.float64)
        if conf.shape != (N_CLASSES, N_CLASSES):
            raise ValueError(f"confusion must be {N_CLASSES}x{N_CLASSES}")
        if (conf < 0).any() or not np.allclose(conf.sum(axis=1), 1.0, rtol=0, atol=1e-9):
            raise ValueError("confusion rows must be non-negative and sum to 1")
        object.__setattr__(self, "confusion", tuple(tuple(float(v) for v in row) for row in conf))

    @classmethod
    def noiseless(cls, seed: int = 0, **overrides) -> "SyntheticDetectorParams":
        """Perfect detector: every truth box found, no jitter, no FP, exact tags.

        ``tau`` is tiny so that ``p_c`` is exactly 1 once a class has any
        training data.
        """
        kw = dict(p_max=1.0, tau=1e-9, jitter_sigma=0.0, fp_rate=0.0,
                  confusion=identity_confusion(), seed=seed)
        kw.update(overrides)
        return cls(**kw)


@dataclass(frozen=True)
class SyntheticState:
    """Per-class detection probabilities of one trained synthetic model."""

    probabilities: tuple[float, ...]
    training_counts: tuple[int, ...]

    def p(self, label: ClassLabel) -> float:
        return self.probabilities[label.index]


def detection_probability(n: float, p_max: float, tau: float) -> float:
    return p_max * -math.expm1(-n / tau)


def training_counts(training: AnnotationStore) -> tuple[int, ...]:
    """Tagged 2D boxes (ground truth and mined, upsampling copies included)
    on the train split and the unlabeled pool."""
    usable = set(training.volume_ids(Split.TRAIN)) | set(training.volume_ids(Split.UNLABELED_POOL))
    counts = [0] * N_CLASSES
    for a in training.ann2d:
        if a.tag is not None and a.volume_id in usable:
            counts[a.tag.index] += a.copies
    return tuple(counts)


def synth_train(params: SyntheticDetectorParams, training: AnnotationStore) -> SyntheticState:
    counts = training_counts(training)
    probs = tuple(detection_probability(n, params.p_max, params.tau) for n in counts)
    return SyntheticState(probs, counts)


def volume_rng(seed: int, volume_id: str) -> np.random.Generator:
    digest = hashlib.sha256(volume_id.encode("utf-8")).digest()
    return np.random.default_rng([seed, int.from_bytes(digest[:8], "little")])


def _jitter(box: Box2D, noise: np.ndarray, sigma: float) -> Box2D:
    w, h = box.width, box.height
    x1 = box.x1 + noise[0] * sigma * w
    y1 = box.y1 + noise[1] * sigma * h
    x2 = box.x2 + noise[2] * sigma * w
    y2 = box.y2 + noise[3] * sigma * h
    x1, x2 = sorted((x1, x2))
    y1, y2 = sorted((y1, y2))
    # keep at least one pixel of extent and stay in frame
    if x2 - x1 < 1.0:
        cx = 0.5 * (x1 + x2)
        x1, x2 = cx - 0.5, cx + 0.5
    if y2 - y1 < 1.0:
        cy = 0.5 * (y1 + y2)
        y1, y2 = cy - 0.5, cy + 0.5
    x1, y1 = max(x1, 0.0), max(y1, 0.0)
    x2, y2 = min(x2, IMAGE_SIZE), min(y2, IMAGE_SIZE)
    if x2 - x1 < 1.0:
        x1, x2 = (0.0, 1.0) if x1 <= 0.0 else (IMAGE_SIZE - 1.0, IMAGE_SIZE)
    if y2 - y1 < 1.0:
        y1, y2 = (0.0, 1.0) if y1 <= 0.0 else (IMAGE_SIZE - 1.0, IMAGE_SIZE)
    return Box2D(x1, y1, x2, y2)


def synth_predict(
    params: SyntheticDetectorParams,
    state: SyntheticState,
    volume_id: str,
    hidden_truth: Sequence[Annotation2D],
    num_slices: int,
    seed: Optional[int] = None,
) -> list[list[ScoredBox2D]]:
    """Simulated predictions for one volume, one list per epoch."""
    rng = volume_rng(params.seed if seed is None else seed, volume_id)
    cum = np.cumsum(np.asarray(params.confusion), axis=1)
    truth = sorted(hidden_truth, key=Annotation2D.sort_key)
    out: list[list[ScoredBox2D]] = []
    for _ in range(params.epochs):
        boxes: list[ScoredBox2D] = []
        n = len(truth)
        u_detect = rng.random(n)
        noise = rng.standard_normal((n, 4))
        u_tag = rng.random(n)
        scores = rng.beta(params.score_tp_alpha, params.score_tp_beta, n)
        for k, t in enumerate(truth):
            if t.tag is None:
                continue
            if not u_detect[k] < state.p(t.tag):
                continue
            box = t.box if params.jitter_sigma == 0 else _jitter(t.box, noise[k], params.jitter_sigma)
            row = cum[t.tag.index]
            j = min(int(np.searchsorted(row, u_tag[k] * row[-1], side="right")), N_CLASSES - 1)
            boxes.append(ScoredBox2D(box, t.slice_index, float(scores[k]), CLASSES[j], volume_id))

        n_fp = int(rng.poisson(params.fp_rate)) if params.fp_rate > 0 else 0
        if n_fp:
            z = rng.integers(0, num_slices, n_fp)
            centers = rng.uniform(24.0, IMAGE_SIZE - 24.0, (n_fp, 2))
            sizes = rng.uniform(8.0, 48.0, (n_fp, 2))
            tags = rng.integers(0, N_CLASSES, n_fp)
            fp_scores = rng.beta(params.score_fp_alpha, params.score_fp_beta, n_fp)
            for k in range(n_fp):
                (cx, cy), (w, h) = centers[k], sizes[k]
                box = Box2D(max(cx - w / 2, 0.0), max(cy - h / 2, 0.0),
                            min(cx + w / 2, IMAGE_SIZE), min(cy + h / 2, IMAGE_SIZE))
                boxes.append(ScoredBox2D(box, int(z[k]), float(fp_scores[k]), CLASSES[int(tags[k])], volume_id))
        boxes.sort(key=lambda b: (b.slice_index, b.sort_key()))
        out.append(boxes)
    return out


# --------------------------------------------------------------------------
# hidden truth
# --------------------------------------------------------------------------


def slice_boxes(lesion: Annotation3D) -> list[Annotation2D]:
    """Per-slice boxes of a 3D lesion, tapering toward its slice ends.

    The middle slice carries the full footprint; a slice at relative distance
    ``r`` from the middle is scaled by ``sqrt(1 - 0.75 r^2)`` about the
    footprint center, so the end slices are at least half size.
    """
    b = lesion.box
    cx, cy = 0.5 * (b.x1 + b.x2), 0.5 * (b.y1 + b.y2)
    hw, hh = 0.5 * (b.x2 - b.x1), 0.5 * (b.y2 - b.y1)
    mid = 0.5 * (b.z1 + b.z2)
    half = 0.5 * (b.z2 - b.z1) + 0.5
    out = []
    for z in range(b.z1, b.z2 + 1):
        r = abs(z - mid) / half
        s = math.sqrt(1.0 - 0.75 * r * r)
        box = Box2D(cx - s * hw, cy - s * hh, cx + s * hw, cy + s * hh)
        out.append(Annotation2D(lesion.volume_id, z, box, lesion.tag))
    return out


def key_slice(lesion: Annotation3D) -> int:
    """The slice a single-slice (RECIST-style) annotation would be drawn on."""
    return (lesion.box.z1 + lesion.box.z2) // 2


class SyntheticDetector(DetectorAdapter):
    """Adapter over :func:`synth_train` / :func:`synth_predict`.

    ``truth`` holds the full 3D lesions of every volume the detector may be
    asked about; the pipeline itself never reads it.
    """

    def __init__(
        self,
        params: SyntheticDetectorParams,
        truth: Mapping[str, Sequence[Annotation3D]],
        num_slices: Mapping[str, int],
    ):
        self.params = params
        self.num_slices = dict(num_slices)
        self._truth2d = {
            vid: [b for les in lesions for b in slice_boxes(les)] for vid, lesions in truth.items()
        }

    @classmethod
    def from_truth_store(cls, params: SyntheticDetectorParams, truth: AnnotationStore) -> "SyntheticDetector":
        return cls(params, truth.ann3d_by_volume(), {v.volume_id: v.num_slices for v in truth.volumes})

    @property
    def epochs(self) -> int:
        return self.params.epochs

    def train(self, training: AnnotationStore) -> SyntheticState:
        return synth_train(self.params, training)

    def predict_epochs(self, state: SyntheticState, volume_id: str) -> list[list[ScoredBox2D]]:
        if volume_id not in self.num_slices:
            raise KeyError(f"synthetic detector knows nothing about volume {volume_id!r}")
        return synth_predict(
            self.params, state, volume_id, self._truth2d.get(volume_id, ()), self.num_slices[volume_id]
        )

    def predict(self, state: SyntheticState, volume_id: str) -> list[ScoredBox2D]:
        return self.predict_epochs(state, volume_id)[0]
