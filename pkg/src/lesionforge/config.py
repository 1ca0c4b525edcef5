"""Pipeline configuration: a flat-section TOML file.

``config.example`` at the repository root is produced by
:func:`example_config` and documents every default.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any, Optional

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from lesionforge.detector import SyntheticDetectorParams, default_confusion
from lesionforge.evaluation import DEFAULT_EVAL_THRESHOLD, FP_POINTS
from lesionforge.fusion import DEFAULT_WBF_IOU, FusionConfig
from lesionforge.mining import GT_OVERLAP_IOU, MiningPolicy
from lesionforge.stacking import DEFAULT_LINK_IOU, SCORE_MODES


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    rounds: int = 4
    policy: MiningPolicy = field(default_factory=MiningPolicy.variable)
    seed: int = 0
    threads: int = 1
    # fusion
    wbf_iou: float = DEFAULT_WBF_IOU
    wbf_per_class: bool = True
    wbf_source_count: Optional[int] = None  # None: number of sources the detector returns
    # stacking
    link_iou: float = DEFAULT_LINK_IOU
    score_mode: str = "max"
    # mining
    gt_overlap_iou: float = GT_OVERLAP_IOU
    # evaluation
    measure: str = "iobb"
    eval_threshold: float = DEFAULT_EVAL_THRESHOLD
    tag_aware: bool = True
    per_class_fp: str = "class"
    fp_points: tuple[float, ...] = FP_POINTS
    eval_split: str = "val"
    ensemble_top_k: int = 3
    # data
    store_path: str = ""
    truth_path: str = ""
    fixture_seed: int = 7
    detector: SyntheticDetectorParams = field(default_factory=SyntheticDetectorParams)

    def __post_init__(self) -> None:
        if self.rounds < 1:
            raise ConfigError("rounds must be >= 1")
        if self.policy.rounds != self.rounds:
            raise ConfigError(
                f"policy has {self.policy.rounds} thresholds but rounds = {self.rounds}"
            )
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        if self.measure not in ("iobb", "iou"):
            raise ConfigError(f"measure must be 'iobb' or 'iou', got {self.measure!r}")
        if self.score_mode not in SCORE_MODES:
            raise ConfigError(f"score_mode must be one of {SCORE_MODES}")
        if self.per_class_fp not in ("class", "global"):
            raise ConfigError("per_class_fp must be 'class' or 'global'")
        if not 0.0 < self.link_iou <= 1.0:
            raise ConfigError("link_iou must be in (0, 1]")
        if not 0.0 < self.eval_threshold <= 1.0:
            raise ConfigError("eval threshold must be in (0, 1]")
        if self.ensemble_top_k < 1:
            raise ConfigError("ensemble_top_k must be >= 1")
        if list(self.fp_points) != sorted(self.fp_points) or not self.fp_points:
            raise ConfigError("fp_points must be a non-empty ascending list")

    def fusion(self, sources: int) -> FusionConfig:
        return FusionConfig(
            iou_threshold=self.wbf_iou,
            source_count=self.wbf_source_count or sources,
            per_class=self.wbf_per_class,
        )

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["policy"] = {"thresholds": list(self.policy.thresholds), "upsample": self.policy.upsample}
        d["fp_points"] = list(self.fp_points)
        d["detector"]["confusion"] = [list(r) for r in self.detector.confusion]
        return d

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


# TOML section/key -> PipelineConfig field
_KEYS = {
    "run": {"rounds": "rounds", "seed": "seed", "threads": "threads"},
    "fusion": {"iou_threshold": "wbf_iou", "per_class": "wbf_per_class", "source_count": "wbf_source_count"},
    "stacking": {"link_iou": "link_iou", "score_mode": "score_mode"},
    "mining": {"gt_overlap_iou": "gt_overlap_iou"},
    "eval": {
        "measure": "measure",
        "threshold": "eval_threshold",
        "tag_aware": "tag_aware",
        "per_class_fp": "per_class_fp",
        "fp_points": "fp_points",
        "split": "eval_split",
        "ensemble_top_k": "ensemble_top_k",
    },
    "data": {"store": "store_path", "truth": "truth_path", "fixture_seed": "fixture_seed"},
}
_POLICY_KEYS = {"policy", "thresholds", "upsample"}
_DETECTOR_KEYS = {f.name for f in fields(SyntheticDetectorParams)} | {"confusion_diagonal"}


def build_config(
    raw: dict[str, Any],
    *,
    policy: Optional[str] = None,
    rounds: Optional[int] = None,
    seed: Optional[int] = None,
    threads: Optional[int] = None,
    overrides: Optional[dict[str, Any]] = None,
) -> PipelineConfig:
    """Assemble a config from parsed TOML plus command-line overrides."""
    kw: dict[str, Any] = {}
    for section, values in raw.items():
        if not isinstance(values, dict):
            raise ConfigError(f"top-level key {section!r} must be a [section]")
        if section == "mining":
            known = set(_KEYS["mining"]) | _POLICY_KEYS
        elif section == "detector":
            known = _DETECTOR_KEYS
        elif section in _KEYS:
            known = set(_KEYS[section])
        else:
            raise ConfigError(f"unknown section [{section}]")
        for key in values:
            if key not in known:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
        if section == "detector":
            continue
        for key, target in _KEYS[section].items():
            if key in values:
                kw[target] = values[key]

    if "fp_points" in kw:
        kw["fp_points"] = tuple(float(v) for v in kw["fp_points"])
    if kw.get("wbf_source_count") == 0:
        kw["wbf_source_count"] = None

    det = dict(raw.get("detector", {}))
    if "confusion" in det:
        det["confusion"] = tuple(tuple(float(v) for v in row) for row in det["confusion"])
    if "confusion_diagonal" in det:
        det["confusion"] = default_confusion(float(det.pop("confusion_diagonal")))

    mining = raw.get("mining", {})
    upsample = bool(mining.get("upsample", True))
    name = policy or mining.get("policy")
    thresholds = mining.get("thresholds")
    default_rounds = len(thresholds) if thresholds and policy is None else 4
    n_rounds = rounds if rounds is not None else int(kw.get("rounds", default_rounds))
    kw["rounds"] = n_rounds
    try:
        if policy is None and thresholds is not None:
            pol = MiningPolicy(tuple(thresholds), upsample)
        else:
            pol = MiningPolicy.named(name or "variable", n_rounds, upsample)
        if seed is not None:
            kw["seed"] = seed
        det.setdefault("seed", int(kw.get("seed", 0)))
        if threads is not None:
            kw["threads"] = threads
        kw.update(overrides or {})
        return PipelineConfig(policy=pol, detector=SyntheticDetectorParams(**det), **kw)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def load_config(path: Optional[str | os.PathLike], **kwargs) -> PipelineConfig:
    raw: dict[str, Any] = {}
    if path:
        try:
            with open(path, "rb") as fh:
                raw = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    return build_config(raw, **kwargs)


def example_config() -> str:
    d = PipelineConfig()
    p = d.detector
    pts = ", ".join(f"{v:g}" for v in d.fp_points)
    return f"""\
# lesionforge self-training configuration (TOML). Every value shown is the default.

[run]
rounds = {d.rounds}               # mining rounds after the round-0 baseline
seed = {d.seed}                 # seeds balancing and, unless [detector] sets one, the simulator
threads = {d.threads}              # worker threads for per-volume prediction

[mining]
policy = "variable"       # "static" = 0.8 every round, "variable" = 0.8, 0.7, 0.6, 0.5
# thresholds = [0.8, 0.8, 0.8, 0.8]   # explicit per-round list; overrides policy
upsample = true           # repeat mined lesions of each class up to the largest class
gt_overlap_iou = {d.gt_overlap_iou}     # mined boxes with IoU >= this against GT on their slice are skipped

[fusion]
iou_threshold = {d.wbf_iou}     # WBF cluster admission IoU
per_class = true          # only same-tag boxes fuse
source_count = 0          # WBF source count T; 0 = number of sources the detector returns

[stacking]
link_iou = {d.link_iou}          # IoU between boxes on consecutive slices to link them
score_mode = "max"        # 3D proposal confidence: "max" or "mean" of member scores

[eval]
measure = "iobb"          # "iobb" (intersection over predicted box) or "iou"
threshold = {d.eval_threshold}         # overlap needed for a true positive (inclusive)
tag_aware = true          # a TP must also carry the right tag
per_class_fp = "class"    # per-class FP accounting: "class" or "global"
fp_points = [{pts}]
split = "val"             # split used to score rounds for ensemble selection
ensemble_top_k = {d.ensemble_top_k}        # best rounds (by validation average) fused into the ensemble

[data]
store = ""                # annotation store directory; empty = bundled synthetic fixture
truth = ""                # hidden 3D truth store for the synthetic detector
fixture_seed = {d.fixture_seed}

[detector]
p_max = {p.p_max}               # asymptotic per-class detection probability
tau = {p.tau}               # saturation constant, in training boxes per class
jitter_sigma = {p.jitter_sigma}       # coordinate noise std as a fraction of box side
fp_rate = {p.fp_rate}             # mean false-positive boxes per volume (Poisson)
confusion_diagonal = 0.85 # tag kept with this probability, else uniform over the other 7
# confusion = [[...8 values...], ...]   # full 8x8 row-stochastic matrix instead
score_tp_alpha = {p.score_tp_alpha}
score_tp_beta = {p.score_tp_beta}
score_fp_alpha = {p.score_fp_alpha}
score_fp_beta = {p.score_fp_beta}
epochs = {p.epochs}                # prediction sets per model, fused with WBF
"""


def with_overrides(cfg: PipelineConfig, **changes) -> PipelineConfig:
    try:
        return replace(cfg, **changes)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
