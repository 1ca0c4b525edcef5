"""Multi-round self-training: train, mine, rebalance, merge, repeat.

Round 0 is the baseline model trained on the initial store.  Round r >= 1
mines with the model of round r-1 at ``policy.thresholds[r-1]``, merges the
accepted lesions, and retrains from scratch on the grown store.
"""

from __future__ import annotations

import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence

from lesionforge.config import PipelineConfig
from lesionforge.dataset import (
    AnnotationStore,
    Split,
    map_tags_2d_to_3d,
    save_store,
    write_csv,
)
from lesionforge.detector import DetectorAdapter
from lesionforge.evaluation import (
    FrocResult,
    evaluate,
    write_confusion,
    write_froc_svg,
    write_metrics,
)
from lesionforge.fusion import fuse_by_slice
from lesionforge.mining import (
    RoundReport,
    balance_upsample,
    build_report,
    filter_by_confidence,
    group_by_class,
    merge_into_training,
)
from lesionforge.stacking import Lesion3D, stack_2d_to_3d

log = logging.getLogger(__name__)

MINING_SPLITS = (Split.TRAIN, Split.UNLABELED_POOL)


class InvariantError(RuntimeError):
    """A pipeline invariant broke mid-run."""

    def __init__(self, round_index: int, message: str):
        self.round_index = round_index
        super().__init__(f"round {round_index}: {message}")


@dataclass
class RoundArtifact:
    round_index: int
    threshold: Optional[float]
    store: AnnotationStore
    state: Any
    report: Optional[RoundReport]
    validation: FrocResult
    snapshot_path: Optional[Path] = None

    @property
    def score(self) -> float:
        """Model-selection metric: mean validation sensitivity over the FP points."""
        return self.validation.average or 0.0


# --------------------------------------------------------------------------
# prediction
# --------------------------------------------------------------------------


def lesions_from_sources(
    sources: Sequence[Sequence], volume_id: str, cfg: PipelineConfig
) -> list[Lesion3D]:
    fused = fuse_by_slice(sources, cfg.fusion(len(sources)))
    return stack_2d_to_3d(fused, cfg.link_iou, volume_id=volume_id, score_mode=cfg.score_mode)


def _parallel_map(fn, volume_ids: Sequence[str], threads: int) -> dict[str, list[Lesion3D]]:
    vids = sorted(volume_ids)
    if threads <= 1 or len(vids) <= 1:
        return {v: fn(v) for v in vids}
    with ThreadPoolExecutor(max_workers=threads) as pool:
        results = list(pool.map(fn, vids))
    return dict(zip(vids, results))


def predict_volumes(
    detector: DetectorAdapter,
    state,
    volume_ids: Sequence[str],
    cfg: PipelineConfig,
    threads: Optional[int] = None,
) -> dict[str, list[Lesion3D]]:
    """3D proposals per volume: epochs fused with WBF, then stacked."""
    def one(vid):
        return lesions_from_sources(detector.predict_epochs(state, vid), vid, cfg)

    return _parallel_map(one, volume_ids, threads or cfg.threads)


def ensemble_predict(
    detector: DetectorAdapter,
    states: Sequence,
    volume_ids: Sequence[str],
    cfg: PipelineConfig,
    threads: Optional[int] = None,
) -> dict[str, list[Lesion3D]]:
    """Fuse the per-slice predictions of several trained states, then stack.

    Each state contributes its first (best) epoch as one WBF source, so the
    fusion source count equals the number of states.
    """
    if not states:
        raise ValueError("ensemble_predict needs at least one state")

    def one(vid):
        sources = [detector.predict_epochs(s, vid)[0] for s in states]
        return lesions_from_sources(sources, vid, cfg)

    return _parallel_map(one, volume_ids, threads or cfg.threads)


def evaluate_predictions(
    predictions: Mapping[str, Sequence[Lesion3D]],
    gt_store: AnnotationStore,
    volume_ids: Sequence[str],
    cfg: PipelineConfig,
) -> FrocResult:
    gts = gt_store.ann3d_by_volume()
    return evaluate(
        predictions,
        {v: gts.get(v, []) for v in volume_ids},
        volume_ids=list(volume_ids),
        measure=cfg.measure,
        threshold=cfg.eval_threshold,
        tag_aware=cfg.tag_aware,
        fp_points=cfg.fp_points,
        per_class_fp=cfg.per_class_fp,
    )


# --------------------------------------------------------------------------
# the loop
# --------------------------------------------------------------------------


def _training_view(store: AnnotationStore) -> AnnotationStore:
    return store.select(splits=MINING_SPLITS)


def _check_inputs(cfg: PipelineConfig, store: AnnotationStore) -> None:
    if cfg.policy.rounds != cfg.rounds:
        raise ValueError(f"policy has {cfg.policy.rounds} thresholds but rounds = {cfg.rounds}")
    if not store.volume_ids(Split.TRAIN):
        raise ValueError("store has no train-split volumes")
    if not store.volume_ids(cfg.eval_split):
        raise ValueError(f"store has no {cfg.eval_split}-split volumes to evaluate on")


def run_self_training(
    cfg: PipelineConfig,
    store: AnnotationStore,
    detector: DetectorAdapter,
    snapshot_dir: Optional[str | os.PathLike] = None,
) -> list[RoundArtifact]:
    """Run round 0 plus ``cfg.rounds`` mining rounds; one artifact per round."""
    _check_inputs(cfg, store)
    gt_eval = map_tags_2d_to_3d(store)
    val_ids = gt_eval.volume_ids(cfg.eval_split)
    mine_ids = [v for s in MINING_SPLITS for v in store.volume_ids(s)]
    baseline_gt = store.ground_truth()

    def snapshot(k: int, s: AnnotationStore) -> Optional[Path]:
        if snapshot_dir is None:
            return None
        return save_store(s, Path(snapshot_dir) / f"round_{k}")

    state = detector.train(_training_view(store))
    val = evaluate_predictions(predict_volumes(detector, state, val_ids, cfg), gt_eval, val_ids, cfg)
    artifacts = [RoundArtifact(0, None, store, state, None, val, snapshot(0, store))]
    log.info("round 0: val average sensitivity %.4f", artifacts[0].score)

    current = store
    for r in range(1, cfg.rounds + 1):
        t = cfg.policy.thresholds[r - 1]
        preds = predict_volumes(detector, state, mine_ids, cfg)
        proposals = [les for vid in sorted(preds) for les in preds[vid]]
        accepted = filter_by_confidence(proposals, r - 1, cfg.policy)
        grouped = group_by_class(accepted)
        if not accepted:
            balanced = grouped
        elif cfg.policy.upsample:
            balanced = balance_upsample(grouped, seed=cfg.seed * 1000 + r)
        else:
            balanced = grouped
        mined = [les for c in balanced for les in balanced[c]]
        report = build_report(r, t, proposals, accepted, balanced, current)

        merged = merge_into_training(current, mined, cfg.gt_overlap_iou)
        if merged.ground_truth() != baseline_gt:
            raise InvariantError(r, "ground-truth records changed during merge")
        if len(merged.ann2d) < len(current.ann2d):
            raise InvariantError(r, "training store shrank")
        report.boxes_added = len(merged.ann2d) - len(current.ann2d)
        current = merged

        state = detector.train(_training_view(current))
        val = evaluate_predictions(predict_volumes(detector, state, val_ids, cfg), gt_eval, val_ids, cfg)
        artifacts.append(RoundArtifact(r, t, current, state, report, val, snapshot(r, current)))
        log.info(
            "round %d (t=%.2f): %d proposals, %d mined, %d boxes added, val average %.4f",
            r, t, len(proposals), report.accepted, report.boxes_added, artifacts[-1].score,
        )
    return artifacts


def select_ensemble(artifacts: Sequence[RoundArtifact], k: int) -> list[int]:
    """Indices of the ``k`` best rounds by validation average (ties: earlier round)."""
    ranked = sorted(artifacts, key=lambda a: (-a.score, a.round_index))
    return sorted(a.round_index for a in ranked[:k])


# --------------------------------------------------------------------------
# full run with on-disk outputs
# --------------------------------------------------------------------------


@dataclass
class RunResult:
    artifacts: list[RoundArtifact]
    ensemble_rounds: list[int]
    test_results: dict[str, FrocResult]
    out_dir: Optional[Path] = None
    paths: list[tuple[str, str, Path]] = field(default_factory=list)


def _metric_rows(label: str, result: FrocResult) -> list[list]:
    return [[label, *row] for row in result.metric_rows()]


def run_pipeline(
    cfg: PipelineConfig,
    store: AnnotationStore,
    detector: DetectorAdapter,
    out_dir: Optional[str | os.PathLike] = None,
) -> RunResult:
    """Self-training, then per-round and ensemble evaluation on the test split.

    With ``out_dir`` the run writes snapshots, round reports, metrics,
    confusion matrix, FROC plot and a manifest.
    """
    started = time.time()
    root = Path(out_dir) if out_dir is not None else None
    if root is not None:
        root.mkdir(parents=True, exist_ok=True)
    artifacts = run_self_training(cfg, store, detector, root / "snapshots" if root else None)

    gt_eval = map_tags_2d_to_3d(store)
    test_split = Split.TEST if store.volume_ids(Split.TEST) else Split(cfg.eval_split)
    test_ids = gt_eval.volume_ids(test_split)
    results: dict[str, FrocResult] = {}
    for a in artifacts:
        preds = predict_volumes(detector, a.state, test_ids, cfg)
        results[str(a.round_index)] = evaluate_predictions(preds, gt_eval, test_ids, cfg)
    ens_rounds = select_ensemble(artifacts, cfg.ensemble_top_k)
    states = [artifacts[k].state for k in ens_rounds]
    ens_preds = ensemble_predict(detector, states, test_ids, cfg)
    results["ensemble"] = evaluate_predictions(ens_preds, gt_eval, test_ids, cfg)

    result = RunResult(artifacts, ens_rounds, results, root)
    if root is None:
        return result

    paths = result.paths
    for a in artifacts:
        paths.append(("snapshot", str(a.round_index), a.snapshot_path))
        if a.report is not None:
            paths.append(("round_report", str(a.round_index), a.report.write(root)))

    header = ("round",) + FrocResult.METRIC_COLUMNS
    val_rows = [row for a in artifacts for row in _metric_rows(str(a.round_index), a.validation)]
    write_csv(root / "val_metrics.csv", header, val_rows)
    paths.append(("val_metrics", "", root / "val_metrics.csv"))
    test_rows = [row for label, res in results.items() for row in _metric_rows(label, res)]
    write_csv(root / "metrics.csv", header, test_rows)
    paths.append(("metrics", "", root / "metrics.csv"))
    write_confusion(results["ensemble"].confusion, root / "confusion.csv")
    paths.append(("confusion", "ensemble", root / "confusion.csv"))
    write_metrics(results["ensemble"], root / "ensemble_metrics.csv")
    paths.append(("ensemble_metrics", "ensemble", root / "ensemble_metrics.csv"))
    write_froc_svg(results["ensemble"], root / "froc.svg", title="FROC, ensemble of rounds")
    paths.append(("froc_svg", "ensemble", root / "froc.svg"))

    manifest_rows = [
        ["meta", "", "config_hash", cfg.config_hash()],
        ["meta", "", "seed", str(cfg.seed)],
        ["meta", "", "detector_seed", str(cfg.detector.seed)],
        ["meta", "", "thresholds", " ".join(f"{t:g}" for t in cfg.policy.thresholds)],
        ["meta", "", "ensemble_rounds", " ".join(map(str, ens_rounds))],
    ]
    manifest_rows += [[kind, rnd, "path", p.relative_to(root).as_posix()] for kind, rnd, p in paths]
    write_csv(root / "run_manifest.csv", ("kind", "round", "name", "value"), manifest_rows)

    # wall-clock data stays out of the CSV outputs so they remain reproducible
    (root / "run_manifest.json").write_text(
        json.dumps(
            {
                "config_hash": cfg.config_hash(),
                "config": cfg.to_dict(),
                "started": started,
                "finished": time.time(),
                "artifacts": [p.relative_to(root).as_posix() for _, _, p in paths]
                + ["run_manifest.csv"],
            },
            indent=2,
            sort_keys=True,
        )
        + "\n",
        encoding="utf-8",
    )
    return result
