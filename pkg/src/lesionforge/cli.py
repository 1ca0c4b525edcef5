"""Command-line entry point.

    lesionforge ingest   --input DIR [--output DIR] [--no-map-tags] [--protect-split test]
    lesionforge selftrain --config FILE --out DIR [--policy static|variable] [--rounds N] [--seed S]
    lesionforge eval     --pred FILE --gt FILE --out DIR [--volumes FILE] [--measure iobb|iou]
    lesionforge report   --run DIR

Exit codes: 0 success, 2 input/format error, 3 invariant violation during a run.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

from lesionforge import __version__
from lesionforge.config import ConfigError, load_config
from lesionforge.dataset import (
    Annotation3D,
    AnnotationStore,
    SchemaError,
    Split,
    StoreIntegrityError,
    class_counts,
    load_store,
    map_tags_2d_to_3d,
    remove_patient_overlap,
    save_store,
    untagged_3d,
)
from lesionforge.geometry import CLASSES, Box2D, Box3D, ClassLabel, ScoredBox2D
from lesionforge.stacking import Lesion3D

log = logging.getLogger("lesionforge")

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_INVARIANT = 3

TABLE_NAMES = {
    "bone": "Bone", "abdomen": "Abdomen", "mediastinum": "Mediastinum", "liver": "Liver",
    "lung": "Lung", "kidney": "Kidney", "soft_tissue": "Soft tissue", "pelvis": "Pelvis",
}
PRED_COLUMNS = ("volume_id", "x1", "y1", "x2", "y2", "z1", "z2", "tag", "score")


def _setup_logging() -> None:
    level = os.environ.get("LESIONFORGE_LOG", "WARNING").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.WARNING),
        format="%(levelname)s %(name)s: %(message)s",
    )


def _on_off(text: str) -> bool:
    if text in ("on", "true", "1", "yes"):
        return True
    if text in ("off", "false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError("expected on/off")


# --------------------------------------------------------------------------
# ingest
# --------------------------------------------------------------------------


def count_table(store: AnnotationStore) -> tuple[list[str], list[list]]:
    """Label-distribution table: one row per split plus a total row."""
    header = ["Subset", *(TABLE_NAMES[c.value] for c in CLASSES), "Total"]
    rows = []
    totals = [0] * (len(CLASSES) + 1)
    for split, name in ((Split.TRAIN, "Train"), (Split.VAL, "Val"), (Split.TEST, "Test")):
        counts = class_counts(store, split)
        values = [counts[c.value] for c in CLASSES] + [counts["total"]]
        totals = [a + b for a, b in zip(totals, values)]
        rows.append([name, *values])
    rows.append(["Total", *totals])
    return header, rows


def format_table(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    cells = [list(map(str, header))] + [list(map(str, r)) for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = []
    for k, r in enumerate(cells):
        lines.append(" | ".join(c.rjust(w) if i else c.ljust(w) for i, (c, w) in enumerate(zip(r, widths))))
        if k == 0:
            lines.append("-+-".join("-" * w for w in widths))
    return "\n".join(lines)


def cmd_ingest(args) -> int:
    store = load_store(args.input)
    if args.map_tags:
        store = map_tags_2d_to_3d(store, args.map_iou)
        left = untagged_3d(store)
        if left:
            print(f"warning: {len(left)} 3D record(s) could not be tagged", file=sys.stderr)
    if args.protect_split:
        protected = store.select(splits=[args.protect_split])
        others = store.select(splits=[s for s in Split if s.value != args.protect_split])
        kept = remove_patient_overlap(protected, others)
        dropped = len(others.volumes) - len(kept.volumes)
        store = protected.union(kept)
        if dropped:
            print(f"removed {dropped} volume(s) sharing patients with the {args.protect_split} split")
    if args.output:
        save_store(store, args.output)
    header, rows = count_table(store)
    print(format_table(header, rows))
    return EXIT_OK


# --------------------------------------------------------------------------
# selftrain
# --------------------------------------------------------------------------


def _load_inputs(cfg):
    from lesionforge.detector import SyntheticDetector
    from lesionforge.fixtures import make_fixture

    if cfg.store_path:
        store = load_store(cfg.store_path)
        if not cfg.truth_path:
            raise ConfigError("[data] truth is required when [data] store is set")
        truth = load_store(cfg.truth_path)
    else:
        fx = make_fixture(cfg.fixture_seed)
        store, truth = fx.store, fx.truth
    return store, SyntheticDetector.from_truth_store(cfg.detector, truth)


def cmd_selftrain(args) -> int:
    from lesionforge.selftrain import InvariantError, run_pipeline

    cfg = load_config(
        args.config, policy=args.policy, rounds=args.rounds, seed=args.seed, threads=args.threads
    )
    overrides = {}
    if args.measure:
        overrides["measure"] = args.measure
    if args.threshold is not None:
        overrides["eval_threshold"] = args.threshold
    if args.tag_aware is not None:
        overrides["tag_aware"] = args.tag_aware
    if overrides:
        from lesionforge.config import with_overrides

        cfg = with_overrides(cfg, **overrides)
    store, detector = _load_inputs(cfg)
    t0 = time.perf_counter()
    try:
        result = run_pipeline(cfg, store, detector, args.out)
    except InvariantError as exc:
        print(f"invariant violation in round {exc.round_index}: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    print(f"run finished in {time.perf_counter() - t0:.1f}s -> {args.out}")
    print(summary_text(result.out_dir))
    return EXIT_OK


# --------------------------------------------------------------------------
# eval
# --------------------------------------------------------------------------


def read_predictions(path) -> dict[str, list[Lesion3D]]:
    """3D predictions CSV (``volume_id,x1,y1,x2,y2,z1,z2,tag,score``)."""
    name = Path(path).name
    out: dict[str, list[Lesion3D]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader, [])]
        missing = [c for c in PRED_COLUMNS if c not in header]
        if missing:
            raise SchemaError(name, 1, missing[0], "required column missing from header")
        for line, raw in enumerate(reader, start=2):
            if not raw:
                continue
            if len(raw) != len(header):
                raise SchemaError(name, line, "", f"expected {len(header)} fields, got {len(raw)}")
            row = dict(zip(header, (f.strip() for f in raw)))
            col = ""
            try:
                col = "x1"
                coords = [float(row[c]) for c in ("x1", "y1", "x2", "y2")]
                col = "z1"
                z1, z2 = int(row["z1"]), int(row["z2"])
                col = "tag"
                tag = ClassLabel.parse(row["tag"]) if row["tag"] else None
                col = "score"
                score = float(row["score"])
                col = "x1"
                box = Box3D(*coords, z1, z2)
                # a stored prediction carries no members; its footprint stands in on every slice
                members = tuple(
                    ScoredBox2D(Box2D(*coords), z, score, tag, row["volume_id"]) for z in range(z1, z2 + 1)
                )
            except ValueError as exc:
                raise SchemaError(name, line, col, str(exc)) from None
            les = Lesion3D(members, box, tag, score, row["volume_id"])
            out.setdefault(row["volume_id"], []).append(les)
    return out


def write_predictions(preds: dict[str, Sequence[Lesion3D]], path) -> None:
    from lesionforge.dataset import format_number, write_csv

    rows = []
    for vid in sorted(preds):
        for les in preds[vid]:
            b = les.fused_box
            rows.append([vid, *map(format_number, (b.x1, b.y1, b.x2, b.y2)), b.z1, b.z2,
                         les.tag.value if les.tag else "", f"{les.score:.6f}"])
    write_csv(Path(path), PRED_COLUMNS, rows)


def read_gt(path) -> tuple[dict[str, list[Annotation3D]], set[str]]:
    """3D ground truth in ``ann3d.csv`` layout; returns records and volume ids."""
    from lesionforge.dataset import ANN3D_COLUMNS, Source, _RowReader

    r = _RowReader(Path(path), ANN3D_COLUMNS)
    out: dict[str, list[Annotation3D]] = {}
    for line, row in r.rows():
        vid = r.text(line, row, "volume_id")
        coords = [r.real(line, row, c) for c in ("x1", "y1", "x2", "y2")]
        box = r.build(line, "z1", Box3D, *coords, r.integer(line, row, "z1"), r.integer(line, row, "z2"))
        rec = Annotation3D(vid, box, r.tag(line, row), r.enum(line, row, "source", Source))
        out.setdefault(vid, []).append(rec)
    return out, set(out)


def read_volume_ids(path) -> list[str]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "volume_id" not in reader.fieldnames:
            raise SchemaError(Path(path).name, 1, "volume_id", "required column missing from header")
        return sorted({row["volume_id"] for row in reader})


def cmd_eval(args) -> int:
    from lesionforge.evaluation import evaluate, write_confusion, write_froc_svg, write_metrics

    preds = read_predictions(args.pred)
    gts, gt_vols = read_gt(args.gt)
    vids = read_volume_ids(args.volumes) if args.volumes else sorted(gt_vols | set(preds))
    unknown = sorted(set(preds) - set(vids))
    if unknown:
        raise SchemaError(Path(args.pred).name, 0, "volume_id", f"volumes not in evaluation set: {unknown[:5]}")
    result = evaluate(
        preds, gts, vids, measure=args.measure, threshold=args.threshold,
        tag_aware=args.tag_aware, per_class_fp=args.per_class_fp,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_metrics(result, out / "metrics.csv")
    write_confusion(result.confusion, out / "confusion.csv")
    write_froc_svg(result, out / "froc.svg")
    avg = result.average
    print(f"volumes: {result.n_volumes}  lesions: {result.total_gt}")
    print("sensitivity@FP: " + "  ".join(
        f"{f:g}:{'-' if s is None else f'{s:.3f}'}"
        for f, s in zip(result.fp_points, result.overall or [None] * len(result.fp_points))
    ))
    print(f"average: {'-' if avg is None else f'{avg:.4f}'}")
    return EXIT_OK


# --------------------------------------------------------------------------
# report
# --------------------------------------------------------------------------


def summary_text(run_dir) -> str:
    """Per-round sensitivity at 4 FP per class plus the FP-averaged overall value."""
    run_dir = Path(run_dir)
    table: dict[str, dict[str, str]] = {}
    with open(run_dir / "metrics.csv", newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            r = table.setdefault(row["round"], {})
            if row["class"] in TABLE_NAMES and row["fp_per_volume"] == "4":
                r[row["class"]] = row["sensitivity"]
            elif row["class"] == "all" and row["fp_per_volume"] == "average":
                r["avg"] = row["sensitivity"]
    mined: dict[str, dict[str, str]] = {}
    for p in sorted(run_dir.glob("round_*_report.csv")):
        with open(p, newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                mined.setdefault(row["round"], {})[row["class"]] = row["mined"]

    def pct(v):
        return "-" if not v else f"{100 * float(v):.1f}"

    header = ["Round", *(TABLE_NAMES[c.value] for c in CLASSES), "Sens@0.125:8FP"]
    rows = [[k, *(pct(v.get(c.value)) for c in CLASSES), pct(v.get("avg"))] for k, v in table.items()]
    text = format_table(header, rows)
    if mined:
        totals = [sum(int(m.get(c.value, 0)) for m in mined.values()) for c in CLASSES]
        text += "\n\n" + format_table(
            ["", *(TABLE_NAMES[c.value] for c in CLASSES), "Total"],
            [["# Lesions mined", *totals, sum(totals)]],
        )
    return text


def cmd_report(args) -> int:
    run = Path(args.run)
    if not (run / "metrics.csv").is_file():
        print(f"error: {run} has no metrics.csv", file=sys.stderr)
        return EXIT_INPUT
    text = summary_text(run)
    (run / "report.txt").write_text(text + "\n", encoding="utf-8")
    print(text)
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="lesionforge",
        description="Lesion detection post-processing, self-training and FROC evaluation.",
    )
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    pi = sub.add_parser("ingest", help="validate an annotation store and print label counts")
    pi.add_argument("--input", required=True, help="directory with volumes.csv, ann2d.csv, ann3d.csv")
    pi.add_argument("--output", "--out", dest="output", help="write the validated (and curated) store here")
    pi.add_argument("--map-tags", dest="map_tags", action="store_true", default=True,
                    help="assign 3D tags from overlapping tagged 2D boxes (default)")
    pi.add_argument("--no-map-tags", dest="map_tags", action="store_false", help="keep 3D tags as stored")
    pi.add_argument("--map-iou", type=float, default=0.10,
                    help="footprint IoU a 2D box must exceed (default 0.10)")
    pi.add_argument("--protect-split", choices=[s.value for s in Split],
                    help="drop volumes of other splits whose patient appears in this split")

    ps = sub.add_parser("selftrain", help="run the multi-round self-training pipeline")
    ps.add_argument("--config", help="TOML config (defaults apply when omitted)")
    ps.add_argument("--out", default="run", help="run directory")
    ps.add_argument("--policy", choices=["static", "variable"],
                    help="static 0.8 every round, or 0.8 lowered by 0.1 per round")
    ps.add_argument("--rounds", type=int, help="mining rounds (default 4)")
    ps.add_argument("--seed", type=int, help="detector and upsampling seed")
    ps.add_argument("--threads", type=int, help="worker threads; results do not depend on it")
    ps.add_argument("--measure", choices=["iobb", "iou"], help="evaluation overlap measure (default iobb)")
    ps.add_argument("--threshold", type=float, help="evaluation overlap threshold (default 0.30)")
    ps.add_argument("--tag-aware", type=_on_off, metavar="{on,off}",
                    help="require matching tags for a hit (default on)")

    pe = sub.add_parser("eval", help="FROC evaluation of 3D predictions")
    pe.add_argument("--pred", required=True, help="predictions CSV: " + ",".join(PRED_COLUMNS))
    pe.add_argument("--gt", required=True, help="ground truth in ann3d.csv layout")
    pe.add_argument("--volumes", help="volumes.csv listing every evaluated volume")
    pe.add_argument("--out", default="eval", help="output directory")
    pe.add_argument("--measure", choices=["iobb", "iou"], default="iobb")
    pe.add_argument("--threshold", type=float, default=0.30)
    pe.add_argument("--tag-aware", type=_on_off, default=True, metavar="{on,off}",
                    help="require matching tags for a hit")
    pe.add_argument("--per-class-fp", choices=["class", "global"], default="class",
                    help="count FPs per predicted class or over all predictions")
    pe.add_argument("--threads", type=int, default=1)

    pr = sub.add_parser("report", help="summarize a finished run")
    pr.add_argument("--run", required=True, help="run directory written by selftrain")
    return p


COMMANDS = {"ingest": cmd_ingest, "selftrain": cmd_selftrain, "eval": cmd_eval, "report": cmd_report}


def main(argv: Optional[Sequence[str]] = None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (SchemaError, StoreIntegrityError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (FileNotFoundError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
