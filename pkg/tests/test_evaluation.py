import random

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lesionforge.dataset import Annotation3D
from lesionforge.evaluation import (
    FP_POINTS,
    ConfusionMatrix,
    confusion,
    evaluate,
    froc_svg,
    match_volume,
    sweep_sensitivity,
    write_confusion,
    write_metrics,
)
from lesionforge.geometry import CLASSES, Box2D, Box3D, ClassLabel, ScoredBox2D
from lesionforge.stacking import Lesion3D
from oracles import brute_froc

L, A = ClassLabel.LIVER, ClassLabel.ABDOMEN


def pred(coords, score, tag=L, vid="v"):
    x1, y1, x2, y2, z1, z2 = coords
    members = [ScoredBox2D(Box2D(x1, y1, x2, y2), z, score, tag, vid) for z in range(z1, z2 + 1)]
    return Lesion3D.from_members(members, volume_id=vid)


def gt(coords, tag=L, vid="v"):
    return Annotation3D(vid, Box3D(*coords), tag)


BOX = (0, 0, 10, 10, 2, 4)


def test_perfect_predictions_all_tp():
    gts = [gt(BOX), gt((20, 20, 30, 30, 0, 1), A)]
    m = match_volume([pred(g.box.as_tuple(), 1.0, g.tag) for g in gts], gts)
    assert m.is_tp == [True, True]


def test_one_gt_two_preds():
    m = match_volume([pred(BOX, 0.6), pred((1, 0, 10, 10, 2, 4), 0.9)], [gt(BOX)])
    assert m.is_tp == [True, False]
    assert m.scores == [0.9, 0.6]


def test_wrong_tag():
    p, g = [pred(BOX, 0.9, A)], [gt(BOX, L)]
    assert match_volume(p, g, tag_aware=True).is_tp == [False]
    assert match_volume(p, g, tag_aware=False).is_tp == [True]


def test_threshold_inclusive_and_measure():
    g = gt((0, 0, 10, 10, 0, 9))
    p = pred((0, 0, 10, 10, 7, 9), 0.9)  # 3 of 10 slices
    assert match_volume([p], [g], "iou", 0.3).is_tp == [True]
    assert match_volume([p], [g], "iou", 0.31).is_tp == [False]
    assert match_volume([p], [g], "iobb", 1.0).is_tp == [True]


def test_iou_threshold_one_requires_identity():
    g = gt(BOX)
    assert match_volume([pred(BOX, 0.5)], [g], "iou", 1.0).is_tp == [True]
    assert match_volume([pred((0, 0, 10, 10.001, 2, 4), 0.5)], [g], "iou", 1.0).is_tp == [False]


def test_fig1_style_proposal_is_tp():
    # GT spans slices 58-73, the proposal 53-73 with the same footprint
    g = gt((100, 100, 140, 130, 58, 73))
    p = pred((100, 100, 140, 130, 53, 73), 0.8)
    assert match_volume([p], [g], "iou", 0.3).is_tp == [True]
    assert match_volume([p], [g], "iobb", 0.3).is_tp == [True]


def test_sweep_examples():
    # 1 volume: TP at 0.9, eight FPs at 0.95
    s = sweep_sensitivity([0.9], [0.95] * 8, 1, 1, (4.0, 8.0))
    assert s == [0.0, 1.0]
    # 2 volumes: TPs at 0.9, one FP at 0.95; 0.5 FP/volume allows that FP
    assert sweep_sensitivity([0.9, 0.9], [0.95], 2, 2, (0.25, 0.5)) == [0.0, 1.0]
    assert sweep_sensitivity([], [], 0, 1) is None


def test_perfect_froc_and_cross_volume_zero():
    gts = {"a": [gt(BOX, vid="a")], "b": [gt((5, 5, 20, 20, 0, 3), A, vid="b")]}
    preds = {v: [pred(g.box.as_tuple(), 1.0, g.tag, v) for g in gs] for v, gs in gts.items()}
    res = evaluate(preds, gts)
    assert res.overall == [1.0] * 7 and res.average == 1.0
    swapped = {"a": [pred(gts["b"][0].box.as_tuple(), 1.0, A, "a")], "b": [pred(BOX, 1.0, L, "b")]}
    assert evaluate(swapped, gts).overall == [0.0] * 7


def test_empty_predictions():
    res = evaluate({}, {"v": [gt(BOX)]})
    assert res.overall == [0.0] * 7
    assert res.per_class["liver"] == [0.0] * 7
    assert res.per_class["bone"] is None


def test_undefined_class_left_out_of_mean():
    res = evaluate({"v": [pred(BOX, 0.9)]}, {"v": [gt(BOX)]})
    assert res.mean_class_sensitivity_at(4.0) == 1.0
    assert res.sensitivity_at_4fp["lung"] is None


def test_per_class_fp_accounting():
    gts = {"v": [gt(BOX, L)]}
    preds = {"v": [pred(BOX, 0.5, L)] + [pred((50 + 10 * i, 50, 55 + 10 * i, 55, 0, 0), 0.9, A) for i in range(3)]}
    by_class = evaluate(preds, gts, fp_points=(0.125, 1.0), per_class_fp="class")
    assert by_class.per_class["liver"] == [1.0, 1.0]
    glob = evaluate(preds, gts, fp_points=(0.125, 1.0, 4.0), per_class_fp="global")
    assert glob.per_class["liver"] == [0.0, 0.0, 1.0]


def test_confusion_examples():
    assert np.array_equal(ConfusionMatrix().counts, np.zeros((8, 8)))
    m = match_volume([pred(BOX, 0.9, A)], [gt(BOX, L)], tag_aware=False)
    cm = confusion([m])
    row = cm.normalized[L.index]
    assert row[A.index] == 1.0 and row.sum() == 1.0
    gts = [gt((i * 20, 0, i * 20 + 10, 10, 0, 0), c) for i, c in enumerate(CLASSES)]
    m = match_volume([pred(g.box.as_tuple(), 0.9, g.tag) for g in gts], gts, tag_aware=False)
    assert np.array_equal(confusion([m]).normalized, np.eye(8))


# -- oracle comparison ------------------------------------------------------------


def random_case(rng: random.Random):
    n_vol = rng.randint(1, 5)
    vols = [f"v{i}" for i in range(n_vol)]
    tags = CLASSES[:3]
    raw = []
    for v in vols:
        gts = []
        for _ in range(rng.randint(0, 4)):
            x, y, z = rng.randint(0, 40), rng.randint(0, 40), rng.randint(0, 8)
            gts.append(((x, y, x + rng.randint(4, 15), y + rng.randint(4, 15), z, z + rng.randint(0, 4)),
                        rng.choice(tags)))
        raw.append((v, [], gts))
    for _ in range(rng.randint(0, 30)):
        v, preds, gts = rng.choice(raw)
        if gts and rng.random() < 0.6:
            base, tag = rng.choice(gts)
            c = [base[0] + rng.randint(-3, 3), base[1] + rng.randint(-3, 3), base[2] + rng.randint(-3, 3),
                 base[3] + rng.randint(-3, 3), base[4] + rng.randint(-1, 1), base[5] + rng.randint(-1, 1)]
            c[0], c[1], c[4] = max(c[0], 0), max(c[1], 0), max(c[4], 0)
            c[2], c[3], c[5] = max(c[2], c[0] + 1), max(c[3], c[1] + 1), max(c[5], c[4])
            if rng.random() < 0.3:
                tag = rng.choice(tags)
        else:
            x, y, z = rng.randint(0, 50), rng.randint(0, 50), rng.randint(0, 8)
            c = [x, y, x + rng.randint(3, 12), y + rng.randint(3, 12), z, z + rng.randint(0, 3)]
            tag = rng.choice(tags)
        preds.append((tuple(c), rng.choice([0.1, 0.3, 0.5, 0.7, 0.9, round(rng.random(), 3)]), tag))
    return raw


def check_case(seed, measure, tag_aware):
    raw = random_case(random.Random(seed))
    preds = {v: [pred(c, s, t, v) for c, s, t in ps] for v, ps, _ in raw}
    gts = {v: [gt(c, t, v) for c, t in gs] for v, _, gs in raw}
    res = evaluate(preds, gts, [v for v, _, _ in raw], measure, 0.3, tag_aware)
    want = brute_froc([(ps, gs) for _, ps, gs in raw], FP_POINTS, measure, 0.3, tag_aware)
    assert res.overall == want


@pytest.mark.parametrize("seed", range(30))
def test_froc_matches_oracle(seed):
    check_case(seed, "iobb", True)


@given(st.integers(0, 10**6), st.sampled_from(["iobb", "iou"]), st.booleans())
def test_froc_matches_oracle_property(seed, measure, tag_aware):
    check_case(seed, measure, tag_aware)


@given(st.integers(0, 10**6))
def test_shuffle_invariance_and_monotone(seed):
    rng = random.Random(seed)
    raw = random_case(rng)
    gts = {v: [gt(c, t, v) for c, t in gs] for v, _, gs in raw}
    preds = {v: [pred(c, s, t, v) for c, s, t in ps] for v, ps, _ in raw}
    vids = [v for v, _, _ in raw]
    res = evaluate(preds, gts, vids)
    shuffled = {v: rng.sample(ps, len(ps)) for v, ps in preds.items()}
    res2 = evaluate(shuffled, gts, vids)
    assert res.metric_rows() == res2.metric_rows()
    for series in [res.overall, res.detection_only, *res.per_class.values()]:
        if series is not None:
            assert series == sorted(series)
            assert all(0 <= s <= 1 for s in series)


@given(st.integers(0, 10**6))
def test_per_class_bounded_by_detection_only_with_exact_tags(seed):
    # with every prediction carrying its GT's tag the per-class curve cannot beat detection-only
    rng = random.Random(seed)
    raw = random_case(rng)
    gts = {v: [gt(c, t, v) for c, t in gs] for v, _, gs in raw}
    preds = {}
    for v, ps, gs in raw:
        preds[v] = [pred(g[0], rng.choice([0.2, 0.5, 0.8]), g[1], v) for g in gs if rng.random() < 0.7]
    res = evaluate(preds, gts, [v for v, _, _ in raw])
    if res.detection_only is None:
        return
    for c in CLASSES:
        series = res.per_class[c.value]
        if series is not None:
            n_c = res.gt_per_class[c.value]
            # compare absolute TP counts: class hits can never exceed all hits
            assert all(s * n_c <= d * res.total_gt + 1e-9 for s, d in zip(series, res.detection_only))
    assert res.overall == res.detection_only


def test_writers(tmp_path):
    gts = {"v": [gt(BOX)]}
    res = evaluate({"v": [pred(BOX, 0.9)]}, gts)
    write_metrics(res, tmp_path / "m.csv")
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "class,fp_per_volume,sensitivity,num_gt"
    assert "all,4,1.000000,1" in lines
    assert "all,average,1.000000,1" in lines
    assert "bone,4,,0" in lines
    write_confusion(res.confusion, tmp_path / "c.csv")
    text = (tmp_path / "c.csv").read_text().splitlines()
    assert text[0].startswith("kind,gt_tag,bone,")
    assert len(text) == 1 + 16
    svg = froc_svg(res)
    assert svg.startswith("<svg") and "</svg>" in svg
