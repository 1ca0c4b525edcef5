"""Bundled synthetic dataset: annotation store plus the hidden 3D truth.

Default layout is 20 volumes (8 train, 3 val, 3 test, 6 unlabeled pool),
10 lesions each, tags drawn with the train-split class imbalance of the
public DeepLesion subset.  Lesions in one volume occupy distinct cells of a
4x4 grid, so they never overlap in-plane.

Train volumes carry one tagged 2D box per lesion on its middle slice.  Val
volumes carry the same 2D boxes and tagged 3D boxes; test volumes carry 2D
boxes and *untagged* 3D boxes, to be tagged by
:func:`lesionforge.dataset.map_tags_2d_to_3d`.  The pool has no annotations.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from lesionforge.dataset import (
    Annotation2D,
    Annotation3D,
    AnnotationStore,
    Split,
    VolumeMeta,
    quantize,
    quantize_box,
    save_store,
)
from lesionforge.detector import key_slice, slice_boxes
from lesionforge.geometry import CLASSES, Box3D

# train-split label counts used as sampling weights (bone .. pelvis)
CLASS_WEIGHTS = np.array([97, 788, 613, 426, 1039, 195, 288, 321], dtype=np.float64)

SPLIT_LAYOUT = ((Split.TRAIN, 8), (Split.VAL, 3), (Split.TEST, 3), (Split.UNLABELED_POOL, 6))


@dataclass(frozen=True)
class Fixture:
    store: AnnotationStore
    truth: AnnotationStore


def make_fixture(seed: int = 7, lesions_per_volume: int = 10, layout=SPLIT_LAYOUT) -> Fixture:
    rng = np.random.default_rng(seed)
    probs = CLASS_WEIGHTS / CLASS_WEIGHTS.sum()
    volumes, truth3d, ann2d, ann3d = [], [], [], []
    forced = list(CLASSES)  # first train lesions cover every class once
    k = 0
    for split, count in layout:
        for _ in range(count):
            vid = f"vol{k:03d}"
            n_slices = int(rng.integers(40, 65))
            vol = VolumeMeta(vid, f"pat{k:03d}", n_slices, split)
            volumes.append(vol)
            k += 1
            cells = rng.choice(16, size=lesions_per_volume, replace=False)
            for cell in sorted(cells):
                gx, gy = divmod(int(cell), 4)
                w, h = rng.uniform(16.0, 72.0, 2)
                cx = gx * 128 + 64 + rng.uniform(-20.0, 20.0)
                cy = gy * 128 + 64 + rng.uniform(-20.0, 20.0)
                depth = int(rng.integers(2, 11))
                z1 = int(rng.integers(0, n_slices - depth + 1))
                if split is Split.TRAIN and forced:
                    tag = forced.pop(0)
                else:
                    tag = CLASSES[int(rng.choice(len(CLASSES), p=probs))]
                box = Box3D(quantize(cx - w / 2), quantize(cy - h / 2), quantize(cx + w / 2),
                            quantize(cy + h / 2), z1, z1 + depth - 1)
                lesion = Annotation3D(vid, box, tag)
                truth3d.append(lesion)
                if split is Split.UNLABELED_POOL:
                    continue
                z = key_slice(lesion)
                key_box = quantize_box(next(b for b in slice_boxes(lesion) if b.slice_index == z).box)
                ann2d.append(Annotation2D(vid, z, key_box, tag))
                if split is Split.VAL:
                    ann3d.append(lesion)
                elif split is Split.TEST:
                    ann3d.append(Annotation3D(vid, box, None))
    store = AnnotationStore(tuple(volumes), tuple(ann2d), tuple(ann3d))
    truth = AnnotationStore(tuple(volumes), (), tuple(truth3d))
    return Fixture(store, truth)


def write_fixture(directory, seed: int = 7) -> Fixture:
    root = Path(directory)
    fx = make_fixture(seed)
    save_store(fx.store, root / "store")
    save_store(fx.truth, root / "truth")
    return fx


if __name__ == "__main__":  # pragma: no cover
    out = sys.argv[1] if len(sys.argv) > 1 else "fixture"
    write_fixture(out)
    print(f"wrote {out}/store and {out}/truth")
