import csv
import dataclasses

import numpy as np
import pytest

from covpipe.phantoms import (
    BODY,
    LESION,
    LUNG,
    Ellipsoid,
    PhantomSpecError,
    _lung_mask,
    generate_dataset,
    generate_phantom,
    load_truth,
    positive_indices,
    random_spec,
)
from covpipe.segmentation import detect_slice_lungs, otsu_threshold
from covpipe.volume_io import COVID, NON_COVID, load_manifest, read_volume
from oracles import components_bfs, otsu_bruteforce

from conftest import symmetric_spec


def test_same_spec_is_bit_identical():
    spec = random_spec(3, 1, COVID)
    a, ta = generate_phantom(spec)
    b, tb = generate_phantom(spec)
    assert a.data.tobytes() == b.data.tobytes() and ta == tb


def test_intensity_levels():
    spec = random_spec(3, 2, COVID, noise_sigma=0.0)
    v, _ = generate_phantom(spec)
    assert set(np.unique(v.data).tolist()) == {np.float32(LUNG), np.float32(LESION), np.float32(BODY)}


def test_lesion_free_is_non_covid():
    spec = random_spec(3, 4, NON_COVID)
    assert spec.lesion_count == 0 and spec.label == NON_COVID
    with pytest.raises(PhantomSpecError):
        dataclasses.replace(spec, lesion_count=2).validate()


def test_spec_invariants_rejected():
    spec = symmetric_spec()
    with pytest.raises(PhantomSpecError, match="strictly inside"):
        dataclasses.replace(spec, left_ellipsoid=Ellipsoid((5, 48, 32), (10, 10, 10))).validate()
    wide = Ellipsoid((50, 48, 32), (20, 10, 10))
    with pytest.raises(PhantomSpecError, match="overlap"):
        dataclasses.replace(spec, right_ellipsoid=wide).validate()
    with pytest.raises(PhantomSpecError):
        dataclasses.replace(spec, noise_sigma=-0.1).validate()


def test_central_slice_has_exactly_two_dark_regions():
    spec = random_spec(8, 0, NON_COVID, noise_sigma=0.0)
    v, truth = generate_phantom(spec)
    z = v.nz // 2
    s = v.data[z]
    # oracle route: exhaustive Otsu and BFS components
    t = otsu_bruteforce(s)
    comps = components_bfs(s < t)
    assert len(comps) == 2
    det = detect_slice_lungs(s, z)
    assert det.left.bbox.x_min == truth.left_box.x0 and det.right.bbox.x_max == truth.right_box.x1


def test_noiseless_lung_voxels_below_slice_threshold():
    spec = random_spec(8, 5, NON_COVID, noise_sigma=0.0)
    v, _ = generate_phantom(spec)
    for e in (spec.left_ellipsoid, spec.right_ellipsoid):
        block, mask = _lung_mask(e, v.dims)
        for dz in range(mask.shape[0]):
            z = block[0].start + dz
            if not mask[dz].any():
                continue
            t = otsu_threshold(v.data[z])
            assert (v.data[block][dz][mask[dz]] < t).all()


def test_truth_boxes_are_tight(small_phantom):
    v, truth = small_phantom
    dark = v.data < 0.5
    xs = np.flatnonzero(dark.any(axis=(0, 1)))
    assert truth.left_box.x0 == xs[0] and truth.right_box.x1 == xs[-1]
    zs = np.flatnonzero(dark.any(axis=(1, 2)))
    assert min(truth.left_box.z0, truth.right_box.z0) == zs[0]


def test_positive_indices_count():
    assert sum(positive_indices(10, 0.5)) == 5
    assert sum(positive_indices(3, 1.0)) == 3
    assert sum(positive_indices(7, 0.0)) == 0
    assert sum(positive_indices(60, 0.5)) == 30


@pytest.mark.parametrize("n,frac,expected", [(10, 0.5, (5, 5)), (3, 1.0, (3, 0))])
def test_generate_dataset_counts(tmp_path, n, frac, expected):
    m = generate_dataset(n, 1, frac, tmp_path, dims=(64, 64, 48))
    labels = [e.label for e in m]
    assert (labels.count(COVID), labels.count(NON_COVID)) == expected
    with open(tmp_path / "truth.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["scan_id", "label", "lx0", "lx1", "ly0", "ly1", "lz0", "lz1",
                       "rx0", "rx1", "ry0", "ry1", "rz0", "rz1"]
    assert len(rows) == n + 1


def test_generate_dataset_deterministic(tmp_path):
    generate_dataset(6, 42, 0.5, tmp_path / "a", dims=(48, 48, 32))
    generate_dataset(6, 42, 0.5, tmp_path / "b", dims=(48, 48, 32), workers=2)
    for name in ("manifest.csv", "truth.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    for i in range(6):
        a = read_volume(tmp_path / "a" / "volumes" / f"phantom_{i:04d}")
        b = read_volume(tmp_path / "b" / "volumes" / f"phantom_{i:04d}")
        assert a.data.tobytes() == b.data.tobytes()


def test_generate_dataset_unlabeled_tail(tmp_path):
    m = generate_dataset(6, 0, 0.5, tmp_path, unlabeled=2, dims=(48, 48, 32))
    assert [e.label is None for e in m] == [False] * 4 + [True] * 2
    reloaded = load_manifest(tmp_path / "manifest.csv")
    assert len(reloaded.unlabeled()) == 2
    assert len(load_truth(tmp_path / "truth.csv")) == 6
