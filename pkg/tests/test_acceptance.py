"""Acceptance criteria, one test per criterion.

Each test prints a single ``PASS``/``FAIL`` line with the measured numbers,
then asserts. Run with ``pytest tests/test_acceptance.py -v``.
"""

import os
import time
from fractions import Fraction
from functools import partial

import numpy as np
import pytest

from covpipe.batch import run_batch, segment_job
from covpipe.ensemble import PredictionTable, macro_f1, select_pseudo_labels
from covpipe.phantoms import generate_dataset, generate_phantom, random_spec
from covpipe.resample import (
    BOTH,
    SINGLE,
    JitterParams,
    apply_jitter,
    jitter_brightness_contrast,
    reflect_sagittal,
    resample_trilinear,
)
from covpipe.segmentation import Box3D, LungBoxes3D, otsu_threshold, plan_crops, segment_volume
from covpipe.splits import split_challenge1
from covpipe.pipeline import PipelineConfig, run_pipeline
from covpipe.volume_io import COVID, NON_COVID, ManifestEntry, ScanManifest, Volume, write_volume
from oracles import otsu_bruteforce


@pytest.fixture
def report(capsys):
    def emit(name, ok, detail):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} {name}: {detail}")
        return ok
    return emit


def test_otsu_oracle_equivalence(report):
    rng = np.random.default_rng(2024)
    slices = []
    for i in range(200):
        h, w = rng.integers(16, 513, size=2)
        kind = i % 4
        if kind == 0:
            px = rng.integers(0, 256, (h, w))
        elif kind == 1:
            dark = rng.random((h, w)) < rng.uniform(0.1, 0.6)
            px = np.where(dark, rng.normal(30, 12, (h, w)), rng.normal(200, 20, (h, w)))
        elif kind == 2:
            px = rng.choice(rng.integers(0, 256, 5), size=(h, w))
        else:
            px = rng.gamma(2.0, 25.0, (h, w))
        slices.append((np.clip(np.rint(px), 0, 255).astype(np.uint8) / 255).astype(np.float32))
    t0 = time.perf_counter()
    mismatches = sum(otsu_threshold(s) != otsu_bruteforce(s) for s in slices)
    elapsed = time.perf_counter() - t0
    ok = mismatches == 0 and elapsed < 10
    report("otsu oracle equivalence", ok, f"{200 - mismatches}/200 exact, {elapsed:.2f}s (< 10s)")
    assert ok


def _faces(box: Box3D):
    return np.array(box.as_list())


def test_segmentation_recovery(report):
    t0 = time.perf_counter()
    within, contained = 0, 0
    for i in range(50):
        spec = random_spec(77, i, COVID if i % 2 else NON_COVID, noise_sigma=0.0)
        v, truth = generate_phantom(spec, f"p{i}")
        res = segment_volume(v)
        b = res.boxes
        if (b.left_union is not None and b.right_union is not None
                and np.abs(_faces(b.left_union) - _faces(truth.left_box)).max() <= 2
                and np.abs(_faces(b.right_union) - _faces(truth.right_box)).max() <= 2):
            within += 1
        p = res.plan
        if (p.left.contains(truth.left_box) and p.right.contains(truth.right_box)
                and p.both.contains(truth.left_box) and p.both.contains(truth.right_box)):
            contained += 1
    elapsed = time.perf_counter() - t0
    ok = within >= 48 and contained == 50 and elapsed < 60
    report("segmentation recovery", ok,
           f"±2 voxels on {within}/50 (need ≥ 95%), containment {contained}/50, {elapsed:.1f}s (< 60s)")
    assert ok


def test_crop_rule_exactness(report):
    rng = np.random.default_rng(5)
    bad = 0
    for _ in range(100):
        nx, ny, nz = rng.integers(32, 600, size=3)
        lx0 = int(rng.integers(0, nx // 2 - 4))
        lx1 = int(rng.integers(lx0 + 1, nx // 2))
        rx0 = int(rng.integers(lx0 + 1, nx - 2))
        rx1 = int(rng.integers(rx0 + 1, nx))

        def yz():
            y0, z0 = int(rng.integers(0, ny - 1)), int(rng.integers(0, nz - 1))
            return y0, int(rng.integers(y0, ny)), z0, int(rng.integers(z0, nz))

        ly0, ly1, lz0, lz1 = yz()
        ry0, ry1, rz0, rz1 = yz()
        left = Box3D(lx0, lx1, ly0, ly1, lz0, lz1)
        right = Box3D(rx0, rx1, ry0, ry1, rz0, rz1)
        plan = plan_crops(LungBoxes3D(left, right, min(lz0, rz0), max(lz1, rz1)), (nx, ny, nz))
        if (plan.left.x0, plan.left.x1) != (0, rx0) or (plan.right.x0, plan.right.x1) != (lx1, nx - 1):
            bad += 1
    report("crop-rule exactness", bad == 0, f"{100 - bad}/100 plans exact")
    assert bad == 0


def test_resample_contract(report):
    rng = np.random.default_rng(9)
    dims_ok = True
    for _ in range(10):
        shape = tuple(int(x) for x in rng.integers(8, 96, size=3))
        v = Volume("r", rng.random(shape, dtype=np.float32))
        for preset in (BOTH, SINGLE):
            out = resample_trilinear(v, preset)
            dims_ok &= out.dims == (preset.nx, preset.ny, preset.nz)
    v = Volume("i", rng.random((17, 23, 31), dtype=np.float32))
    identity_err = float(np.abs(resample_trilinear(v, (31, 23, 17)).data - v.data).max())
    const = resample_trilinear(Volume("c", np.full((9, 5, 7), 0.42, np.float32)), BOTH)
    const_ok = bool(np.all(const.data == np.float32(0.42)))
    ramp = resample_trilinear(Volume("ramp", np.array([[[0.0, 1.0]]], np.float32)), (3, 1, 1))
    ramp_err = float(np.abs(ramp.data[0, 0] - [0.0, 0.5, 1.0]).max())
    ok = dims_ok and identity_err <= 1e-6 and const_ok and ramp_err <= 1e-6
    report("resample contract", ok, f"preset dims {'exact' if dims_ok else 'WRONG'} on 10 shapes, "
           f"identity err {identity_err:.1e}, constants exact={const_ok}, ramp err {ramp_err:.1e}")
    assert ok


def test_augmentation(report):
    rng = np.random.default_rng(13)
    reflect_ok = neutral_ok = bounds_ok = True
    for i in range(20):
        shape = tuple(int(x) for x in rng.integers(1, 40, size=3))
        v = Volume(f"a{i}", rng.random(shape, dtype=np.float32))
        reflect_ok &= reflect_sagittal(reflect_sagittal(v)).data.tobytes() == v.data.tobytes()
        neutral_ok &= apply_jitter(v, JitterParams(1.0, 0.0)).data.tobytes() == v.data.tobytes()
        for seed in range(5):
            j = jitter_brightness_contrast(v, 1000 * i + seed)
            bounds_ok &= bool(j.data.min() >= 0.0 and j.data.max() <= 1.0)
        for c, b in ((1.25, 0.1), (0.8, -0.1)):
            j = apply_jitter(v, JitterParams(c, b))
            bounds_ok &= bool(j.data.min() >= 0.0 and j.data.max() <= 1.0)
    ok = reflect_ok and neutral_ok and bounds_ok
    report("augmentation", ok, f"double reflection identity={reflect_ok}, neutral jitter identity={neutral_ok}, "
           f"jitter in [0,1]={bounds_ok} on 20 volumes")
    assert ok


def test_challenge1_splits(report):
    train = ScanManifest([ManifestEntry(f"t{i}", f"/t/{i}", COVID if i < 689 else NON_COVID)
                          for i in range(1358)])
    val = ScanManifest([ManifestEntry(f"v{i}", f"/v/{i}", COVID if i < 170 else NON_COVID)
                        for i in range(326)])
    fa = split_challenge1(train, val, seed=0)
    sizes_ok = sorted(fa.sizes()[:4], reverse=True) == [340, 340, 339, 339] and fa.sizes()[4] == 326
    val_ok = set(fa.fold(4)) == set(val.ids())
    balance_ok = all(max(c[:4]) - min(c[:4]) <= 1 for c in fa.class_counts().values())
    det_ok = split_challenge1(train, val, seed=0).entries == fa.entries
    ok = sizes_ok and val_ok and balance_ok and det_ok
    report("challenge-1 splits", ok, f"sizes {fa.sizes()}, fold 4 = validation={val_ok}, "
           f"class balance ≤1={balance_ok}, deterministic={det_ok}")
    assert ok


def test_pseudo_label_count(report):
    rng = np.random.default_rng(414)
    confident = np.r_[0.7, 0.3, 1.0, 0.0, rng.uniform(0.7, 1.0, 205), rng.uniform(0.0, 0.3, 205)]
    unsure = np.r_[0.69999999, 0.30000001, 0.5, rng.uniform(0.3000001, 0.6999999, 77)]
    ps = np.r_[confident, unsure]
    order = rng.permutation(len(ps))
    ids = [f"u{k:03d}" for k in range(len(ps))]
    table = PredictionTable({ids[k]: float(ps[j]) for k, j in enumerate(order)})
    expected = {ids[k] for k, j in enumerate(order) if j < len(confident)}
    got = set(select_pseudo_labels(table, 0.7).entries)
    ok = len(table) == 494 and len(expected) == 414 and got == expected
    report("pseudo-label rule", ok, f"selected {len(got)}/494, matches the constructed 414={got == expected}")
    assert ok


def _tables(tp, fp, fn, tn):
    rows = [(0.9, COVID)] * tp + [(0.9, NON_COVID)] * fp + [(0.1, COVID)] * fn + [(0.1, NON_COVID)] * tn
    pred = PredictionTable({f"s{i}": p for i, (p, _) in enumerate(rows)})
    truth = {f"s{i}": lab for i, (_, lab) in enumerate(rows)}
    return pred, truth


def test_metrics(report):
    perfect = macro_f1(*_tables(4, 0, 0, 6)).macro_f1
    m = macro_f1(*_tables(3, 1, 1, 5))
    a = macro_f1(*_tables(170, 156, 0, 0))
    checks = [
        abs(perfect - 1.0) <= 1e-9,
        abs(m.f1_covid - 0.75) <= 1e-9,
        abs(m.f1_non_covid - 5 / 6) <= 1e-9,
        abs(m.macro_f1 - float(Fraction(19, 24))) <= 1e-9,
        abs(a.f1_covid - 340 / 496) <= 1e-9,
        a.f1_non_covid == 0.0,
        abs(a.macro_f1 - 170 / 496) <= 1e-9,
    ]
    rng = np.random.default_rng(100)
    swap_ok = 0
    for _ in range(100):
        tp, fp, fn, tn = (int(x) for x in rng.integers(0, 30, size=4))
        x = macro_f1(*_tables(tp, fp, fn, tn))
        # swapping both labels exchanges tp<->tn and fp<->fn
        y = macro_f1(*_tables(tn, fn, fp, tp))
        swap_ok += (x.f1_covid == y.f1_non_covid and x.f1_non_covid == y.f1_covid
                    and abs(x.macro_f1 - y.macro_f1) <= 1e-15)
    ok = all(checks) and swap_ok == 100
    report("metrics", ok, f"examples {sum(checks)}/{len(checks)} within 1e-9 "
           f"(3/1/1/5 macro {m.macro_f1:.6f}, all-COVID macro {a.macro_f1:.6f}); label swap {swap_ok}/100")
    assert ok


@pytest.mark.slow
def test_end_to_end_phantom_run(report, tmp_path):
    t0 = time.perf_counter()
    m = generate_dataset(60, 2024, 0.5, tmp_path / "data", unlabeled=20)
    labels = [e.label for e in m.labeled()]
    balanced = labels.count(COVID) == labels.count(NON_COVID) == 20
    code, rep = run_pipeline(PipelineConfig(str(tmp_path / "data" / "manifest.csv"), str(tmp_path / "out")))
    elapsed = time.perf_counter() - t0
    pre = rep["metrics_pre"]["macro_f1"]
    filt = rep["metrics_pre_filtered"]["macro_f1"]
    post = rep["metrics_post"]["macro_f1"]
    folds = len(rep["stages"]["split"]["fold_sizes"])
    ok = (code == 0 and balanced and folds == 5 and pre >= 0.90 and filt >= pre
          and post >= pre - 0.02 and elapsed < 300)
    report("end-to-end phantom run", ok,
           f"(a) held-out macro F1 {pre:.4f} (≥ 0.90); (b) filtered {filt:.4f} ≥ unfiltered {pre:.4f}; "
           f"(c) post {post:.4f} ≥ pre − 0.02; pseudo-labels {rep['stages']['pseudolabel']['selected']}/20; "
           f"{folds} folds; {elapsed:.0f}s (< 300s)")
    assert ok


def _big_volume(seed):
    """A 512×512×300 noisy phantom."""
    spec = random_spec(seed, 0, NON_COVID, dims=(512, 512, 300), noise_sigma=0.02)
    return generate_phantom(spec, f"big{seed}")[0]


@pytest.mark.slow
def test_performance(report, tmp_path):
    v = _big_volume(1)
    t0 = time.perf_counter()
    segment_volume(v)
    single = time.perf_counter() - t0

    # 20 manifest entries share two volumes on disk to bound disk use
    for k in range(2):
        write_volume(_big_volume(k) if k else v, tmp_path / f"vol{k}")
    del v
    entries = [ManifestEntry(f"scan{i:02d}", str(tmp_path / f"vol{i % 2}"), None) for i in range(20)]

    def timed(workers):
        out = tmp_path / f"seg_w{workers}"
        out.mkdir()
        t = time.perf_counter()
        outcomes = run_batch(partial(segment_job, out_dir=str(out)), entries, workers)
        dt = time.perf_counter() - t
        assert all(o.ok for o in outcomes), [o.error for o in outcomes if not o.ok]
        return dt, {p.name: p.read_bytes() for p in out.iterdir()}

    t1, files1 = timed(1)
    t4, files4 = timed(4)
    speedup = t1 / t4
    identical = files1 == files4 and len(files1) == 20
    ok = single <= 5.0 and speedup >= 2.5 and identical
    report("performance", ok,
           f"single volume segment+plan {single:.2f}s (≤ 5s); 20 volumes 1 worker {t1:.1f}s, "
           f"4 workers {t4:.1f}s, speedup {speedup:.2f}x (need ≥ 2.5x, host has {os.cpu_count()} CPU); "
           f"byte-identical={identical}")
    assert single <= 5.0 and identical
    assert speedup >= 2.5


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
