from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from lithonet.data import (
    LABELS,
    DatasetManifest,
    FoldPlan,
    Record,
    load_split,
    plan_folds,
    preprocess,
    read_image,
    read_manifest,
    resize_bilinear,
    select_equally_spaced,
    standardize,
    write_manifest,
    write_png16,
)
from lithonet.errors import ShapeError, UsageError
from lithonet.synth import synth_generate


def make_manifest(counts=(18, 18, 24), slices=1):
    records = [
        Record(f"{label}_{i:03d}", s, f"{label}_{i:03d}/{s}.png", label)
        for label, n in zip(LABELS, counts)
        for i in range(n)
        for s in range(slices)
    ]
    return DatasetManifest(records)


class TestStandardize:
    def test_constant_is_zero(self):
        np.testing.assert_array_equal(standardize(np.full((4, 4), 7.0)), np.zeros((4, 4)))

    def test_hand_case(self):
        np.testing.assert_allclose(standardize([0.0, 2.0]), [-1.0, 1.0], atol=1e-7)

    @settings(max_examples=50, deadline=None)
    @given(h=st.integers(2, 40), w=st.integers(2, 40), seed=st.integers(0, 10_000))
    def test_zero_mean_unit_std(self, h, w, seed):
        x = np.random.default_rng(seed).uniform(0, 65535, size=(h, w))
        out = standardize(x)
        assert abs(out.mean()) < 1e-9
        assert abs(out.std() - 1.0) < 1e-6


def resize_reference(img, out_h, out_w):
    """Pixel-by-pixel bilinear with half-pixel centres, written out longhand."""
    h, w = img.shape
    out = np.zeros((out_h, out_w))
    for i in range(out_h):
        sy = min(max((i + 0.5) * h / out_h - 0.5, 0.0), h - 1)
        y0 = int(np.floor(sy))
        y1 = min(y0 + 1, h - 1)
        for j in range(out_w):
            sx = min(max((j + 0.5) * w / out_w - 0.5, 0.0), w - 1)
            x0 = int(np.floor(sx))
            x1 = min(x0 + 1, w - 1)
            fy, fx = sy - y0, sx - x0
            top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
            bottom = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
            out[i, j] = top * (1 - fy) + bottom * fy
    return out


class TestResize:
    def test_constant(self):
        np.testing.assert_allclose(resize_bilinear(np.full((7, 3), 4.5), 256, 256), np.full((256, 256), 4.5))

    def test_same_size_identity(self, rng):
        x = rng.normal(size=(13, 21))
        np.testing.assert_allclose(resize_bilinear(x, 13, 21), x, atol=1e-12)

    def test_two_by_two_hand_case(self):
        out = resize_bilinear(np.array([[0.0, 0.0], [10.0, 10.0]]), 4, 4)
        # src rows -0.25, 0.25, 0.75, 1.25 clamp to 0, 0.25, 0.75, 1
        np.testing.assert_allclose(out[:, 0], [0.0, 2.5, 7.5, 10.0])
        assert (out == out[:, :1]).all()
        assert (np.diff(out[:, 0]) >= 0).all()

    @pytest.mark.parametrize("src,dst", [((5, 7), (256, 256)), ((300, 200), (256, 256)), ((9, 9), (4, 13))])
    def test_matches_longhand(self, rng, src, dst):
        x = rng.normal(size=src)
        np.testing.assert_allclose(resize_bilinear(x, *dst), resize_reference(x, *dst), atol=1e-12)

    def test_upscale_matches_pillow(self, rng):
        # for magnification Pillow's triangle filter reduces to the same mapping
        x = rng.uniform(0, 1, size=(16, 24)).astype(np.float32)
        ours = resize_bilinear(x, 64, 80)
        theirs = np.asarray(Image.fromarray(x, mode="F").resize((80, 64), Image.BILINEAR))
        np.testing.assert_allclose(ours, theirs, atol=1e-6)

    def test_zero_target(self):
        with pytest.raises(ShapeError):
            resize_bilinear(np.ones((4, 4)), 0, 4)

    def test_preprocess_resized(self, rng):
        out = preprocess(rng.uniform(0, 65535, size=(90, 130)))
        assert out.shape == (256, 256)
        assert abs(out.mean()) < 1e-9 and abs(out.std() - 1) < 1e-6

    def test_preprocess_original_keeps_shape(self, rng):
        assert preprocess(rng.normal(size=(40, 50)), mode="original").shape == (40, 50)

    def test_preprocess_bad_mode(self):
        with pytest.raises(ValueError):
            preprocess(np.ones((4, 4)), mode="cropped")


class TestSelectEquallySpaced:
    def test_all(self):
        assert select_equally_spaced(100, 100) == list(range(100))

    def test_every_other(self):
        assert select_equally_spaced(199, 100) == list(range(0, 199, 2))

    def test_insufficient(self):
        with pytest.raises(ValueError, match="insufficient slices"):
            select_equally_spaced(50, 100)

    def test_half_rounds_up(self):
        # i*(T-1)/(n-1) = 1.5 at i=1 for T=4, n=3
        assert select_equally_spaced(4, 3) == [0, 2, 3]

    @settings(max_examples=200, deadline=None)
    @given(n=st.integers(2, 120), extra=st.integers(0, 400))
    def test_properties(self, n, extra):
        t = n + extra
        idx = select_equally_spaced(t, n)
        assert idx[0] == 0 and idx[-1] == t - 1
        assert len(set(idx)) == n
        assert all(b > a for a, b in zip(idx, idx[1:]))


class TestManifest:
    def test_mixed_labels_rejected(self):
        with pytest.raises(ValueError, match="labelled both"):
            DatasetManifest([Record("p", 0, "a.png", "grainstone"), Record("p", 1, "b.png", "spherulite")])

    def test_duplicate_slice_rejected(self):
        with pytest.raises(ValueError, match="twice"):
            DatasetManifest([Record("p", 0, "a.png", "grainstone"), Record("p", 0, "b.png", "grainstone")])

    def test_unknown_label(self):
        with pytest.raises(ValueError, match="unknown label"):
            DatasetManifest([Record("p", 0, "a.png", "limestone")])

    def test_round_trip(self, tmp_path):
        m = make_manifest((2, 1, 1), slices=2)
        path = write_manifest(m, tmp_path / "manifest.csv")
        assert path.read_text().splitlines()[0] == "plug_id,slice_index,path,label"
        again = read_manifest(path)
        assert again.records == m.records and again.root == tmp_path

    def test_bad_header(self, tmp_path):
        path = tmp_path / "m.csv"
        path.write_text("plug,slice,path,label\n")
        with pytest.raises(ValueError, match="header"):
            read_manifest(path)

    def test_class_counts(self):
        assert make_manifest((2, 3, 4), slices=5).class_counts() == [10, 15, 20]


class TestPng:
    def test_sixteen_bit_round_trip(self, tmp_path, rng):
        pixels = rng.integers(0, 65536, size=(17, 23)).astype(np.uint16)
        write_png16(pixels, tmp_path / "a.png")
        with Image.open(tmp_path / "a.png") as im:
            assert im.mode.startswith("I")
        back = read_image(tmp_path / "a.png")
        assert back.dtype == np.float64
        np.testing.assert_array_equal(back, pixels)

    def test_rejects_colour(self, tmp_path):
        with pytest.raises(ShapeError):
            write_png16(np.zeros((4, 4, 3)), tmp_path / "c.png")


class TestPlanFolds:
    def test_18_18_24_plugs_into_six_folds(self):
        plan = plan_folds(make_manifest(), k=6, seed=0)
        labels = make_manifest().plug_labels()
        for fold in plan.folds():
            counts = Counter(labels[p] for p in fold)
            assert [counts[c] for c in LABELS] == [3, 3, 4]
        assert len(plan.runs) == 30
        plan.check_leakage()

    def test_partition(self):
        plan = plan_folds(make_manifest(), k=6, seed=4)
        folds = plan.folds()
        flat = [p for f in folds for p in f]
        assert len(flat) == len(set(flat)) == 60

    def test_runs_are_all_ordered_pairs(self):
        plan = plan_folds(make_manifest((3, 3, 3)), k=3)
        assert plan.runs == [(0, 1), (0, 2), (1, 0), (1, 2), (2, 0), (2, 1)]

    def test_deterministic(self):
        a = plan_folds(make_manifest(), 6, seed=11)
        b = plan_folds(make_manifest(), 6, seed=11)
        c = plan_folds(make_manifest(), 6, seed=12)
        assert a.assignment == b.assignment
        assert a.assignment != c.assignment

    def test_imbalance_warns(self):
        with pytest.warns(UserWarning, match="grainstone"):
            plan = plan_folds(make_manifest((2, 6, 6)), k=3)
        assert plan.warnings

    def test_k_too_small(self):
        with pytest.raises(ValueError):
            plan_folds(make_manifest(), k=2)

    def test_split_roles(self):
        plan = plan_folds(make_manifest(), 6)
        train, val, test = plan.split(2, 5)
        assert set(val) == set(plan.fold(5)) and set(test) == set(plan.fold(2))
        assert len(train) == 40
        with pytest.raises(UsageError):
            plan.split(1, 1)

    def test_leakage_detected(self):
        plan = plan_folds(make_manifest((3, 3, 3)), 3)
        plan.runs = plan.runs[:-1]
        with pytest.raises(UsageError):
            plan.check_leakage()
        plan = plan_folds(make_manifest((3, 3, 3)), 3)
        plan.assignment["grainstone_000"] = 7
        with pytest.raises(UsageError):
            plan.check_leakage()

    def test_json_round_trip(self, tmp_path):
        plan = plan_folds(make_manifest(), 6, seed=2)
        again = FoldPlan.load(plan.save(tmp_path / "folds.json"))
        assert again.assignment == plan.assignment and again.runs == plan.runs and again.k == 6


class TestSynth:
    def test_counts(self, tmp_path):
        m = synth_generate(tmp_path, plugs_per_class=2, slices_per_plug=5, size=64, seed=0)
        assert len(m) == 30 and len(m.plugs) == 6
        assert len(read_manifest(tmp_path / "manifest.csv")) == 30
        assert len(list((tmp_path / "images").rglob("*.png"))) == 30

    def test_byte_identical(self, tmp_path):
        synth_generate(tmp_path / "a", 1, 2, 32, seed=5)
        synth_generate(tmp_path / "b", 1, 2, 32, seed=5)
        for f in sorted((tmp_path / "a").rglob("*.png")):
            assert f.read_bytes() == (tmp_path / "b" / f.relative_to(tmp_path / "a")).read_bytes()

    def test_seed_changes_images(self, tmp_path):
        synth_generate(tmp_path / "a", 1, 1, 32, seed=5)
        synth_generate(tmp_path / "b", 1, 1, 32, seed=6)
        f = "images/grainstone_000/0000.png"
        assert (tmp_path / "a" / f).read_bytes() != (tmp_path / "b" / f).read_bytes()

    def test_size_floor(self, tmp_path):
        with pytest.raises(ShapeError):
            synth_generate(tmp_path, 1, 1, size=31)

    def test_load_split(self, synth_small):
        m = read_manifest(synth_small)
        split = load_split(m, m.plugs[:2], mode="original")
        assert len(split) == 8 and split.images[0].shape == (32, 32)
        assert split.plugs == sorted(split.plugs)
        assert abs(split.images[0].mean()) < 1e-9
        assert load_split(m, m.plugs[:1], size=48).images[0].shape == (48, 48)

    def test_classes_differ(self, synth_small):
        m = read_manifest(synth_small)
        split = load_split(m, m.plugs, mode="original")
        # horizontal banding: rows vary much more than columns for the laminated class
        row_var = {c: [] for c in range(3)}
        for img, label in zip(split.images, split.labels):
            row_var[int(label)].append(img.mean(axis=1).var() / max(img.mean(axis=0).var(), 1e-12))
        assert np.mean(row_var[2]) > 3 * max(np.mean(row_var[0]), np.mean(row_var[1]))
