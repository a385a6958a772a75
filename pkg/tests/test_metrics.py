import numpy as np
import pytest

from scenediff.metrics import (
    ConfusionMatrix,
    class_distribution,
    format_distribution_report,
    format_gap_report,
    format_iou_report,
    gap_table,
    iou,
    median_bandwidth,
    mmd,
)
from scenediff.scenes import VoxelScene

from conftest import random_scene, unit_grid


# --------------------------------- MMD ---------------------------------

def test_mmd_biased_identical_sets_is_zero(rng):
    a = rng.normal(size=(8, 4))
    assert mmd(a, a, estimator="biased") == pytest.approx(0.0, abs=1e-12)


def test_mmd_symmetry(rng):
    a = rng.normal(size=(6, 3))
    b = rng.normal(size=(9, 3)) + 0.5
    bw = median_bandwidth(a, b)
    ab = mmd(a, b, bandwidth=bw)
    ba = mmd(b, a, bandwidth=bw)
    assert ab == pytest.approx(ba, abs=1e-12)


def test_mmd_linear_hand_example():
    a = np.array([[0.0], [0.0]])
    b = np.array([[1.0], [1.0]])
    # kernel sums by hand: mean k(a,a)=0, mean k(a,b)=0, mean k(b,b)=1 -> 1
    assert mmd(a, b, kernel="linear", estimator="biased") == pytest.approx(1.0, abs=1e-12)


def test_mmd_unbiased_near_zero_for_same_distribution(rng):
    a = rng.normal(size=(60, 3))
    b = rng.normal(size=(60, 3))
    small = mmd(a, b)
    far = mmd(a, b + 5.0)
    assert small < far


def test_mmd_translation_invariance_rbf(rng):
    a = rng.normal(size=(7, 3))
    b = rng.normal(size=(5, 3))
    shift = np.array([10.0, -3.0, 2.0])
    bw = median_bandwidth(a, b)
    base = mmd(a, b, bandwidth=bw, estimator="biased")
    shifted = mmd(a + shift, b + shift, bandwidth=bw, estimator="biased")
    assert abs(base - shifted) < 1e-9


def test_mmd_validation(rng):
    a = rng.normal(size=(4, 3))
    with pytest.raises(ValueError):
        mmd(a, rng.normal(size=(4, 2)))
    with pytest.raises(ValueError):
        mmd(np.zeros((0, 3)), a)
    with pytest.raises(ValueError):
        mmd(a, a, kernel="poly")
    with pytest.raises(ValueError):
        mmd(a, a, estimator="jackknife")
    bad = a.copy()
    bad[0, 0] = np.nan
    with pytest.raises(ValueError):
        mmd(bad, a)


def test_mmd_nonnegative_biased(rng):
    for _ in range(10):
        a = rng.normal(size=(5, 2))
        b = rng.normal(size=(7, 2))
        assert mmd(a, b, estimator="biased", clamp=False) >= -1e-12


# ----------------------------- confusion / IoU -----------------------------

def test_diagonal_matrix_gives_perfect_iou():
    conf = ConfusionMatrix(np.diag([5, 3, 2]), ignored=frozenset())
    per_class, mean = iou(conf)
    assert all(v == pytest.approx(100.0) for v in per_class.values())
    assert mean == pytest.approx(100.0)


def test_two_class_hand_confusion():
    conf = ConfusionMatrix(np.array([[3, 1], [1, 3]]), ignored=frozenset())
    per_class, mean = iou(conf)
    assert per_class[1] == pytest.approx(60.0)
    assert per_class[2] == pytest.approx(60.0)
    assert mean == pytest.approx(60.0)


def test_ignored_class_excluded_from_mean():
    counts = np.zeros((3, 3), dtype=int)
    counts[0, 0] = 10            # class 1 perfect
    counts[1, 1] = 1
    counts[1, 0] = 9             # class 2 terrible (errors land on class 1)
    counts[2, 2] = 10            # class 3 perfect
    conf = ConfusionMatrix(counts, ignored=frozenset({2}))
    per_class, mean = iou(conf)
    assert per_class[2] is not None  # still reported per class
    # the mean skips the ignored class regardless of its counts
    expected = np.mean([per_class[1], per_class[3]])
    assert mean == pytest.approx(expected)
    assert mean != pytest.approx(np.mean([per_class[c] for c in (1, 2, 3)]))


def test_zero_support_class_is_na():
    counts = np.zeros((2, 2), dtype=int)
    counts[0, 0] = 4
    conf = ConfusionMatrix(counts, ignored=frozenset())
    per_class, mean = iou(conf)
    assert per_class[2] is None
    assert mean == pytest.approx(100.0)


def test_miou_invariant_under_class_permutation(rng):
    counts = rng.integers(0, 20, size=(4, 4))
    perm = rng.permutation(4)
    base = iou(ConfusionMatrix(counts, ignored=frozenset()))[1]
    permuted = iou(ConfusionMatrix(counts[np.ix_(perm, perm)], ignored=frozenset()))[1]
    assert base == pytest.approx(permuted, abs=1e-12)


def test_confusion_accumulate_and_merge(rng):
    a = ConfusionMatrix.empty(3, ignored=frozenset())
    b = ConfusionMatrix.empty(3, ignored=frozenset())
    truth = rng.integers(1, 4, size=50)
    pred = rng.integers(1, 4, size=50)
    a.add(truth[:30], pred[:30])
    b.add(truth[30:], pred[30:])
    merged = a.merge(b)
    whole = ConfusionMatrix.empty(3, ignored=frozenset())
    whole.add(truth, pred)
    assert np.array_equal(merged.counts, whole.counts)
    assert merged.counts.sum() == 50


def test_confusion_csv_round_trip(rng):
    conf = ConfusionMatrix(rng.integers(0, 9, size=(5, 5)), ignored=frozenset({2}))
    back = ConfusionMatrix.from_csv(conf.to_csv(), ignored={2})
    assert np.array_equal(back.counts, conf.counts)
    assert back.ignored == conf.ignored


def test_confusion_validation():
    with pytest.raises(ValueError):
        ConfusionMatrix(np.zeros((2, 3)))
    with pytest.raises(ValueError):
        ConfusionMatrix(np.array([[-1]]))
    conf = ConfusionMatrix.empty(2)
    with pytest.raises(ValueError):
        conf.add([1], [3])


# --------------------------- class distribution ---------------------------

def test_single_class_scene_distribution():
    scene = VoxelScene(unit_grid((2, 2, 2)), [[0, 0, 0], [1, 1, 1]], [2, 2], class_count=3)
    frac = class_distribution([scene])
    assert frac[2] == pytest.approx(1.0)
    assert frac[1] == 0.0 and frac[3] == 0.0


def test_distribution_sums_to_one(rng):
    scenes = [random_scene(rng, (6, 6, 6), class_count=5) for _ in range(4)]
    frac = class_distribution(scenes)
    assert frac[1:].sum() == pytest.approx(1.0, abs=1e-9)


def test_distribution_hand_counts():
    g = unit_grid((8, 8, 1))
    coords1 = [[i, 0, 0] for i in range(8)] + [[i, 1, 0] for i in range(2)]
    scene1 = VoxelScene(g, coords1, [1] * 10, class_count=2)
    coords2 = [[i, j, 0] for i in range(8) for j in range(4)][:30]
    scene2 = VoxelScene(g, coords2, [2] * 30, class_count=2)
    frac = class_distribution([scene1, scene2])
    assert frac[1] == pytest.approx(0.25)
    assert frac[2] == pytest.approx(0.75)


# ------------------------------- gap table -------------------------------

def test_gap_identical_inputs_all_zero():
    table = {1: 50.0, 2: 30.0}
    gaps = gap_table(table, dict(table))
    assert all(v == 0.0 for v in gaps.values())


def test_gap_simple_difference():
    assert gap_table({1: 50.0}, {1: 40.0})[1] == pytest.approx(-10.0)


def test_gap_large_regression_example():
    # truck-style regression: real 42.24 vs synthetic 10.42 -> -31.82
    gaps = gap_table({4: 42.24}, {4: 10.42})
    assert gaps[4] == pytest.approx(-31.82, abs=1e-9)


def test_gap_requires_matching_class_sets():
    with pytest.raises(ValueError):
        gap_table({1: 10.0}, {2: 10.0})


# ------------------------------- reports -------------------------------

def test_reports_render(rng):
    conf = ConfusionMatrix(rng.integers(0, 30, size=(4, 4)), ignored=frozenset({2}))
    per_class, mean = iou(conf)
    text, csv_text = format_iou_report(per_class, mean, ignored={2})
    assert "mIoU" in text and "iou_percent" in csv_text
    gaps_text, gaps_csv = format_gap_report(per_class, per_class)
    assert "gap" in gaps_csv
    frac = class_distribution([random_scene(rng, (4, 4, 4), class_count=3)])
    dist_text, dist_csv = format_distribution_report(frac)
    assert "fraction" in dist_csv
