import csv
import itertools

import numpy as np
import pydantic
import pytest
from groupkan import metrics
from groupkan.errors import DataError, DimensionError, UndefinedTestError
from groupkan.metrics import MetricRow, PairedScores, wilcoxon_one_sided
from scipy import stats


def test_iou_and_f1_example():
    pred = np.array([1, 1, 0, 0])
    gt = np.array([1, 0, 0, 0])
    assert metrics.iou(pred, gt) == 0.5
    assert metrics.f1(pred, gt) == pytest.approx(2 / 3, abs=1e-12)


def test_perfect_and_disjoint():
    mask = np.array([[0, 1], [1, 1]])
    assert metrics.iou(mask, mask) == 1.0
    assert metrics.iou(mask, 1 - mask) == 0.0
    assert metrics.f1(mask, 1 - mask) == 0.0


def test_both_empty_is_perfect():
    empty = np.zeros((3, 3))
    assert metrics.iou(empty, empty) == 1.0
    assert metrics.f1(empty, empty) == 1.0


def test_shape_mismatch():
    with pytest.raises(DimensionError):
        metrics.iou(np.zeros((2, 2)), np.zeros((2, 3)))


def test_f1_iou_identity_on_random_pairs():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        pred = rng.random((6, 6)) > rng.random()
        gt = rng.random((6, 6)) > rng.random()
        score = metrics.iou(pred, gt)
        assert metrics.f1(pred, gt) == pytest.approx(2 * score / (1 + score), abs=1e-12)
        assert metrics.iou(gt, pred) == score


def test_confusion_counts_total():
    counts = metrics.confusion_counts(np.eye(3), np.ones((3, 3)))
    assert (counts.tp, counts.fp, counts.fn, counts.tn) == (3, 0, 6, 0)
    assert counts.total == 9


def test_plausibility_of_ground_truth_itself():
    gt = np.zeros((8, 8))
    gt[2:5, 3:7] = 1
    assert metrics.plausibility_iou(gt.copy(), gt) == 1.0
    assert metrics.plausibility_iou(gt.copy(), gt, "otsu") == 1.0


@pytest.mark.parametrize("value", [0.1, 0.3, 0.7, 1e-3, 0.123456789])
@pytest.mark.parametrize("shape", [(2, 2), (3, 5), (7, 9)])
@pytest.mark.parametrize("rule", ["mean", "otsu"])
def test_plausibility_constant_map_is_foreground_fraction(value, shape, rule):
    gt = np.zeros((8, 8))
    gt[:3, :5] = 1
    assert metrics.plausibility_iou(np.full(shape, value), gt, rule) == pytest.approx(15 / 64)


@pytest.mark.parametrize("value", [0.1, 0.7, 0.123456789])
def test_binarize_constant_map_is_all_foreground(value):
    assert metrics.binarize(np.full((3, 5), value)).all()
    assert metrics.binarize(np.full((3, 5), value), "otsu").all()


def test_plausibility_upsamples_low_resolution_map():
    gt = np.zeros((8, 8))
    gt[:4] = 1
    act = np.array([[1.0, 1.0], [0.0, 0.0]])
    assert metrics.plausibility_iou(act, gt) > 0.7


def test_plausibility_rejects_bad_maps():
    with pytest.raises(DataError):
        metrics.plausibility_iou(np.zeros((0, 0)), np.zeros((2, 2)))
    with pytest.raises(DimensionError):
        metrics.plausibility_iou(np.zeros((2, 2, 2)), np.zeros((2, 2)))


def test_activation_map_channel_mean():
    features = np.stack([np.full((2, 2), -2.0), np.full((2, 2), 4.0)])
    np.testing.assert_allclose(metrics.activation_map(features[None], (4, 4)), np.full((4, 4), 3.0))


def test_otsu_separates_two_modes():
    rng = np.random.default_rng(1)
    values = np.concatenate([rng.normal(0.2, 0.02, 500), rng.normal(0.8, 0.02, 500)])
    assert 0.3 < metrics.otsu_threshold(values) < 0.7


def test_otsu_threshold_sits_mid_gap():
    values = np.array([0.0] * 10 + [1.0] * 10)
    assert metrics.otsu_threshold(values) == pytest.approx(0.5, abs=1 / metrics.OTSU_BINS)
    binary = metrics.binarize(values, "otsu")
    assert binary.tolist() == [False] * 10 + [True] * 10


def test_wilcoxon_all_positive_nine():
    pairs = PairedScores.from_columns(np.arange(1, 10) + 0.5, np.zeros(9))
    result = wilcoxon_one_sided(pairs)
    assert result.statistic == 45.0
    assert result.pvalue == pytest.approx(2 ** -9, abs=1e-15)
    assert result.exact


def test_wilcoxon_single_positive_difference():
    result = wilcoxon_one_sided(PairedScores(pairs=[(0.9, 0.8)]))
    assert result.n == 1
    assert result.pvalue == 0.5


def brute_force_pvalue(differences):
    differences = [d for d in differences if d != 0]
    ranks = stats.rankdata(np.abs(differences))
    observed = ranks[np.array(differences) > 0].sum()
    hits = 0
    for signs in itertools.product((False, True), repeat=len(ranks)):
        if ranks[list(signs)].sum() >= observed - 1e-9:
            hits += 1
    return hits / 2 ** len(ranks)


@pytest.mark.parametrize(
    "differences",
    [
        [0.3, 0.3, -0.1, 0.7, -0.3, 0.2, 0.2, 0.9],
        [1.0, -1.0, 2.0, 2.0, 2.0, -0.5, 0.0, 3.0, 0.25],
        [-0.4, -0.1, 0.2, -0.3, 0.05, -0.6, -0.2, 0.15],
    ],
)
def test_wilcoxon_exact_matches_enumeration(differences):
    pairs = PairedScores.from_columns(differences, [0.0] * len(differences))
    result = wilcoxon_one_sided(pairs)
    assert result.pvalue == pytest.approx(brute_force_pvalue(differences), abs=1e-12)


def test_wilcoxon_all_zero_is_undefined():
    with pytest.raises(UndefinedTestError):
        wilcoxon_one_sided(PairedScores.from_columns([0.5, 0.7], [0.5, 0.7]))


def test_wilcoxon_needs_pairs():
    with pytest.raises(pydantic.ValidationError):
        PairedScores(pairs=[])
    with pytest.raises(DimensionError):
        PairedScores.from_columns([1.0], [1.0, 2.0])


def test_wilcoxon_pvalue_monotone_in_positive_shift():
    base = [0.4, -0.2, 0.1, -0.5, 0.3, 0.6, -0.05]
    previous = 1.0
    for shift in (0.0, 0.1, 0.3, 1.0):
        shifted = [d + shift for d in base]
        pvalue = wilcoxon_one_sided(PairedScores.from_columns(shifted, [0.0] * 7)).pvalue
        assert pvalue <= previous + 1e-12
        previous = pvalue


def test_wilcoxon_normal_approximation_for_large_n():
    rng = np.random.default_rng(2)
    differences = rng.normal(0.3, 1.0, size=30)
    result = wilcoxon_one_sided(PairedScores.from_columns(differences, np.zeros(30)))
    assert not result.exact
    assert result.n == 30

    ranks = stats.rankdata(np.abs(differences))
    exact = metrics._exact_upper_tail(
        np.rint(2 * ranks).astype(np.int64), int(round(2 * result.statistic))
    )
    assert result.pvalue == pytest.approx(exact, abs=0.01)


def row(**values):
    defaults = dict(dataset="d", seed=0, iou=0.5, f1=0.6, params=10, gflops=0.1)
    defaults.update(values)
    return MetricRow(**defaults)


def test_metric_row_rejects_iou_above_f1():
    with pytest.raises(pydantic.ValidationError):
        row(iou=0.7, f1=0.6)


def test_aggregate_rows():
    total = metrics.aggregate_rows([row(iou=0.4, f1=0.5), row(iou=0.6, f1=0.7)], "all")
    assert total.dataset == "all"
    assert total.iou == pytest.approx(0.5)
    assert total.plausibility_iou is None
    with pytest.raises(DataError):
        metrics.aggregate_rows([], "all")


@pytest.mark.parametrize("explain", [False, True])
def test_write_metric_report(tmp_path, explain):
    path = tmp_path / "metrics.csv"
    metrics.write_metric_report(str(path), [row(plausibility_iou=0.3)], explain=explain)
    with open(path, newline="") as fp:
        records = list(csv.DictReader(fp))
    assert ("plausibility_iou" in records[0]) is explain
    assert list(records[0]) == metrics.report_columns(explain)
    assert float(records[0]["iou"]) == 0.5
