"""CC and L1 scoring plus the report writer."""

import csv

import numpy as np
import pytest

from histocell.dataset import AbundanceMatrix
from histocell.metrics import (REPORT_COLUMNS, cc_score, evaluate, l1_score,
                               report_rows, write_report)


def matrix(values, cell_types=None, prefix="s"):
    values = np.asarray(values, dtype=np.float64)
    if cell_types is None:
        cell_types = tuple(f"t{i}" for i in range(values.shape[1]))
    ids = tuple(f"{prefix}{i}" for i in range(values.shape[0]))
    return AbundanceMatrix(spot_ids=ids, cell_types=tuple(cell_types), values=values)


def random_pair(seed, n=25, c=4):
    rng = np.random.default_rng(seed)
    return matrix(rng.uniform(0, 3, (n, c))), matrix(rng.uniform(0, 3, (n, c)))


def test_cc_perfect_and_inverted():
    truth = matrix(np.random.default_rng(0).uniform(0, 2, (12, 3)))
    per, mean = cc_score(truth, truth)
    assert np.allclose(per, 1.0) and mean == pytest.approx(1.0)

    inverted = matrix(-truth.values + 5.0)
    per, mean = cc_score(inverted, truth)
    assert np.allclose(per, -1.0) and mean == pytest.approx(-1.0)


def test_cc_undefined_types_excluded():
    truth = matrix([[1.0, 0.0], [2.0, 0.0], [3.0, 0.0]])
    pred = matrix([[1.0, 1.0], [2.0, 2.0], [3.0, 3.0]])
    per, mean = cc_score(pred, truth)
    assert per[0] == pytest.approx(1.0)
    assert np.isnan(per[1])
    assert mean == pytest.approx(1.0)

    constant = matrix(np.ones((3, 2)))
    with pytest.raises(ValueError, match="no defined correlations"):
        cc_score(constant, constant)
    with pytest.raises(ValueError, match="at least 2 spots"):
        cc_score(matrix([[1.0, 2.0]]), matrix([[1.0, 2.0]]))


def test_cc_positive_affine_invariance():
    pred, truth = random_pair(3)
    per, _ = cc_score(pred, truth)
    scaled = matrix(pred.values * 2.5 + 1.0)
    per2, _ = cc_score(scaled, truth)
    assert np.allclose(per, per2, atol=1e-12)


def test_metrics_permutation_invariant():
    pred, truth = random_pair(4)
    order = np.random.default_rng(1).permutation(pred.n)
    ids = tuple(pred.spot_ids[i] for i in order)
    pred_p = AbundanceMatrix(ids, pred.cell_types, pred.values[order])
    truth_p = AbundanceMatrix(ids, truth.cell_types, truth.values[order])
    assert cc_score(pred_p, truth_p)[1] == pytest.approx(cc_score(pred, truth)[1], abs=1e-12)
    assert l1_score(pred_p, truth_p) == pytest.approx(l1_score(pred, truth), abs=1e-15)


def test_l1_basics():
    pred, truth = random_pair(5)
    assert l1_score(truth, truth) == 0.0
    shifted = matrix(truth.values + 0.5)
    assert l1_score(shifted, truth) == pytest.approx(0.5)


def test_l1_normalized_compares_proportions():
    truth = matrix([[1.0, 3.0], [0.0, 0.0]])
    pred = matrix([[2.0, 6.0], [0.0, 0.0]])
    # same proportions per row; zero-sum rows stay zero
    assert l1_score(pred, truth, normalize=True) == 0.0
    assert l1_score(pred, truth) == pytest.approx(1.0)


def test_l1_triangle_inequality():
    for seed in range(20):
        a, b = random_pair(seed)
        c, _ = random_pair(seed + 100)
        assert l1_score(a, c) <= l1_score(a, b) + l1_score(b, c) + 1e-12


def test_misaligned_matrices_rejected():
    pred, truth = random_pair(6)
    other = matrix(truth.values, cell_types=("x", "y", "z", "w"))
    with pytest.raises(ValueError, match="cell_types differ"):
        l1_score(pred, other)
    renamed = AbundanceMatrix(tuple(f"q{i}" for i in range(truth.n)),
                              truth.cell_types, truth.values)
    with pytest.raises(ValueError, match="spot_ids differ"):
        cc_score(pred, renamed)


def test_evaluate_report_fields():
    pred, truth = random_pair(7)
    truth.values[:, 2] = 1.0
    report = evaluate(pred, truth, "sampleX")
    assert report.sample_id == "sampleX"
    assert report.n_spots == pred.n
    assert report.undefined_cc_types == ("t2",)
    assert np.isnan(report.per_cell_type_cc[2])
    assert report.l1 == pytest.approx(l1_score(pred, truth))
    assert report.mean_cc == pytest.approx(
        np.nanmean(np.delete(report.per_cell_type_cc, 2)))


def test_report_csv_rows(tmp_path):
    pred, truth = random_pair(8, n=10, c=2)
    report = evaluate(pred, truth, "A_1")
    rows = report_rows("foldA", report, coloc_cosine=0.75, coloc_correlation=None)
    path = tmp_path / "report.csv"
    write_report(path, rows)
    with open(path, newline="") as handle:
        parsed = list(csv.reader(handle))
    assert parsed[0] == list(REPORT_COLUMNS)
    assert len(parsed) == 1 + 2 + 1  # header, one row per type, ALL row
    all_row = parsed[-1]
    assert all_row[:4] == ["foldA", "A_1", "ALL", "10"]
    assert all_row[6] == "0.75" and all_row[7] == ""
