import numpy as np
import pytest
from scipy import stats as scipy_stats

from intertwined.utils.errors import DataError
from intertwined.utils.stats import (
    AccuracyTable,
    friedman_test,
    mean_ranks,
    pairwise_bonferroni,
    rank_comparisons,
    wilcoxon_signed_rank,
)


def test_friedman_strict_ordering():
    table = np.tile([0.1, 0.2, 0.3], (12, 1))
    result = friedman_test(table)
    assert result.chi_square == pytest.approx(24.0)
    assert result.dof == 2


def test_friedman_all_tied():
    result = friedman_test(np.full((5, 3), 0.5))
    assert (result.chi_square, result.dof, result.p_value) == (0.0, 2, 1.0)


def test_friedman_on_subject_table(accuracy_table):
    result = friedman_test(accuracy_table)
    reference = scipy_stats.friedmanchisquare(*accuracy_table.values.T)
    assert result.chi_square == pytest.approx(22.1667, abs=1e-4)
    assert result.chi_square == pytest.approx(reference.statistic, abs=1e-9)
    assert result.p_value == pytest.approx(reference.pvalue, abs=1e-9)
    assert result.p_value < 0.005
    assert result.mean_ranks == pytest.approx({"Intertwined": 3.0, "Parallel": 23 / 12, "Cascade": 13 / 12})
    assert mean_ranks(accuracy_table) == result.mean_ranks


def test_friedman_invariant_to_monotone_maps_and_column_order(accuracy_table):
    base = friedman_test(accuracy_table).chi_square
    assert friedman_test(np.sqrt(accuracy_table.values)).chi_square == pytest.approx(base, abs=1e-12)
    assert friedman_test(accuracy_table.values[:, [2, 0, 1]]).chi_square == pytest.approx(base, abs=1e-12)


def test_friedman_invariant_to_subject_order(accuracy_table):
    base = friedman_test(accuracy_table)
    shuffled = friedman_test(accuracy_table.values[np.random.default_rng(0).permutation(12)])
    assert shuffled.chi_square == base.chi_square
    assert shuffled.p_value == base.p_value


def test_friedman_needs_two_rows_and_columns():
    with pytest.raises(DataError):
        friedman_test(np.ones((1, 3)))
    with pytest.raises(DataError):
        friedman_test(np.ones((4, 1)))


def test_wilcoxon_matches_scipy_exact():
    rng = np.random.default_rng(8)
    x, y = rng.normal(size=10), rng.normal(size=10)
    ours = wilcoxon_signed_rank(x, y)
    reference = scipy_stats.wilcoxon(x, y)
    assert ours.exact
    assert ours.statistic == pytest.approx(reference.statistic)
    assert ours.p_value == pytest.approx(reference.pvalue, rel=1e-9)


def test_wilcoxon_all_one_sign():
    x = np.arange(1.0, 13.0)
    result = wilcoxon_signed_rank(x, x - 0.5)
    assert result.statistic == 0.0
    assert result.p_value == pytest.approx(2.0 / 4096)


def test_wilcoxon_large_sample_uses_normal_tail():
    rng = np.random.default_rng(2)
    x = rng.normal(size=40)
    result = wilcoxon_signed_rank(x, x + rng.normal(0.5, 1.0, size=40))
    assert not result.exact
    assert 0.0 < result.p_value < 1.0


def test_wilcoxon_rejects_unpaired_samples():
    with pytest.raises(DataError):
        wilcoxon_signed_rank([0.1, 0.2], [0.1])


def test_pairwise_on_subject_table(accuracy_table):
    comparisons = pairwise_bonferroni(accuracy_table)
    assert len(comparisons) == 3
    by_pair = {c.pair: c for c in comparisons}

    strongest = by_pair[("Intertwined", "Cascade")]
    assert strongest.adjusted_p == pytest.approx(3 * 2 / 4096)
    assert strongest.median_difference == pytest.approx(0.295)
    assert by_pair[("Intertwined", "Parallel")].median_difference == pytest.approx(0.11)

    weakest = by_pair[("Parallel", "Cascade")]
    assert weakest.statistic == 2.0
    assert weakest.raw_p == pytest.approx(6 / 4096)
    assert weakest.adjusted_p == pytest.approx(0.0044, abs=1e-4)

    for comparison in comparisons:
        assert comparison.adjusted_p >= comparison.raw_p
        assert comparison.significant

    ranked = rank_comparisons(comparisons)
    assert ranked[0].pair == ("Intertwined", "Cascade")
    assert ranked[-1].pair == ("Parallel", "Cascade")


def test_pairwise_identical_columns():
    values = np.array([[0.5, 0.5, 0.2], [0.6, 0.6, 0.3], [0.7, 0.7, 0.1]])
    comparisons = pairwise_bonferroni(AccuracyTable(values, ("a", "b", "c"), ("x", "y", "z")))
    same = comparisons[0]
    assert same.pair == ("x", "y")
    assert same.adjusted_p == 1.0
    assert not same.significant


def test_accuracy_table_validation(tmp_path):
    with pytest.raises(DataError):
        AccuracyTable(np.array([[0.5, 1.2]]), ("a",), ("x", "y"))
    with pytest.raises(DataError):
        AccuracyTable(np.array([[0.5, np.nan]]), ("a",), ("x", "y"))
    bad = tmp_path / "bad.tsv"
    bad.write_text("Subject\tx\ty\na\t0.5\thigh\n")
    with pytest.raises(DataError):
        AccuracyTable.read(bad)
    with pytest.raises(DataError):
        AccuracyTable.read(tmp_path / "absent.tsv")


def test_accuracy_table_roundtrip(tmp_path, accuracy_table):
    restored = AccuracyTable.read(accuracy_table.write(tmp_path / "table.tsv"))
    assert restored.rows == accuracy_table.rows
    assert restored.columns == accuracy_table.columns
    np.testing.assert_array_equal(restored.values, accuracy_table.values)
