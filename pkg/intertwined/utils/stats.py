"""
Nonparametric comparison of model families across subjects
"""
import itertools
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.stats import chi2, norm, rankdata

from intertwined.utils.errors import DataError

logger = logging.getLogger(__name__)

EXACT_WILCOXON_MAX_N = 25
# Paired differences are rounded to this many decimals before ranking
DIFFERENCE_DECIMALS = 12


@dataclass
class AccuracyTable:
    """Subjects × model families, every cell an accuracy in [0, 1]."""
    values: np.ndarray
    rows: Tuple[str, ...]
    columns: Tuple[str, ...]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.rows = tuple(str(r) for r in self.rows)
        self.columns = tuple(str(c) for c in self.columns)
        if self.values.ndim != 2 or self.values.shape != (len(self.rows), len(self.columns)):
            raise DataError(f"Accuracy table of shape {self.values.shape} does not match "
                            f"{len(self.rows)} rows × {len(self.columns)} columns")
        if not np.all(np.isfinite(self.values)):
            raise DataError("Accuracy table has missing or non-finite cells")
        if np.any(self.values < 0.0) or np.any(self.values > 1.0):
            raise DataError("Accuracy table cells must lie in [0, 1]")

    @classmethod
    def from_frame(cls, frame: pd.DataFrame) -> "AccuracyTable":
        try:
            values = frame.to_numpy(dtype=np.float64)
        except (TypeError, ValueError) as e:
            raise DataError(f"Accuracy table has non-numeric cells: {e}") from e
        return cls(values, tuple(frame.index), tuple(frame.columns))

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.values, index=list(self.rows), columns=list(self.columns))

    @classmethod
    def read(cls, path: Union[str, Path]) -> "AccuracyTable":
        """Read delimited text with a header row; the first column holds the row labels."""
        try:
            frame = pd.read_csv(path, sep=None, engine="python", index_col=0)
        except (OSError, ValueError, pd.errors.ParserError) as e:
            raise DataError(f"Cannot read accuracy table {path}: {e}") from e
        return cls.from_frame(frame)

    def write(self, path: Union[str, Path], sep: str = "\t") -> Path:
        path = Path(path)
        frame = self.to_frame()
        frame.index.name = "Subject"
        frame.to_csv(path, sep=sep)
        return path


@dataclass
class FriedmanResult:
    chi_square: float
    dof: int
    p_value: float
    mean_ranks: Dict[str, float] = field(default_factory=dict)


@dataclass
class WilcoxonResult:
    statistic: float
    p_value: float
    n: int
    exact: bool


@dataclass
class PairwiseComparison:
    pair: Tuple[str, str]
    raw_p: float
    adjusted_p: float
    significant: bool
    median_difference: float
    statistic: float


def _as_matrix(table) -> Tuple[np.ndarray, Tuple[str, ...]]:
    if isinstance(table, AccuracyTable):
        return table.values, table.columns
    values = np.asarray(table, dtype=np.float64)
    if values.ndim != 2:
        raise DataError(f"Expected a 2-D table, got shape {values.shape}")
    return values, tuple(str(i) for i in range(values.shape[1]))


def mean_ranks(table) -> Dict[str, float]:
    """Mean within-row rank of each column (1 = lowest value, ties averaged)."""
    values, columns = _as_matrix(table)
    ranks = rankdata(values, axis=1)
    return dict(zip(columns, ranks.mean(axis=0).tolist()))


def friedman_test(table) -> FriedmanResult:
    """
    Friedman's rank test for k related samples over n blocks (rows).

    Ranks are averaged over ties and the statistic divided by the usual
    tie-correction factor. A table tied within every row gives (0, k - 1, 1).

    Args:
        table: AccuracyTable or n × k array, n >= 2, k >= 2

    Returns:
        FriedmanResult
    """
    values, columns = _as_matrix(table)
    n, k = values.shape
    if n < 2 or k < 2:
        raise DataError(f"Friedman's test needs at least 2 rows and 2 columns, got {n} × {k}")

    ranks = rankdata(values, axis=1)
    rank_sums = ranks.sum(axis=0)
    ties = 0.0
    for row in values:
        _, counts = np.unique(row, return_counts=True)
        ties += float(np.sum(counts ** 3 - counts))
    correction = 1.0 - ties / (n * k * (k * k - 1))
    means = dict(zip(columns, (rank_sums / n).tolist()))

    if correction <= 0.0:
        logger.info("Every row is fully tied; Friedman statistic is 0")
        return FriedmanResult(0.0, k - 1, 1.0, means)

    statistic = (12.0 / (n * k * (k + 1)) * np.sum(rank_sums ** 2) - 3.0 * n * (k + 1)) / correction
    statistic = max(float(statistic), 0.0)
    return FriedmanResult(statistic, k - 1, float(chi2.sf(statistic, k - 1)), means)


def _exact_lower_tail(doubled_ranks: np.ndarray, threshold: int) -> float:
    """P(W <= threshold / 2) under random signs, by counting subset sums of doubled ranks."""
    total = int(doubled_ranks.sum())
    counts = np.zeros(total + 1)
    counts[0] = 1.0
    for r in doubled_ranks:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[:total + 1 - r]
        counts = counts + shifted
    return float(counts[:threshold + 1].sum() / 2.0 ** len(doubled_ranks))


def wilcoxon_signed_rank(x: Sequence[float], y: Sequence[float]) -> WilcoxonResult:
    """
    Two-sided Wilcoxon signed-rank test on paired samples.

    Zero differences are dropped. The null distribution is exact for up to
    25 non-zero pairs (ties handled with averaged ranks) and normal beyond.
    """
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise DataError(f"Paired samples must be 1-D of equal length, got {x.shape} and {y.shape}")
    diff = np.round(x - y, DIFFERENCE_DECIMALS)
    diff = diff[diff != 0.0]
    n = diff.size
    if n == 0:
        return WilcoxonResult(0.0, 1.0, 0, True)

    ranks = rankdata(np.abs(diff))
    w_plus = float(ranks[diff > 0].sum())
    w_minus = float(ranks[diff < 0].sum())
    statistic = min(w_plus, w_minus)

    if n <= EXACT_WILCOXON_MAX_N:
        doubled = np.rint(2.0 * ranks).astype(np.int64)
        p_value = min(1.0, 2.0 * _exact_lower_tail(doubled, int(round(2.0 * statistic))))
        return WilcoxonResult(statistic, p_value, n, True)

    _, counts = np.unique(np.abs(diff), return_counts=True)
    mean = n * (n + 1) / 4.0
    variance = n * (n + 1) * (2 * n + 1) / 24.0 - np.sum(counts ** 3 - counts) / 48.0
    z = (statistic - mean) / np.sqrt(variance)
    return WilcoxonResult(statistic, min(1.0, float(2.0 * norm.cdf(z))), n, False)


def pairwise_bonferroni(table, alpha: float = 0.05) -> List[PairwiseComparison]:
    """
    Wilcoxon signed-rank test for every column pair, Bonferroni-adjusted.

    Returns:
        One PairwiseComparison per pair (i < j) in column order; the median
        difference is column i minus column j
    """
    values, columns = _as_matrix(table)
    if values.shape[1] < 2:
        raise DataError("Pairwise comparison needs at least 2 columns")
    pairs = list(itertools.combinations(range(values.shape[1]), 2))
    comparisons = []
    for i, j in pairs:
        result = wilcoxon_signed_rank(values[:, i], values[:, j])
        adjusted = min(1.0, result.p_value * len(pairs))
        comparisons.append(PairwiseComparison(
            pair=(columns[i], columns[j]),
            raw_p=result.p_value,
            adjusted_p=adjusted,
            significant=adjusted < alpha,
            median_difference=float(np.median(values[:, i] - values[:, j])),
            statistic=result.statistic,
        ))
    return comparisons


def rank_comparisons(comparisons: List[PairwiseComparison]) -> List[PairwiseComparison]:
    """Strongest first: lowest adjusted p, then largest absolute median difference."""
    return sorted(comparisons, key=lambda c: (c.adjusted_p, -abs(c.median_difference)))
