"""Agreement coefficients, exact tests, and bootstrap machinery.

Test statistics and exact enumerations are implemented here directly so
their conventions are pinned down (two-sided definitions vary between
libraries); scipy is used only for chi-square tail probabilities.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from fractions import Fraction
from itertools import combinations
from typing import Any, Callable, Iterable, Sequence

import numpy as np
from scipy.stats import chi2 as _chi2_dist

from .errors import StatsError

logger = logging.getLogger(__name__)

# Exact Mann-Whitney enumeration is used at or below this n1*n2 product.
EXACT_MWU_LIMIT = 400


@dataclass(frozen=True)
class ContingencyTable:
    """A small r x c grid of nonnegative integer counts."""

    counts: tuple[tuple[int, ...], ...]

    def __post_init__(self) -> None:
        rows = tuple(tuple(int(c) for c in row) for row in self.counts)
        if not rows or not rows[0]:
            raise StatsError("contingency table must be nonempty")
        width = len(rows[0])
        if any(len(row) != width for row in rows):
            raise StatsError("contingency table rows must have equal length")
        if any(c < 0 for row in rows for c in row):
            raise StatsError("contingency table counts must be nonnegative")
        if sum(c for row in rows for c in row) == 0:
            raise StatsError("contingency table total must be positive")
        object.__setattr__(self, "counts", rows)

    @property
    def total(self) -> int:
        return sum(c for row in self.counts for c in row)

    @property
    def shape(self) -> tuple[int, int]:
        return len(self.counts), len(self.counts[0])

    def row_totals(self) -> tuple[int, ...]:
        return tuple(sum(row) for row in self.counts)

    def col_totals(self) -> tuple[int, ...]:
        return tuple(sum(col) for col in zip(*self.counts))


def _as_table(table: Any) -> ContingencyTable:
    if isinstance(table, ContingencyTable):
        return table
    return ContingencyTable(tuple(tuple(row) for row in table))


@dataclass(frozen=True)
class CIReport:
    """Point estimate with 95% percentile bootstrap bounds."""

    point_estimate: float
    lower: float
    upper: float
    iterations: int
    seed: int

    def __post_init__(self) -> None:
        if self.lower > self.upper:
            raise StatsError("CI lower bound exceeds upper bound")

    @property
    def half_width(self) -> float:
        return (self.upper - self.lower) / 2.0

    def to_dict(self) -> dict[str, Any]:
        return {
            "point_estimate": self.point_estimate,
            "lower": self.lower,
            "upper": self.upper,
            "half_width": self.half_width,
            "iterations": self.iterations,
            "seed": self.seed,
        }


def observed_agreement(table: Any) -> float:
    """Fraction of paired ratings on the diagonal of a square table."""
    t = _as_table(table)
    r, c = t.shape
    if r != c:
        raise StatsError(f"observed agreement needs a square table, got {r}x{c}")
    return sum(t.counts[i][i] for i in range(r)) / t.total


def pabak(observed: float | Fraction) -> float:
    """Prevalence- and bias-adjusted kappa: 2*p_o - 1.

    Float inputs are read as the decimal they print as, so a rate
    quoted to three decimals maps onto an exact three-decimal result
    (pabak(0.874) == 0.748, not 0.748000...01).
    """
    if not 0.0 <= observed <= 1.0:
        raise StatsError(f"observed agreement must be in [0,1], got {observed}")
    exact = (
        observed
        if isinstance(observed, Fraction)
        else Fraction(str(observed))
    )
    return float(2 * exact - 1)


def cohen_kappa(table: Any) -> float:
    """Chance-corrected agreement with marginal-product expectation.

    Returns 0.0 when expected agreement is 1 (single-class degenerate
    data), since the usual ratio is undefined there.
    """
    t = _as_table(table)
    r, c = t.shape
    if r != c:
        raise StatsError(f"cohen_kappa needs a square table, got {r}x{c}")
    n = t.total
    p_o = Fraction(sum(t.counts[i][i] for i in range(r)), n)
    p_e = sum(
        Fraction(rt, n) * Fraction(ct, n)
        for rt, ct in zip(t.row_totals(), t.col_totals())
    )
    if p_e == 1:
        logger.warning("cohen_kappa: expected agreement is 1, returning 0.0")
        return 0.0
    return float((p_o - p_e) / (1 - p_e))


def krippendorff_alpha(
    ratings: Sequence[Sequence[Any]], metric: str = "nominal"
) -> float:
    """Krippendorff's alpha over a units x annotators matrix.

    Missing entries are None. Units with fewer than two ratings are
    excluded. Only the nominal metric is supported.
    """
    if metric != "nominal":
        raise StatsError(f"unsupported metric: {metric!r}")
    # Coincidence matrix: each co-rated unit contributes its ordered
    # value pairs with weight 1/(m_u - 1).
    coincidence: dict[tuple[Any, Any], Fraction] = {}
    usable_units = 0
    for row in ratings:
        values = [v for v in row if v is not None]
        m = len(values)
        if m < 2:
            continue
        usable_units += 1
        w = Fraction(1, m - 1)
        for i, vi in enumerate(values):
            for j, vj in enumerate(values):
                if i == j:
                    continue
                key = (vi, vj)
                coincidence[key] = coincidence.get(key, Fraction(0)) + w
    if usable_units == 0:
        raise StatsError("krippendorff_alpha: no unit has two or more ratings")
    categories = sorted({c for pair in coincidence for c in pair}, key=repr)
    n_c = {
        c: sum(coincidence.get((c, k), Fraction(0)) for k in categories)
        for c in categories
    }
    n = sum(n_c.values())
    disagree_observed = sum(
        v for (c, k), v in coincidence.items() if c != k
    )
    disagree_expected = sum(
        n_c[c] * n_c[k] for c, k in combinations(categories, 2)
    ) * 2
    if disagree_expected == 0:
        # Every rating in every co-rated unit is the same single value.
        return 1.0
    return float(1 - (n - 1) * disagree_observed / disagree_expected)


def _chi2_sf_1df(stat: float) -> float:
    # Closed form for 1 df; keeps the 2x2 path free of scipy.
    return math.erfc(math.sqrt(stat / 2.0))


def chi_square_test(table: Any) -> tuple[float, float]:
    """Pearson chi-square on a 2x2 table, 1 df, no continuity correction."""
    t = _as_table(table)
    if t.shape != (2, 2):
        raise StatsError(f"chi_square_test needs a 2x2 table, got {t.shape}")
    rows, cols, n = t.row_totals(), t.col_totals(), t.total
    if 0 in rows or 0 in cols:
        raise StatsError("chi_square_test: zero margin, statistic undefined")
    stat = 0.0
    for i in range(2):
        for j in range(2):
            expected = rows[i] * cols[j] / n
            stat += (t.counts[i][j] - expected) ** 2 / expected
    return stat, _chi2_sf_1df(stat)


def fisher_exact(table: Any) -> float:
    """Two-sided Fisher exact p for a 2x2 table.

    Convention: sum of hypergeometric probabilities of all tables with
    the same margins that are at most as probable as the observed one.
    Exact rational arithmetic throughout.
    """
    t = _as_table(table)
    if t.shape != (2, 2):
        raise StatsError(f"fisher_exact needs a 2x2 table, got {t.shape}")
    (a, _b), (c, _d) = t.counts
    r1, r2 = t.row_totals()
    c1, _c2 = t.col_totals()
    n = t.total

    def pmf(k: int) -> Fraction:
        return Fraction(math.comb(r1, k) * math.comb(r2, c1 - k), math.comb(n, c1))

    lo = max(0, c1 - r2)
    hi = min(r1, c1)
    p_obs = pmf(a)
    p = sum((pmf(k) for k in range(lo, hi + 1) if pmf(k) <= p_obs), Fraction(0))
    return float(min(p, Fraction(1)))


def binary_tests(table: Any) -> dict[str, float]:
    """Chi-square and Fisher exact p-values for one 2x2 table.

    Raises on a zero margin because the chi-square statistic is
    undefined there; call fisher_exact directly for such tables.
    """
    stat, chi_p = chi_square_test(table)
    return {
        "chi_square_stat": stat,
        "chi_square_p": chi_p,
        "fisher_exact_p": fisher_exact(table),
    }


def _midranks(pooled: Sequence[float]) -> list[float]:
    order = sorted(range(len(pooled)), key=lambda i: pooled[i])
    ranks = [0.0] * len(pooled)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and pooled[order[j + 1]] == pooled[order[i]]:
            j += 1
        mid = (i + j) / 2.0 + 1.0
        for k in range(i, j + 1):
            ranks[order[k]] = mid
        i = j + 1
    return ranks


def _tie_term(pooled: Sequence[float]) -> int:
    counts: dict[float, int] = {}
    for v in pooled:
        counts[v] = counts.get(v, 0) + 1
    return sum(m**3 - m for m in counts.values())


def _mwu_doubled_u(x: Sequence[float], y: Sequence[float]) -> int:
    # 2*U1 by direct pair counting: wins count 2, ties count 1.
    u2 = 0
    for xi in x:
        for yj in y:
            if xi > yj:
                u2 += 2
            elif xi == yj:
                u2 += 1
    return u2


def _mwu_exact_p(x: Sequence[float], y: Sequence[float], u2_obs: int) -> float:
    """Exact two-sided p by counting group assignments.

    Dynamic program over tied value blocks of the pooled sample; tracks
    (group-1 count, doubled U) so all arithmetic stays integral. The
    null distribution of U is symmetric about n1*n2/2 even under ties,
    so two-sided p sums assignments at least as far from the center.
    """
    n1, n2 = len(x), len(y)
    pooled = sorted(list(x) + list(y))
    blocks: list[int] = []
    i = 0
    while i < len(pooled):
        j = i
        while j + 1 < len(pooled) and pooled[j + 1] == pooled[i]:
            j += 1
        blocks.append(j - i + 1)
        i = j + 1

    states: dict[tuple[int, int], int] = {(0, 0): 1}
    processed = 0
    for m in blocks:
        nxt: dict[tuple[int, int], int] = {}
        for (k, u2), ways in states.items():
            g2_before = processed - k
            for t in range(0, min(m, n1 - k) + 1):
                # t block members join group 1: they beat every earlier
                # group-2 member (2 each) and tie the m-t staying here.
                key = (k + t, u2 + 2 * t * g2_before + t * (m - t))
                nxt[key] = nxt.get(key, 0) + ways * math.comb(m, t)
        states = nxt
        processed += m

    dist: dict[int, int] = {}
    for (k, u2), ways in states.items():
        if k == n1:
            dist[u2] = dist.get(u2, 0) + ways
    total = math.comb(n1 + n2, n1)
    center2 = n1 * n2  # doubled n1*n2/2
    dev = abs(u2_obs - center2)
    hits = sum(w for u2, w in dist.items() if abs(u2 - center2) >= dev)
    return float(Fraction(hits, total))


def mann_whitney_u(
    x: Sequence[float], y: Sequence[float], exact_limit: int = EXACT_MWU_LIMIT
) -> dict[str, Any]:
    """Two-sided Mann-Whitney U test.

    U is reported for the first sample (count of x > y pairs plus half
    the ties). Exact enumeration when n1*n2 <= exact_limit, otherwise a
    tie-corrected normal approximation without continuity correction.
    """
    if not x or not y:
        raise StatsError("mann_whitney_u: both samples must be nonempty")
    n1, n2 = len(x), len(y)
    u2_obs = _mwu_doubled_u(x, y)
    u = u2_obs / 2.0
    pooled = list(x) + list(y)
    if n1 * n2 <= exact_limit:
        return {"u": u, "p": _mwu_exact_p(x, y, u2_obs), "method": "exact"}
    n = n1 + n2
    tie = _tie_term(pooled)
    sigma2 = (n1 * n2 / 12.0) * ((n + 1) - tie / (n * (n - 1)))
    if sigma2 <= 0:
        return {
            "u": u,
            "p": 1.0,
            "method": "normal",
            "note": "all pooled observations identical",
        }
    z = (u - n1 * n2 / 2.0) / math.sqrt(sigma2)
    return {"u": u, "p": math.erfc(abs(z) / math.sqrt(2.0)), "method": "normal"}


def kruskal_wallis(groups: Sequence[Sequence[float]]) -> dict[str, Any]:
    """Tie-corrected Kruskal-Wallis H with chi-square approximation."""
    if len(groups) < 2:
        raise StatsError("kruskal_wallis: need at least two groups")
    if any(len(g) == 0 for g in groups):
        raise StatsError("kruskal_wallis: groups must be nonempty")
    pooled = [v for g in groups for v in g]
    n = len(pooled)
    ranks = _midranks(pooled)
    h = 0.0
    offset = 0
    for g in groups:
        r_sum = sum(ranks[offset : offset + len(g)])
        h += r_sum**2 / len(g)
        offset += len(g)
    h = 12.0 / (n * (n + 1)) * h - 3.0 * (n + 1)
    correction = 1.0 - _tie_term(pooled) / (n**3 - n)
    if correction == 0.0:
        return {
            "statistic": 0.0,
            "p": 1.0,
            "note": "all observations identical",
        }
    h_corrected = h / correction
    p = float(_chi2_dist.sf(h_corrected, len(groups) - 1))
    return {"statistic": h_corrected, "p": p}


def ordinal_tests(
    groups: Sequence[Sequence[float]],
    exact_limit: int = EXACT_MWU_LIMIT,
    correction: str | None = None,
) -> dict[str, Any]:
    """Kruskal-Wallis across groups plus pairwise Mann-Whitney U.

    Pairwise p-values are uncorrected by default; correction="bonferroni"
    multiplies each by the number of pairs (capped at 1).
    """
    if correction not in (None, "bonferroni"):
        raise StatsError(f"unknown correction: {correction!r}")
    kw = kruskal_wallis(groups)
    pairs: dict[str, dict[str, Any]] = {}
    keys = list(combinations(range(len(groups)), 2))
    for i, j in keys:
        result = mann_whitney_u(groups[i], groups[j], exact_limit=exact_limit)
        if correction == "bonferroni":
            result = {**result, "p": min(1.0, result["p"] * len(keys))}
        pairs[f"{i}_vs_{j}"] = result
    out: dict[str, Any] = {"kruskal_wallis": kw, "pairwise": pairs}
    if correction:
        out["correction"] = correction
    return out


def spawn_rngs(seed: int, count: int) -> list[np.random.Generator]:
    """Independent child generators; aggregation over them is
    order-free because each child stream is derived, not shared."""
    seq = np.random.SeedSequence(seed)
    return [np.random.default_rng(child) for child in seq.spawn(count)]


def percentile_bootstrap(
    sampler: Callable[[np.random.Generator], float],
    iterations: int,
    seed: int,
) -> CIReport:
    """Mean of B sampler draws with 2.5/97.5 percentile bounds.

    Each iteration gets its own derived generator, so results do not
    depend on evaluation order.
    """
    if iterations < 2:
        raise StatsError("percentile_bootstrap: need at least 2 iterations")
    draws = np.array(
        [float(sampler(rng)) for rng in spawn_rngs(seed, iterations)]
    )
    lower, upper = np.percentile(draws, [2.5, 97.5])
    return CIReport(
        point_estimate=float(draws.mean()),
        lower=float(lower),
        upper=float(upper),
        iterations=iterations,
        seed=seed,
    )


def percentile_ci(draws: Iterable[float]) -> tuple[float, float]:
    """2.5/97.5 percentile bounds with linear interpolation."""
    arr = np.asarray(list(draws), dtype=float)
    if arr.size < 2:
        raise StatsError("percentile_ci: need at least 2 draws")
    lower, upper = np.percentile(arr, [2.5, 97.5])
    return float(lower), float(upper)
