"""Calibrate a similarity prefilter threshold from annotated pairs.

Builds a synthetic table of judged pairs whose per-stratum match rates
rise with cosine, then picks the lowest stratum floor that clears the
calibration bar. Pure library calls, no judging backend involved.
"""

from feedbacklab.consensus import (
    HUMAN_HUMAN,
    MatchEdge,
    build_stratum_table,
    calibrate_threshold,
    stratum_bounds,
)

# matches per 20 sampled pairs, one entry per cosine stratum
MATCHES_PER_STRATUM = [0, 0, 0, 1, 2, 9, 14]


def synthetic_edges() -> list[MatchEdge]:
    edges = []
    for idx, (lo, hi) in enumerate(stratum_bounds()):
        for j in range(20):
            edges.append(
                MatchEdge(
                    left_unit_id=f"s{idx}_{j}a",
                    right_unit_id=f"s{idx}_{j}b",
                    pair_type=HUMAN_HUMAN,
                    cosine=(lo + hi) / 2,
                    judged=j < MATCHES_PER_STRATUM[idx],
                )
            )
    return edges


def run() -> None:
    table = build_stratum_table(synthetic_edges())
    print("stratum        rate")
    for row in table.rows:
        rate = row.annotated_match_rate
        shown = "-" if rate is None else f"{rate:.2f}"
        print(f"({row.lower:5.2f}, {row.upper:4.2f}]   {shown}")
    threshold = calibrate_threshold(table)
    print(f"\ncalibrated prefilter threshold: {threshold}")


if __name__ == "__main__":
    run()
