"""Thread parsing: review discussions to labeled feedback units.

One judge call per thread; the judge segments the reviewer's critique,
pairs each unit with the authors' reply, and labels validity, action,
aspects, and dimensions in a single pass.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Any, Iterable, Sequence

from .core import (
    AspectTag,
    AuthorAction,
    FeedbackDimension,
    FeedbackUnit,
    PaperRecord,
    ReviewThread,
    Source,
    Speaker,
    Validity,
    make_unit_id,
)
from .errors import JudgeFormatError, PipelineError, StatsError
from .ingest import AnnotationRecord
from .judge import EndpointConfig, JudgeClient
from .prompts import THREAD_PARSE
from .stats import ContingencyTable, cohen_kappa, pabak


@dataclass(frozen=True)
class ParseResult:
    """Labeled units extracted from one review thread."""

    paper_id: str
    reviewer_id: str
    units: tuple[FeedbackUnit, ...]
    dropped_note: int
    cache_hit: bool
    template_version: str

    def to_audit_dict(self) -> dict[str, Any]:
        # cache_hit stays off the persisted audit record: a re-run of an
        # unchanged config must rewrite byte-identical artifacts, and
        # cache status flips between first and second run.
        return {
            "paper_id": self.paper_id,
            "reviewer_id": self.reviewer_id,
            "template": THREAD_PARSE.name,
            "template_version": self.template_version,
            "unit_count": len(self.units),
            "dropped_note": self.dropped_note,
        }


def render_conversation(thread: ReviewThread) -> str:
    lines = []
    for turn in thread.turns:
        label = "Reviewer" if turn.speaker is Speaker.REVIEWER else "Authors"
        lines.append(f"{label}: {turn.text}")
    return "\n\n".join(lines)


def parse_thread(
    client: JudgeClient,
    endpoint: EndpointConfig,
    record: PaperRecord,
    thread: ReviewThread,
) -> ParseResult:
    """Extract labeled feedback units from one thread via the judge.

    An empty unit list is valid output (the thread may be all praise);
    malformed judge output raises rather than returning partial results.
    """
    response = client.complete(
        endpoint,
        THREAD_PARSE,
        {
            "title": record.title,
            "abstract": record.abstract,
            "conversation": render_conversation(thread),
        },
    )
    units: list[FeedbackUnit] = []
    seen: set[str] = set()
    for entry in response.parsed["units"]:
        try:
            unit = FeedbackUnit(
                id=make_unit_id(
                    record.paper_id, thread.reviewer_id, entry["feedback_text"]
                ),
                paper_id=record.paper_id,
                reviewer_id=thread.reviewer_id,
                source=Source.HUMAN,
                text=entry["feedback_text"],
                author_response_text=entry.get("author_response_text"),
                validity=Validity(entry["validity"]),
                action=AuthorAction(entry["author_action"]),
                aspects=frozenset(AspectTag(a) for a in entry["aspects"]),
                dimensions=frozenset(
                    FeedbackDimension(d) for d in entry["dimensions"]
                ),
            )
        except (ValueError, KeyError) as exc:
            raise JudgeFormatError(
                f"thread_parse: unusable unit from judge: {exc}",
                raw_text=response.raw_text,
            ) from None
        if unit.id in seen:
            raise PipelineError(
                f"thread_parse: judge emitted duplicate unit text in "
                f"{record.paper_id}/{thread.reviewer_id}"
            )
        seen.add(unit.id)
        units.append(unit)
    return ParseResult(
        paper_id=record.paper_id,
        reviewer_id=thread.reviewer_id,
        units=tuple(units),
        dropped_note=response.parsed["skipped_positive_count"],
        cache_hit=response.cache_hit,
        template_version=response.template_version,
    )


def parse_record(
    client: JudgeClient, endpoint: EndpointConfig, record: PaperRecord
) -> tuple[PaperRecord, list[ParseResult]]:
    """Parse every thread of one paper; returns the updated record."""
    results = [
        parse_thread(client, endpoint, record, thread)
        for thread in record.threads
    ]
    units = [u for result in results for u in result.units]
    return record.with_units(units), results


def parse_papers(
    client: JudgeClient,
    endpoint: EndpointConfig,
    records: Sequence[PaperRecord],
) -> tuple[list[PaperRecord], list[ParseResult]]:
    """Parse many papers, threads in parallel, output in input order."""
    jobs = [
        (i, record, thread)
        for i, record in enumerate(records)
        for thread in record.threads
    ]
    results: dict[tuple[int, str], ParseResult] = {}
    if endpoint.max_concurrency > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=endpoint.max_concurrency) as pool:
            futures = {
                pool.submit(parse_thread, client, endpoint, record, thread): (
                    i,
                    thread.reviewer_id,
                )
                for i, record, thread in jobs
            }
            for future, key in futures.items():
                results[key] = future.result()
    else:
        for i, record, thread in jobs:
            results[(i, thread.reviewer_id)] = parse_thread(
                client, endpoint, record, thread
            )
    updated: list[PaperRecord] = []
    ordered: list[ParseResult] = []
    for i, record in enumerate(records):
        per_paper = [results[(i, t.reviewer_id)] for t in record.threads]
        ordered.extend(per_paper)
        updated.append(
            record.with_units(u for r in per_paper for u in r.units)
        )
    return updated, ordered


def _pooled_pair_table(
    per_unit_labels: Iterable[Sequence[str]],
) -> tuple[ContingencyTable | None, int, int]:
    """Symmetrized annotator-pair contingency table.

    Every unordered annotator pair inside a unit contributes both
    orientations, making the table rater-order invariant. Returns
    (table, pair count, unit count); table is None when no unit has
    two or more labels.
    """
    pairs: list[tuple[str, str]] = []
    units_used = 0
    for labels in per_unit_labels:
        if len(labels) < 2:
            continue
        units_used += 1
        for i in range(len(labels)):
            for j in range(i + 1, len(labels)):
                pairs.append((labels[i], labels[j]))
                pairs.append((labels[j], labels[i]))
    if not pairs:
        return None, 0, units_used
    categories = sorted({c for pair in pairs for c in pair})
    index = {c: k for k, c in enumerate(categories)}
    counts = [[0] * len(categories) for _ in categories]
    for a, b in pairs:
        counts[index[a]][index[b]] += 1
    return ContingencyTable(tuple(map(tuple, counts))), len(pairs) // 2, units_used


def agreement_report(
    annotations: Sequence[AnnotationRecord],
    reference: Sequence[FeedbackUnit] = (),
) -> dict[str, Any]:
    """Agreement table per label kind (validity, action).

    Inter-annotator rows pool symmetrized annotator pairs per unit;
    reference rows compare each annotation against the reference unit's
    label (accuracy plus its PABAK rescaling).
    """
    ref_by_id = {u.id: u for u in reference}
    report: dict[str, Any] = {}
    for kind in ("validity", "action"):
        per_unit: dict[str, list[str]] = {}
        comparisons: list[bool] = []
        for ann in annotations:
            label = getattr(ann, kind)
            if label is None:
                continue
            per_unit.setdefault(ann.unit_id, []).append(label.value)
            ref_unit = ref_by_id.get(ann.unit_id)
            if ref_unit is not None:
                ref_label = getattr(ref_unit, kind)
                if ref_label is not None:
                    comparisons.append(ref_label.value == label.value)
        table, n_pairs, n_units = _pooled_pair_table(per_unit.values())
        if table is None and not comparisons:
            raise StatsError(f"agreement_report: no usable {kind} annotations")
        entry: dict[str, Any] = {}
        if table is not None:
            diag = sum(
                table.counts[i][i] for i in range(len(table.counts))
            )
            observed = diag / table.total
            entry["inter_annotator"] = {
                "observed_agreement": observed,
                "pabak": pabak(observed),
                "cohen_kappa": cohen_kappa(table),
                "n_pairs": n_pairs,
                "n_units": n_units,
            }
        if comparisons:
            accuracy = sum(comparisons) / len(comparisons)
            entry["vs_reference"] = {
                "accuracy": accuracy,
                "pabak": pabak(accuracy),
                "n": len(comparisons),
            }
        report[kind] = entry
    return report
