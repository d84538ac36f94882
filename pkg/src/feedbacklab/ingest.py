"""Dataset stores: load, validate, save, and split paper corpora.

On-disk layout under a store root:

    manifest.json            {"format_version": 1, "splits": {name: [ids]}}
    records/<split>.jsonl    one PaperRecord object per line

Files are written in canonical form, so loading and re-saving a store
reproduces the original bytes.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .core import AuthorAction, Decision, PaperRecord, Validity, canonical_json
from .errors import IngestError, PipelineError

FORMAT_VERSION = 1

# (first year, last year, pool size) drawn decision-balanced per pool.
DEFAULT_TEST_POOLS: tuple[tuple[int, int, int], ...] = (
    (2020, 2025, 600),
    (2026, 2026, 598),
)


@dataclass(frozen=True)
class DatasetStore:
    """An immutable corpus: manifest of splits plus loaded records."""

    root_path: Path
    format_version: int
    manifest: Mapping[str, tuple[str, ...]]
    records: Mapping[str, PaperRecord]

    def split_names(self) -> list[str]:
        return sorted(self.manifest)

    def split_ids(self, split: str) -> tuple[str, ...]:
        if split not in self.manifest:
            raise IngestError(f"unknown split {split!r}")
        return self.manifest[split]

    def papers(self, split: str | None = None) -> list[PaperRecord]:
        if split is None:
            ids: Iterable[str] = (
                pid for name in self.split_names() for pid in self.manifest[name]
            )
        else:
            ids = self.split_ids(split)
        return [self.records[pid] for pid in ids]

    def counts(self) -> dict[str, Any]:
        by_split = {name: len(ids) for name, ids in sorted(self.manifest.items())}
        by_decision = Counter(
            record.decision.value for record in self.records.values()
        )
        return {
            "papers": len(self.records),
            "by_split": by_split,
            "by_decision": dict(sorted(by_decision.items())),
        }


def _read_manifest(root: Path) -> dict[str, Any]:
    path = root / "manifest.json"
    if not path.exists():
        raise IngestError(f"missing manifest: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise IngestError(f"malformed manifest {path}: {exc}") from None
    if not isinstance(data, dict) or "splits" not in data:
        raise IngestError(f"manifest {path} must contain a 'splits' object")
    version = data.get("format_version")
    if version != FORMAT_VERSION:
        raise IngestError(
            f"manifest {path}: unsupported format_version {version!r}, "
            f"expected {FORMAT_VERSION}"
        )
    return data


def load_corpus(root: str | Path) -> DatasetStore:
    """Load and validate a dataset store from its root directory."""
    root = Path(root)
    data = _read_manifest(root)
    manifest: dict[str, tuple[str, ...]] = {}
    claimed: dict[str, str] = {}
    for split, ids in data["splits"].items():
        if not isinstance(ids, list):
            raise IngestError(f"manifest split {split!r} must be a list of ids")
        for pid in ids:
            if pid in claimed:
                raise IngestError(
                    f"paper_id {pid!r} appears in splits "
                    f"{claimed[pid]!r} and {split!r}; splits must be disjoint"
                )
            claimed[pid] = split
        manifest[split] = tuple(ids)

    records: dict[str, PaperRecord] = {}
    for split, ids in manifest.items():
        path = root / "records" / f"{split}.jsonl"
        if not path.exists():
            raise IngestError(f"missing record file: {path}")
        found: dict[str, PaperRecord] = {}
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    record = PaperRecord.from_dict(json.loads(line))
                except (json.JSONDecodeError, KeyError, ValueError) as exc:
                    raise IngestError(
                        f"{path}:{lineno}: malformed record: {exc}"
                    ) from None
                if record.paper_id in found or record.paper_id in records:
                    raise IngestError(
                        f"{path}:{lineno}: duplicate paper_id "
                        f"{record.paper_id!r}"
                    )
                found[record.paper_id] = record
        missing = set(ids) - set(found)
        if missing:
            raise IngestError(
                f"{path}: manifest ids missing from records: {sorted(missing)}"
            )
        extra = set(found) - set(ids)
        if extra:
            raise IngestError(
                f"{path}: records not listed in manifest: {sorted(extra)}"
            )
        records.update(found)

    return DatasetStore(
        root_path=root,
        format_version=FORMAT_VERSION,
        manifest=manifest,
        records=records,
    )


def save_corpus(store: DatasetStore, root: str | Path) -> None:
    """Write a store to disk in canonical form."""
    root = Path(root)
    (root / "records").mkdir(parents=True, exist_ok=True)
    manifest = {
        "format_version": store.format_version,
        "splits": {name: list(ids) for name, ids in sorted(store.manifest.items())},
    }
    (root / "manifest.json").write_text(
        canonical_json(manifest) + "\n", encoding="utf-8"
    )
    for split, ids in sorted(store.manifest.items()):
        lines = [canonical_json(store.records[pid].to_dict()) for pid in ids]
        (root / "records" / f"{split}.jsonl").write_text(
            "".join(line + "\n" for line in lines), encoding="utf-8"
        )


def make_store(
    records: Sequence[PaperRecord],
    splits: Mapping[str, Sequence[str]],
    root: str | Path = ".",
) -> DatasetStore:
    """Assemble an in-memory store, applying the same validation as load."""
    by_id: dict[str, PaperRecord] = {}
    for record in records:
        if record.paper_id in by_id:
            raise IngestError(f"duplicate paper_id {record.paper_id!r}")
        by_id[record.paper_id] = record
    claimed: dict[str, str] = {}
    manifest: dict[str, tuple[str, ...]] = {}
    for split, ids in splits.items():
        for pid in ids:
            if pid not in by_id:
                raise IngestError(f"split {split!r} references unknown id {pid!r}")
            if pid in claimed:
                raise IngestError(
                    f"paper_id {pid!r} appears in splits "
                    f"{claimed[pid]!r} and {split!r}"
                )
            claimed[pid] = split
        manifest[split] = tuple(ids)
    return DatasetStore(
        root_path=Path(root),
        format_version=FORMAT_VERSION,
        manifest=manifest,
        records=by_id,
    )


def build_test_split(
    store: DatasetStore,
    seed: int,
    pools: Sequence[tuple[int, int, int]] = DEFAULT_TEST_POOLS,
) -> list[str]:
    """Decision-balanced test split drawn from year pools.

    Each pool (first_year, last_year, size) contributes size//2 rejected
    papers and the remainder accepted, selected by seeded shuffle of the
    sorted candidate ids. Papers without a known decision are ignored.
    """
    chosen: list[str] = []
    for pool_index, (first, last, size) in enumerate(pools):
        candidates: dict[Decision, list[str]] = {
            Decision.ACCEPTED: [],
            Decision.REJECTED: [],
        }
        for record in store.records.values():
            if first <= record.venue_year <= last and record.decision in candidates:
                candidates[record.decision].append(record.paper_id)
        need = {
            Decision.ACCEPTED: size - size // 2,
            Decision.REJECTED: size // 2,
        }
        for class_index, decision in enumerate(
            (Decision.ACCEPTED, Decision.REJECTED)
        ):
            ids = sorted(candidates[decision])
            want = need[decision]
            if len(ids) < want:
                raise IngestError(
                    f"pool {first}-{last}: need {want} {decision.value} "
                    f"papers, found {len(ids)}"
                )
            rng = np.random.default_rng(
                np.random.SeedSequence([seed, pool_index, class_index])
            )
            order = rng.permutation(len(ids))
            chosen.extend(ids[i] for i in order[:want])
    return chosen


@dataclass(frozen=True)
class AnnotationRecord:
    """One annotator's labels for a unit or a unit pair."""

    unit_id: str
    annotator_id: str
    validity: Validity | None = None
    action: AuthorAction | None = None
    match_label: bool | None = None
    likert: Mapping[str, int] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.unit_id or not self.annotator_id:
            raise IngestError("annotation needs unit_id and annotator_id")
        if (
            self.validity is None
            and self.action is None
            and self.match_label is None
            and not self.likert
        ):
            raise IngestError(
                f"annotation for {self.unit_id} by {self.annotator_id} "
                "carries no label"
            )
        for dim, value in self.likert.items():
            if not isinstance(value, int) or not 1 <= value <= 5:
                raise IngestError(
                    f"annotation for {self.unit_id}: likert {dim}={value!r} "
                    "outside 1..5"
                )
        object.__setattr__(self, "likert", dict(self.likert))

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "AnnotationRecord":
        validity = data.get("validity")
        action = data.get("action")
        return cls(
            unit_id=data["unit_id"],
            annotator_id=data["annotator_id"],
            validity=Validity(validity) if validity is not None else None,
            action=AuthorAction(action) if action is not None else None,
            match_label=data.get("match_label"),
            likert=data.get("likert", {}),
        )

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "unit_id": self.unit_id,
            "annotator_id": self.annotator_id,
        }
        if self.validity is not None:
            out["validity"] = self.validity.value
        if self.action is not None:
            out["action"] = self.action.value
        if self.match_label is not None:
            out["match_label"] = self.match_label
        if self.likert:
            out["likert"] = dict(sorted(self.likert.items()))
        return out


def load_annotations(
    path: str | Path, annotators: Sequence[str] | None = None
) -> list[AnnotationRecord]:
    """Read annotation JSONL; optionally restrict to known annotators."""
    path = Path(path)
    known = set(annotators) if annotators is not None else None
    out: list[AnnotationRecord] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = AnnotationRecord.from_dict(json.loads(line))
            except (json.JSONDecodeError, KeyError, ValueError) as exc:
                raise IngestError(
                    f"{path}:{lineno}: malformed annotation: {exc}"
                ) from None
            if known is not None and record.annotator_id not in known:
                raise IngestError(
                    f"{path}:{lineno}: unknown annotator "
                    f"{record.annotator_id!r}"
                )
            out.append(record)
    return out


def group_by_unit(
    records: Iterable[AnnotationRecord],
) -> dict[str, list[AnnotationRecord]]:
    grouped: dict[str, list[AnnotationRecord]] = {}
    for record in records:
        grouped.setdefault(record.unit_id, []).append(record)
    return grouped


def majority_vote(labels: Sequence[Any]) -> Any:
    """Strict majority label; a tie for first place is an error."""
    if not labels:
        raise PipelineError("majority_vote: no labels")
    counts = Counter(labels).most_common()
    if len(counts) > 1 and counts[0][1] == counts[1][1]:
        raise PipelineError(f"majority_vote: tie between {counts[0][0]!r} and "
                            f"{counts[1][0]!r}")
    return counts[0][0]
