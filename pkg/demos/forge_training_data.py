"""Forge SFT and DPO training records from a tiny synthetic corpus.

Two papers, each with a mix of feedback the authors acted on and
feedback they pushed back on. Corruption rewrites and their
verification verdicts come from a scripted backend, so everything
runs offline. Outputs land in demos/out/forge.

The backend also shows what the protocol expects: verification sees
the rewrites in a blinded shuffled order, so verdicts must be keyed
off each rewrite's content, not its original position.
"""

import json
from pathlib import Path

from feedbacklab.core import (
    AuthorAction,
    FeedbackUnit,
    PaperRecord,
    ReviewThread,
    Source,
    Speaker,
    Turn,
    Validity,
    canonical_json,
    make_unit_id,
)
from feedbacklab.forge import (
    aggregate_filter_stats,
    build_corruption_bank,
    build_dpo,
    build_sft,
)
from feedbacklab.ingest import make_store
from feedbacklab.judge import EndpointConfig, JudgeClient, StubBackend
from feedbacklab.prompts import CORRUPTION_DIMENSIONS

OUT = Path(__file__).parent / "out" / "forge"

POINTS = [
    ("the ablation omits the retrieval component", True),
    ("error bars are missing from the main comparison", True),
    ("the related-work section skips recent retrieval methods", True),
    ("claims about efficiency lack wall-clock measurements", True),
    ("the limitations section is thin", True),
    ("reviewer asks for a broader impact statement", False),
    ("the title should be changed", False),
    ("a full rewrite in a different framework is suggested", False),
    ("the reviewer disputes the choice of programming language", False),
    ("formatting of table captions is questioned", False),
]


def unit(pid: str, text: str, successful: bool) -> FeedbackUnit:
    return FeedbackUnit(
        id=make_unit_id(pid, "R1", text),
        paper_id=pid,
        reviewer_id="R1",
        source=Source.HUMAN,
        text=text,
        validity=Validity.AGREED if successful else Validity.REBUTTED,
        action=AuthorAction.WILL_REVISE
        if successful
        else AuthorAction.NO_REVISION_CONTEST,
    )


def paper(pid: str) -> PaperRecord:
    units = tuple(
        unit(pid, f"{pid}: {text}", successful) for text, successful in POINTS
    )
    return PaperRecord(
        paper_id=pid,
        title=f"A study ({pid})",
        abstract="We study a thing and report results.",
        venue_year=2026,
        threads=(
            ReviewThread(
                reviewer_id="R1",
                turns=(Turn(speaker=Speaker.REVIEWER, text="see points"),),
            ),
        ),
        units=units,
        body_markdown="# Introduction\n\nPaper body goes here.",
    )


class ScriptedBackend:
    """Offline Backend implementation for the two forge templates.

    Rewrites carry their dimension as a text prefix; the verifier reads
    it back from each shuffled rewrite and confirms with top scores.
    Embeddings reuse the stub's hash-derived unit vectors.
    """

    def __init__(self) -> None:
        self._stub = StubBackend()

    def complete(self, endpoint, template, bindings, system_text, user_text):
        if template.name == "corruption":
            payload = {
                dim: f"[{dim}] {bindings['feedback_text']}"
                for dim in CORRUPTION_DIMENSIONS
            }
        elif template.name == "corruption_verify":
            rewrites = json.loads(bindings["rewrites_json"])
            payload = {
                "results": [
                    {
                        "rewrite_index": i,
                        "predicted_dimension": text.split("]", 1)[0][1:],
                        "target_degradation": 3,
                        "collateral_preservation": 3,
                    }
                    for i, text in enumerate(rewrites)
                ]
            }
        else:
            raise AssertionError(f"unexpected template {template.name!r}")
        return canonical_json(payload), {}

    def embed(self, endpoint, texts):
        return self._stub.embed(endpoint, texts)


def run() -> None:
    OUT.mkdir(parents=True, exist_ok=True)
    papers = [paper("paper-a"), paper("paper-b")]
    store = make_store(papers, {"train": [p.paper_id for p in papers]})
    client = JudgeClient(ScriptedBackend())
    endpoint = EndpointConfig()

    sft_manifest = build_sft(store, "train", OUT / "sft.jsonl")
    print(f"sft records: {sft_manifest.record_count}")

    bank, stats = build_corruption_bank(
        client, endpoint, endpoint, papers, max_units_per_paper=1
    )
    kept = sum(len(v) for v in bank.values())
    print(f"corruption bank: {kept} kept variants across {len(bank)} units")
    by_dim = aggregate_filter_stats(stats)
    rate = sum(row["keep_rate"] for row in by_dim.values()) / len(by_dim)
    print(f"filter keep rate: {rate:.3f}")

    dpo_manifest = build_dpo(
        store,
        "train",
        bank,
        OUT / "dpo.jsonl",
        lambda texts: client.embed(endpoint, texts),
        seed=0,
    )
    print(f"dpo pairs: {dpo_manifest.record_count}")

    first = json.loads((OUT / "dpo.jsonl").read_text().splitlines()[0])
    print(f"sample pair kind: {first['pair_kind']}")
    print(f"chosen set size:  {len(first['chosen_items'])}")


if __name__ == "__main__":
    run()
