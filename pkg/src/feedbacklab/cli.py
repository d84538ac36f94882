"""Command-line front end: config loading, run directories, reports.

Every command executes under a run directory keyed by the config hash
(so re-running an unchanged stub config rewrites identical bytes), and
renders its report in all three formats. Exit codes: 0 ok, 2 config
error, 3 pipeline error, 4 judge-format error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import traceback
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

from . import consensus as cons
from . import forge, parse, successeval
from .config import PipelineConfig, config_hash, load_config
from .core import FeedbackUnit, PaperRecord, Source, canonical_json, make_unit_id
from .errors import ConfigError, FeedbackLabError, IngestError, PipelineError
from .ingest import (
    DatasetStore,
    group_by_unit,
    load_annotations,
    load_corpus,
    majority_vote,
    save_corpus,
)
from .judge import HttpBackend, JudgeClient, StubBackend
from .prompts import prompt_versions
from .report import EvalReport, ReportTable, render_report

COMMANDS = (
    "ingest",
    "parse",
    "forge-sft",
    "forge-dpo",
    "calibrate",
    "consensus-eval",
    "success-eval",
    "report",
)

RUN_ID_CHARS = 16


class RunContext:
    """One command execution inside its locked run directory."""

    def __init__(self, config: PipelineConfig, command: str):
        self.config = config
        self.command = command
        self.hash = config_hash(config)
        runs_root = Path(config.resolved_paths()["runs_root"])
        self.run_dir = runs_root / self.hash[:RUN_ID_CHARS]
        self.artifacts = self.run_dir / "artifacts"
        self.cache_dir = self.run_dir / "cache"
        self.events: list[dict[str, Any]] = []
        self._lock_fd: int | None = None

    def __enter__(self) -> "RunContext":
        self.artifacts.mkdir(parents=True, exist_ok=True)
        self.cache_dir.mkdir(parents=True, exist_ok=True)
        lock_path = self.run_dir / "lock"
        try:
            self._lock_fd = os.open(
                lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY
            )
        except FileExistsError:
            raise PipelineError(
                f"run directory {self.run_dir} is locked by another process "
                "(remove the 'lock' file if that process is gone)"
            ) from None
        os.write(self._lock_fd, str(os.getpid()).encode())
        return self

    def __exit__(self, *exc_info) -> None:
        if self._lock_fd is not None:
            os.close(self._lock_fd)
            (self.run_dir / "lock").unlink(missing_ok=True)

    def log(self, event: str, **data: Any) -> None:
        self.events.append({"event": event, **data})

    def client(self) -> JudgeClient:
        if self.config.mode == "stub":
            fixture = self.config.stub_fixture_path()
            backend = (
                StubBackend.from_file(fixture) if fixture else StubBackend()
            )
        else:
            backend = HttpBackend()
        return JudgeClient(backend, cache_dir=self.cache_dir)

    def base_metadata(self) -> dict[str, Any]:
        return {
            "command": self.command,
            "config_hash": self.hash,
            "prompt_versions": prompt_versions(),
            "mode": self.config.mode,
            "split": self.config.split,
            "seed": self.config.sampling.seed,
        }

    def write_jsonl(self, name: str, rows: Sequence[Mapping[str, Any]]) -> Path:
        path = self.artifacts / name
        path.write_text(
            "".join(canonical_json(dict(r)) + "\n" for r in rows),
            encoding="utf-8",
        )
        return path

    def finish(self, report: EvalReport, write_log: bool = True) -> None:
        (self.artifacts / "eval_report.json").write_text(
            canonical_json(report.to_dict()) + "\n", encoding="utf-8"
        )
        self.render(report)
        if write_log:
            (self.run_dir / "log.jsonl").write_text(
                "".join(canonical_json(e) + "\n" for e in self.events),
                encoding="utf-8",
            )

    def render(self, report: EvalReport) -> None:
        (self.run_dir / "report.json").write_text(
            render_report(report, "json"), encoding="utf-8"
        )
        (self.run_dir / "report.csv").write_text(
            render_report(report, "csv"), encoding="utf-8"
        )
        (self.run_dir / "report.md").write_text(
            render_report(report, "markdown-table"), encoding="utf-8"
        )


def load_model_units(
    path: Path, papers: Mapping[str, PaperRecord]
) -> dict[str, list[FeedbackUnit]]:
    """Model feedback JSONL: one unit per line.

    Required fields: paper_id, text. Optional: model_name (defaults to
    "model"; doubles as the unit's reviewer_id). Unit ids derive from
    content, so the file carries none.
    """
    if not path.exists():
        raise IngestError(f"model feedback file not found: {path}")
    out: dict[str, list[FeedbackUnit]] = {}
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                data = json.loads(line)
                paper_id = data["paper_id"]
                text = data["text"]
            except (json.JSONDecodeError, KeyError) as exc:
                raise IngestError(
                    f"{path}:{lineno}: malformed model feedback: {exc}"
                ) from None
            if paper_id not in papers:
                raise IngestError(
                    f"{path}:{lineno}: unknown paper_id {paper_id!r}"
                )
            model_name = data.get("model_name", "model")
            unit = FeedbackUnit(
                id=make_unit_id(paper_id, model_name, text),
                paper_id=paper_id,
                reviewer_id=model_name,
                source=Source.MODEL,
                text=text,
            )
            if unit.id in seen:
                raise IngestError(
                    f"{path}:{lineno}: duplicate model feedback text for "
                    f"{paper_id}"
                )
            seen.add(unit.id)
            out.setdefault(paper_id, []).append(unit)
    return out


def _load_store(ctx: RunContext) -> DatasetStore:
    store = load_corpus(ctx.config.path("corpus_root"))
    ctx.log("load_corpus", **store.counts())
    return store


# -- commands ----------------------------------------------------------


def cmd_ingest(ctx: RunContext) -> EvalReport:
    store = _load_store(ctx)
    counts = store.counts()
    rows = [("papers", counts["papers"])]
    rows += [
        (f"split:{name}", n) for name, n in sorted(counts["by_split"].items())
    ]
    rows += [
        (f"decision:{name}", n)
        for name, n in sorted(counts["by_decision"].items())
    ]
    units = sum(len(p.units) for p in store.records.values())
    successful = sum(
        len(p.successful_units()) for p in store.records.values()
    )
    rows += [("units", units), ("successful_units", successful)]
    return EvalReport(
        metadata=ctx.base_metadata(),
        tables={
            "corpus": ReportTable(columns=("key", "value"), rows=tuple(rows))
        },
    )


def cmd_parse(ctx: RunContext) -> EvalReport:
    store = _load_store(ctx)
    config = ctx.config
    client = ctx.client()
    records = store.papers(config.split)
    parsed, results = parse.parse_papers(
        client, config.endpoint("thread_parse"), records
    )
    updated = dict(store.records)
    for record in parsed:
        updated[record.paper_id] = record
    new_store = DatasetStore(
        root_path=store.root_path,
        format_version=store.format_version,
        manifest=store.manifest,
        records=updated,
    )
    save_corpus(new_store, ctx.artifacts / "parsed_store")
    ctx.write_jsonl(
        "parse_audit.jsonl", [r.to_audit_dict() for r in results]
    )
    ctx.log(
        "parse",
        papers=len(records),
        threads=len(results),
        units=sum(len(r.units) for r in results),
    )
    tables = {
        "parse_summary": ReportTable(
            columns=("key", "value"),
            rows=(
                ("papers", len(records)),
                ("threads", len(results)),
                ("units", sum(len(r.units) for r in results)),
                ("skipped_positive", sum(r.dropped_note for r in results)),
            ),
        )
    }
    annotations_path = config.resolved_paths()["annotations"]
    if annotations_path:
        annotations = load_annotations(annotations_path)
        reference = [u for record in parsed for u in record.units]
        agreement = parse.agreement_report(annotations, reference)
        rows = []
        for kind, entry in sorted(agreement.items()):
            inter = entry.get("inter_annotator")
            if inter:
                rows.append(
                    (
                        kind,
                        "inter_annotator",
                        inter["observed_agreement"],
                        inter["pabak"],
                        inter["cohen_kappa"],
                        inter["n_pairs"],
                    )
                )
            ref = entry.get("vs_reference")
            if ref:
                rows.append(
                    (kind, "vs_reference", ref["accuracy"], ref["pabak"], "", ref["n"])
                )
        tables["agreement"] = ReportTable(
            columns=("label", "scope", "agreement", "pabak", "kappa", "n"),
            rows=tuple(rows),
        )
    return EvalReport(metadata=ctx.base_metadata(), tables=tables)


def cmd_forge_sft(ctx: RunContext) -> EvalReport:
    store = _load_store(ctx)
    manifest = forge.build_sft(
        store, ctx.config.split, ctx.artifacts / "sft.jsonl"
    )
    manifest.write(ctx.artifacts / "sft_manifest.json")
    ctx.log("forge_sft", records=manifest.record_count)
    return EvalReport(
        metadata=ctx.base_metadata(),
        tables={
            "manifest": ReportTable(
                columns=("key", "value"),
                rows=(
                    ("kind", manifest.kind),
                    ("records", manifest.record_count),
                    ("prompt_version", manifest.prompt_version),
                ),
            )
        },
        details={"manifest": manifest.to_dict()},
    )


def cmd_forge_dpo(ctx: RunContext) -> EvalReport:
    store = _load_store(ctx)
    config = ctx.config
    client = ctx.client()
    papers = store.papers(config.split)
    bank, filter_stats = forge.build_corruption_bank(
        client,
        config.endpoint("corruption"),
        config.endpoint("corruption_verify"),
        papers,
        seed=config.sampling.seed,
        max_units_per_paper=config.sampling.max_corruption_units_per_paper,
    )
    embedding_endpoint = config.endpoint("embedding")

    def embed_fn(texts: Sequence[str]):
        return client.embed(embedding_endpoint, texts)

    manifest = forge.build_dpo(
        store,
        config.split,
        bank,
        ctx.artifacts / "dpo.jsonl",
        embed_fn,
        k=config.sampling.k,
        delta=config.thresholds.delta,
        dedup_threshold=config.thresholds.dedup,
        pairs_per_paper=config.sampling.pairs_per_paper,
        corruption_pairs_per_paper=config.sampling.corruption_pairs_per_paper,
        seed=config.sampling.seed,
        chosen_successful_only=config.flags.chosen_successful_only,
    )
    manifest.write(ctx.artifacts / "dpo_manifest.json")
    ctx.write_jsonl(
        "corruption_filter.jsonl", [s.to_dict() for s in filter_stats]
    )
    ctx.log("forge_dpo", records=manifest.record_count)
    aggregate = forge.aggregate_filter_stats(filter_stats)
    filter_rows = tuple(
        (
            dim,
            row["n"],
            row["prediction_accuracy"],
            row["mean_target_degradation"],
            row["mean_collateral_preservation"],
            row["keep_rate"],
        )
        for dim, row in sorted(aggregate.items())
    )
    return EvalReport(
        metadata=ctx.base_metadata(),
        tables={
            "manifest": ReportTable(
                columns=("key", "value"),
                rows=(
                    ("kind", manifest.kind),
                    ("records", manifest.record_count),
                    ("prompt_version", manifest.prompt_version),
                ),
            ),
            "corruption_filter": ReportTable(
                columns=(
                    "dimension",
                    "n",
                    "prediction_accuracy",
                    "mean_target_degradation",
                    "mean_collateral_preservation",
                    "keep_rate",
                ),
                rows=filter_rows,
            ),
        },
        details={"manifest": manifest.to_dict()},
    )


def cmd_calibrate(ctx: RunContext) -> EvalReport:
    config = ctx.config
    pairs_path = config.path("annotated_pairs")
    edges: list[cons.MatchEdge] = []
    with open(pairs_path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                edges.append(cons.MatchEdge.from_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError) as exc:
                raise IngestError(
                    f"{pairs_path}:{lineno}: malformed pair: {exc}"
                ) from None
    annotations = load_annotations(config.path("annotations"))
    by_pair = group_by_unit(
        a for a in annotations if a.match_label is not None
    )
    judged: list[cons.MatchEdge] = []
    for edge in edges:
        pair_id = f"{edge.left_unit_id}|{edge.right_unit_id}"
        labels = [a.match_label for a in by_pair.get(pair_id, [])]
        if not labels:
            raise PipelineError(
                f"calibrate: pair {pair_id} has no match annotations"
            )
        judged.append(
            cons.MatchEdge(
                left_unit_id=edge.left_unit_id,
                right_unit_id=edge.right_unit_id,
                pair_type=edge.pair_type,
                cosine=edge.cosine,
                judged=bool(majority_vote(labels)),
            )
        )
    threshold_rows = []
    rate_rows = []
    for pair_type in (cons.HUMAN_HUMAN, cons.HUMAN_MODEL):
        sample = [e for e in judged if e.pair_type == pair_type]
        if not sample:
            continue
        table = cons.build_stratum_table(sample)
        threshold = cons.calibrate_threshold(
            table, cutoff=config.thresholds.match_rate_cutoff
        )
        threshold_rows.append((pair_type, threshold))
        for row in table.rows:
            rate_rows.append(
                (
                    pair_type,
                    f"[{row.lower:g},{row.upper:g})",
                    ""
                    if row.annotated_match_rate is None
                    else row.annotated_match_rate,
                )
            )
        ctx.log("calibrate", pair_type=pair_type, threshold=threshold)
    if not threshold_rows:
        raise PipelineError("calibrate: no annotated pairs of any type")
    return EvalReport(
        metadata=ctx.base_metadata(),
        tables={
            "thresholds": ReportTable(
                columns=("pair_type", "threshold"), rows=tuple(threshold_rows)
            ),
            "match_rates": ReportTable(
                columns=("pair_type", "stratum", "match_rate"),
                rows=tuple(rate_rows),
            ),
        },
    )


def cmd_consensus_eval(ctx: RunContext) -> EvalReport:
    store = _load_store(ctx)
    config = ctx.config
    client = ctx.client()
    papers = store.papers(config.split)
    model_by_paper = load_model_units(
        config.path("model_feedback"), store.records
    )
    match_endpoint = config.endpoint("pair_match")
    embedding_endpoint = config.endpoint("embedding")

    per_paper_rows = []
    papers_data: list[cons.PaperMatchData] = []
    edge_dump: list[dict[str, Any]] = []
    consensus_detail: dict[str, Any] = {}
    excluded: list[str] = []
    for paper in papers:
        model_units = model_by_paper.get(paper.paper_id, [])
        if not model_units:
            excluded.append(paper.paper_id)
            ctx.log("skip_paper", paper_id=paper.paper_id, reason="no model feedback")
            continue
        human_units = [u for u in paper.units if u.source is Source.HUMAN]
        units_by_id = {u.id: u for u in human_units}
        human_emb = client.embed(
            embedding_endpoint, [u.text for u in human_units]
        )
        hh_edges = cons.prefilter_pairs(
            human_units,
            human_units,
            human_emb,
            human_emb,
            config.thresholds.human_human,
            cons.HUMAN_HUMAN,
        )
        hh_judged = cons.judge_edges(
            client, match_endpoint, hh_edges, units_by_id, paper.abstract
        )
        consensus = cons.build_consensus(
            paper.paper_id,
            human_units,
            hh_judged,
            require_partner_success=config.flags.require_partner_success,
        )
        edge_dump.extend(e.to_dict() for e in hh_judged)
        if not consensus.members:
            excluded.append(paper.paper_id)
            ctx.log("skip_paper", paper_id=paper.paper_id, reason="no consensus")
            continue
        members = [units_by_id[m] for m in sorted(consensus.members)]
        member_emb = client.embed(embedding_endpoint, [u.text for u in members])
        model_emb = client.embed(
            embedding_endpoint, [u.text for u in model_units]
        )
        hm_edges = cons.prefilter_pairs(
            members,
            model_units,
            member_emb,
            model_emb,
            config.thresholds.human_model,
            cons.HUMAN_MODEL,
        )
        all_units = {**units_by_id, **{u.id: u for u in model_units}}
        hm_judged = cons.judge_edges(
            client, match_endpoint, hm_edges, all_units, paper.abstract
        )
        edge_dump.extend(e.to_dict() for e in hm_judged)
        clusters = (
            cons.consensus_clusters(consensus, hh_judged)
            if config.flags.cluster_level
            else None
        )
        score = cons.score_model(
            consensus, model_units, hm_judged, clusters=clusters
        )
        per_paper_rows.append(
            (
                paper.paper_id,
                len(consensus.members),
                len(model_units),
                len(score.matched_model_units),
                len(score.matched_consensus_units),
                score.precision,
                score.recall,
                score.f1,
            )
        )
        papers_data.append(
            cons.paper_match_data(
                consensus, [u.id for u in model_units], hm_judged
            )
        )
        consensus_detail[paper.paper_id] = {
            "members": sorted(consensus.members),
            "matched_model_units": sorted(score.matched_model_units),
            "matched_consensus_units": sorted(score.matched_consensus_units),
        }
    if not papers_data:
        raise PipelineError(
            "consensus-eval: no paper has both consensus and model feedback"
        )
    ctx.write_jsonl("match_edges.jsonl", edge_dump)
    aggregate = cons.bootstrap_match_eval(
        papers_data,
        k=config.sampling.k,
        iterations=config.sampling.iterations,
        seed=config.sampling.seed,
        macro=config.flags.macro,
    )
    metadata = ctx.base_metadata()
    metadata.update(
        {
            "k": aggregate["k"],
            "iterations": aggregate["iterations"],
            "aggregation": aggregate["aggregation"],
            "papers_scored": aggregate["papers"],
            "papers_excluded": len(excluded),
            "cluster_level": config.flags.cluster_level,
        }
    )
    metric_rows = tuple(
        (
            name,
            aggregate[name]["mean"],
            aggregate[name]["ci_lower"],
            aggregate[name]["ci_upper"],
            aggregate[name]["ci_half_width"],
        )
        for name in ("precision", "recall", "f1")
    )
    return EvalReport(
        metadata=metadata,
        tables={
            "match_metrics": ReportTable(
                columns=("metric", "mean", "ci_lower", "ci_upper", "ci_half_width"),
                rows=metric_rows,
            ),
            "per_paper": ReportTable(
                columns=(
                    "paper_id",
                    "consensus_size",
                    "model_units",
                    "matched_model",
                    "matched_consensus",
                    "precision",
                    "recall",
                    "f1",
                ),
                rows=tuple(per_paper_rows),
            ),
        },
        details={
            "consensus": consensus_detail,
            "excluded_papers": sorted(excluded),
        },
    )


def cmd_success_eval(ctx: RunContext) -> EvalReport:
    store = _load_store(ctx)
    config = ctx.config
    client = ctx.client()
    papers = store.papers(config.split)
    model_by_paper = load_model_units(
        config.path("model_feedback"), store.records
    )
    quality_endpoint = config.endpoint("quality_score")
    predictor_endpoint = config.endpoint("response_predict")
    per_paper: dict[str, list[successeval.UnitEvaluation]] = {}
    for paper in papers:
        units = model_by_paper.get(paper.paper_id, [])
        if not units:
            continue
        per_paper[paper.paper_id] = [
            successeval.evaluate_unit(
                client,
                quality_endpoint,
                predictor_endpoint,
                unit,
                paper,
                config.thresholds.quality,
            )
            for unit in units
        ]
    if not per_paper:
        raise PipelineError("success-eval: no model feedback for this split")
    all_evals = [e for evals in per_paper.values() for e in evals]
    ctx.write_jsonl(
        "unit_evaluations.jsonl", [e.to_dict() for e in all_evals]
    )
    quality_filter = config.flags.quality_filter_in_proxy_modes
    aggregate = successeval.bootstrap_eval(
        per_paper,
        k=config.sampling.k,
        iterations=config.sampling.iterations,
        seed=config.sampling.seed,
        quality_filter=quality_filter,
    )
    rows = []
    for mode in successeval.SuccessMode:
        full = successeval.success_rate(
            all_evals,
            mode,
            quality_filter=True
            if mode is successeval.SuccessMode.COMBINED
            else quality_filter,
        )
        entry = aggregate[mode.value]
        rows.append(
            (
                mode.value,
                full,
                entry["mean"],
                entry["ci_lower"],
                entry["ci_upper"],
                entry["ci_half_width"],
            )
        )
    metadata = ctx.base_metadata()
    metadata.update(
        {
            "k": aggregate["k"],
            "iterations": aggregate["iterations"],
            "quality_filter_in_proxy_modes": quality_filter,
            "papers_scored": len(per_paper),
            "units_scored": len(all_evals),
        }
    )
    ctx.log("success_eval", papers=len(per_paper), units=len(all_evals))
    return EvalReport(
        metadata=metadata,
        tables={
            "success_rates": ReportTable(
                columns=(
                    "mode",
                    "full_set_rate",
                    "bootstrap_mean",
                    "ci_lower",
                    "ci_upper",
                    "ci_half_width",
                ),
                rows=tuple(rows),
            )
        },
    )


def cmd_report(ctx: RunContext) -> EvalReport:
    stored = ctx.artifacts / "eval_report.json"
    if not stored.exists():
        raise PipelineError(
            f"report: no stored report at {stored}; run a pipeline command "
            "with this config first"
        )
    report = EvalReport.from_dict(
        json.loads(stored.read_text(encoding="utf-8"))
    )
    ctx.render(report)
    return report


_HANDLERS: dict[str, Callable[[RunContext], EvalReport]] = {
    "ingest": cmd_ingest,
    "parse": cmd_parse,
    "forge-sft": cmd_forge_sft,
    "forge-dpo": cmd_forge_dpo,
    "calibrate": cmd_calibrate,
    "consensus-eval": cmd_consensus_eval,
    "success-eval": cmd_success_eval,
    "report": cmd_report,
}


def run(command: str, config: PipelineConfig) -> EvalReport:
    """Execute one pipeline command under its run directory."""
    if command not in _HANDLERS:
        raise ConfigError(
            f"unknown command {command!r}; expected one of {COMMANDS}"
        )
    with RunContext(config, command) as ctx:
        report = _HANDLERS[command](ctx)
        if command != "report":
            # The report command only re-renders; it must not disturb
            # the original run's log or stored report.
            ctx.finish(report)
        return report


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="feedbacklab",
        description=(
            "Pipelines for labeling reviewer feedback, forging preference "
            "data, and evaluating feedback generators."
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for command in COMMANDS:
        p = sub.add_parser(command)
        p.add_argument("--config", required=True, help="path to config JSON")
        p.add_argument(
            "--set",
            action="append",
            default=[],
            dest="overrides",
            metavar="KEY=VALUE",
            help="override a config field via dotted path",
        )
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        config = load_config(args.config, args.overrides)
        report = run(args.command, config)
    except FeedbackLabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except Exception:
        traceback.print_exc()
        return 3
    summary = report.metadata.get("config_hash", "")[:RUN_ID_CHARS]
    print(f"{args.command}: ok (run {summary})")
    return 0


if __name__ == "__main__":
    sys.exit(main())
