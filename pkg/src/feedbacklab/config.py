"""Declarative pipeline configuration: one JSON file, dotted overrides.

Validation collects every problem before failing, and the config hash
covers the resolved semantic content (paths are resolved against the
config file's directory first, so spelling a path differently does not
mint a new run directory).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping, Sequence

from .core import canonical_json
from .errors import ConfigError
from .judge import EndpointConfig
from .successeval import QualityThresholds

JUDGE_TASKS = (
    "thread_parse",
    "corruption",
    "corruption_verify",
    "pair_match",
    "quality_score",
    "response_predict",
    "embedding",
)

MODES = ("stub", "live")


@dataclass(frozen=True)
class Thresholds:
    dedup: float = 0.5
    human_human: float = 0.55
    human_model: float = 0.45
    delta: int = 2
    match_rate_cutoff: float = 0.1
    weight_sum_tolerance: float = 0.005
    quality: QualityThresholds = field(default_factory=QualityThresholds)

    def validate(self, errors: list[str]) -> None:
        for name in ("dedup", "human_human", "human_model"):
            value = getattr(self, name)
            if not -1.0 <= value <= 1.0:
                errors.append(f"thresholds.{name}={value} outside [-1,1]")
        if self.delta < 1:
            errors.append(f"thresholds.delta={self.delta} must be >= 1")
        if not 0.0 < self.match_rate_cutoff <= 1.0:
            errors.append(
                f"thresholds.match_rate_cutoff={self.match_rate_cutoff} "
                "outside (0,1]"
            )
        if self.weight_sum_tolerance < 0:
            errors.append("thresholds.weight_sum_tolerance must be >= 0")


@dataclass(frozen=True)
class Sampling:
    k: int = 5
    iterations: int = 1000
    seed: int = 0
    pairs_per_paper: int = 1
    corruption_pairs_per_paper: int = 1
    max_corruption_units_per_paper: int = 1

    def validate(self, errors: list[str]) -> None:
        if self.k < 1:
            errors.append(f"sampling.k={self.k} must be >= 1")
        if self.iterations < 2:
            errors.append(
                f"sampling.iterations={self.iterations} must be >= 2"
            )
        for name in (
            "pairs_per_paper",
            "corruption_pairs_per_paper",
            "max_corruption_units_per_paper",
        ):
            if getattr(self, name) < 0:
                errors.append(f"sampling.{name} must be >= 0")


@dataclass(frozen=True)
class PathsConfig:
    corpus_root: str = ""
    runs_root: str = "runs"
    model_feedback: str = ""
    annotations: str = ""
    annotated_pairs: str = ""
    baseline_report: str = ""

    def resolved(self, base: Path) -> dict[str, str]:
        out = {}
        for f in fields(self):
            raw = getattr(self, f.name)
            out[f.name] = str((base / raw).resolve()) if raw else ""
        return out


@dataclass(frozen=True)
class Flags:
    macro: bool = False
    cluster_level: bool = False
    require_partner_success: bool = False
    chosen_successful_only: bool = False
    quality_filter_in_proxy_modes: bool = True

    def validate(self, errors: list[str]) -> None:
        for f in fields(self):
            if not isinstance(getattr(self, f.name), bool):
                errors.append(f"flags.{f.name} must be a boolean")


@dataclass(frozen=True)
class PipelineConfig:
    mode: str = "stub"
    split: str = "test"
    stub_fixture: str = ""
    base_dir: Path = Path(".")
    endpoints: Mapping[str, EndpointConfig] = field(default_factory=dict)
    thresholds: Thresholds = field(default_factory=Thresholds)
    sampling: Sampling = field(default_factory=Sampling)
    paths: PathsConfig = field(default_factory=PathsConfig)
    flags: Flags = field(default_factory=Flags)

    def endpoint(self, task: str) -> EndpointConfig:
        if task not in JUDGE_TASKS:
            raise ConfigError(f"unknown judge task {task!r}")
        return self.endpoints.get(task, EndpointConfig())

    def resolved_paths(self) -> dict[str, str]:
        return self.paths.resolved(self.base_dir)

    def path(self, name: str) -> Path:
        raw = self.resolved_paths()[name]
        if not raw:
            raise ConfigError(f"paths.{name} is required but not configured")
        return Path(raw)

    def stub_fixture_path(self) -> Path | None:
        if not self.stub_fixture:
            return None
        return (self.base_dir / self.stub_fixture).resolve()

    def as_dict(self) -> dict[str, Any]:
        """Semantic content only; used for hashing and display."""
        endpoints = {}
        for task in sorted(self.endpoints):
            e = self.endpoints[task]
            endpoints[task] = {
                "base_url": e.base_url,
                "model_name": e.model_name,
                "api_key_env": e.api_key_env,
                "max_output_tokens": e.max_output_tokens,
                "temperature": e.temperature,
                "extra_params": dict(e.extra_params),
                "requests_per_minute": e.requests_per_minute,
                "max_concurrency": e.max_concurrency,
            }
        fixture = self.stub_fixture_path()
        return {
            "mode": self.mode,
            "split": self.split,
            "stub_fixture": str(fixture) if fixture else "",
            "endpoints": endpoints,
            "thresholds": {
                "dedup": self.thresholds.dedup,
                "human_human": self.thresholds.human_human,
                "human_model": self.thresholds.human_model,
                "delta": self.thresholds.delta,
                "match_rate_cutoff": self.thresholds.match_rate_cutoff,
                "weight_sum_tolerance": self.thresholds.weight_sum_tolerance,
                "quality": self.thresholds.quality.as_dict(),
            },
            "sampling": {
                f.name: getattr(self.sampling, f.name)
                for f in fields(self.sampling)
            },
            "paths": self.resolved_paths(),
            "flags": {
                f.name: getattr(self.flags, f.name) for f in fields(self.flags)
            },
        }


def config_hash(config: PipelineConfig) -> str:
    material = canonical_json(config.as_dict())
    return hashlib.sha256(material.encode("utf-8")).hexdigest()


def _apply_override(data: dict[str, Any], spec: str, errors: list[str]) -> None:
    if "=" not in spec:
        errors.append(f"override {spec!r} is not KEY=VALUE")
        return
    key, _, raw = spec.partition("=")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = data
    parts = key.split(".")
    for part in parts[:-1]:
        nxt = node.setdefault(part, {})
        if not isinstance(nxt, dict):
            errors.append(f"override {key!r}: {part!r} is not an object")
            return
        node = nxt
    node[parts[-1]] = value


def _build_section(cls, data: Mapping[str, Any], name: str, errors: list[str]):
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    for key in sorted(unknown):
        errors.append(f"{name}.{key} is not a recognized setting")
    kwargs = {k: v for k, v in data.items() if k in known}
    try:
        return cls(**kwargs)
    except (ConfigError, TypeError, ValueError) as exc:
        errors.append(f"{name}: {exc}")
        return cls()


def parse_config(
    data: Mapping[str, Any],
    base_dir: Path,
    overrides: Sequence[str] = (),
) -> PipelineConfig:
    """Build and validate a config, reporting all problems at once."""
    errors: list[str] = []
    merged: dict[str, Any] = json.loads(json.dumps(dict(data)))
    for spec in overrides:
        _apply_override(merged, spec, errors)

    known_top = {
        "mode",
        "split",
        "stub_fixture",
        "endpoints",
        "thresholds",
        "sampling",
        "paths",
        "flags",
    }
    for key in sorted(set(merged) - known_top):
        errors.append(f"unknown config key {key!r}")

    mode = merged.get("mode", "stub")
    if mode not in MODES:
        errors.append(f"mode={mode!r} must be one of {MODES}")

    endpoints: dict[str, EndpointConfig] = {}
    for task, spec in merged.get("endpoints", {}).items():
        if task not in JUDGE_TASKS:
            errors.append(
                f"endpoints.{task} is not a judge task (expected one of "
                f"{', '.join(JUDGE_TASKS)})"
            )
            continue
        try:
            endpoints[task] = EndpointConfig(**spec)
        except (ConfigError, TypeError) as exc:
            errors.append(f"endpoints.{task}: {exc}")
    if mode == "live":
        for task in JUDGE_TASKS:
            endpoint = endpoints.get(task)
            if endpoint is None or not endpoint.base_url:
                errors.append(
                    f"live mode: judge task {task!r} has no endpoint base_url"
                )

    thresholds_data = dict(merged.get("thresholds", {}))
    quality_data = thresholds_data.pop("quality", {})
    thresholds = _build_section(
        Thresholds,
        {
            **thresholds_data,
            **(
                {"quality": _build_section(
                    QualityThresholds, quality_data, "thresholds.quality", errors
                )}
                if quality_data
                else {}
            ),
        },
        "thresholds",
        errors,
    )
    sampling = _build_section(
        Sampling, merged.get("sampling", {}), "sampling", errors
    )
    paths = _build_section(PathsConfig, merged.get("paths", {}), "paths", errors)
    flags = _build_section(Flags, merged.get("flags", {}), "flags", errors)

    thresholds.validate(errors)
    sampling.validate(errors)
    flags.validate(errors)

    stub_fixture = merged.get("stub_fixture", "")
    if mode == "stub" and stub_fixture:
        fixture_path = (base_dir / stub_fixture).resolve()
        if not fixture_path.exists():
            errors.append(f"stub_fixture {fixture_path} does not exist")

    if errors:
        raise ConfigError(
            "configuration invalid:\n" + "\n".join(f"  - {e}" for e in errors)
        )
    return PipelineConfig(
        mode=mode,
        split=merged.get("split", "test"),
        stub_fixture=stub_fixture,
        base_dir=base_dir,
        endpoints=endpoints,
        thresholds=thresholds,
        sampling=sampling,
        paths=paths,
        flags=flags,
    )


def load_config(
    path: str | Path, overrides: Sequence[str] = ()
) -> PipelineConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must be a JSON object")
    return parse_config(data, base_dir=path.parent.resolve(), overrides=overrides)
