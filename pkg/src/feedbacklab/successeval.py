"""Success-rate proxy: quality filtering plus response prediction.

A generated unit counts as a success when it passes the quality filter
and the predicted author response satisfies the mode's conjunction
(validity, actionability, or both). Units failing the quality filter
stay in the denominator.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from enum import Enum
from typing import Any, Mapping, Sequence

import numpy as np

from .core import AuthorAction, FeedbackUnit, PaperRecord, Validity, is_actionable
from .errors import ConfigError, PipelineError
from .judge import EndpointConfig, JudgeClient
from .prompts import QUALITY_DIMENSIONS, QUALITY_SCORE, RESPONSE_PREDICT
from .stats import percentile_ci

FILTER_DIMENSIONS = (
    "accuracy",
    "paper_specific_grounding",
    "constructive_tone",
    "prioritisation",
)


class SuccessMode(str, Enum):
    COMBINED = "combined"
    VALIDITY_ONLY = "validity_only"
    ACTION_ONLY = "action_only"


@dataclass(frozen=True)
class QualityScores:
    """Integer Likert scores across the five quality dimensions."""

    accuracy: int
    prioritisation: int
    constructive_tone: int
    paper_specific_grounding: int
    actionability: int
    justifications: Mapping[str, str]

    def __post_init__(self) -> None:
        for dim in QUALITY_DIMENSIONS:
            value = getattr(self, dim)
            if not isinstance(value, int) or not 1 <= value <= 5:
                raise PipelineError(f"quality score {dim}={value!r} outside 1..5")
        object.__setattr__(self, "justifications", dict(self.justifications))

    def as_dict(self) -> dict[str, int]:
        return {dim: getattr(self, dim) for dim in QUALITY_DIMENSIONS}


@dataclass(frozen=True)
class QualityThresholds:
    """Minimum scores for the four filtering dimensions.

    Defaults are the published mean judge scores over the human
    reference feedback; actionability deliberately has no threshold.
    """

    accuracy: float = 4.37
    paper_specific_grounding: float = 4.36
    constructive_tone: float = 4.62
    prioritisation: float = 4.44

    def __post_init__(self) -> None:
        for dim in FILTER_DIMENSIONS:
            value = getattr(self, dim)
            if not 1.0 <= value <= 5.0:
                raise ConfigError(f"threshold {dim}={value} outside [1,5]")

    def as_dict(self) -> dict[str, float]:
        return {dim: getattr(self, dim) for dim in FILTER_DIMENSIONS}


@dataclass(frozen=True)
class PredictedResponse:
    unit_id: str
    predicted_validity: Validity
    predicted_action: AuthorAction
    predicted_response_text: str | None = None


def score_quality(
    client: JudgeClient,
    endpoint: EndpointConfig,
    unit: FeedbackUnit,
    paper: PaperRecord,
) -> QualityScores:
    """Five-dimension Likert scoring of one unit by the judge."""
    response = client.complete(
        endpoint,
        QUALITY_SCORE,
        {
            "title": paper.title,
            "abstract": paper.abstract,
            "feedback_text": unit.text,
        },
    )
    parsed = response.parsed
    return QualityScores(
        accuracy=parsed["accuracy"]["score"],
        prioritisation=parsed["prioritisation"]["score"],
        constructive_tone=parsed["constructive_tone"]["score"],
        paper_specific_grounding=parsed["paper_specific_grounding"]["score"],
        actionability=parsed["actionability"]["score"],
        justifications={
            dim: parsed[dim]["justification"] for dim in QUALITY_DIMENSIONS
        },
    )


def passes_quality(
    scores: QualityScores, thresholds: QualityThresholds
) -> bool:
    """True iff every filtering dimension meets its threshold."""
    return all(
        getattr(scores, dim) >= getattr(thresholds, dim)
        for dim in FILTER_DIMENSIONS
    )


def predict_response(
    client: JudgeClient,
    endpoint: EndpointConfig,
    unit: FeedbackUnit,
    paper: PaperRecord,
) -> PredictedResponse:
    """Predicted author reaction to one unit, via the predictor endpoint."""
    response = client.complete(
        endpoint,
        RESPONSE_PREDICT,
        {
            "title": paper.title,
            "abstract": paper.abstract,
            "feedback_text": unit.text,
        },
    )
    parsed = response.parsed
    return PredictedResponse(
        unit_id=unit.id,
        predicted_validity=Validity(parsed["validity"]),
        predicted_action=AuthorAction(parsed["author_action"]),
        predicted_response_text=parsed.get("response_text"),
    )


@dataclass(frozen=True)
class UnitEvaluation:
    """Everything success_rate needs to know about one unit."""

    unit_id: str
    paper_id: str
    passes_quality: bool
    predicted_validity: Validity
    predicted_action: AuthorAction

    def succeeds(
        self, mode: SuccessMode, quality_filter: bool = True
    ) -> bool:
        if quality_filter and not self.passes_quality:
            return False
        validity_ok = self.predicted_validity is Validity.AGREED
        action_ok = is_actionable(self.predicted_action)
        if mode is SuccessMode.COMBINED:
            return validity_ok and action_ok
        if mode is SuccessMode.VALIDITY_ONLY:
            return validity_ok
        return action_ok

    def to_dict(self) -> dict[str, Any]:
        return {
            "unit_id": self.unit_id,
            "paper_id": self.paper_id,
            "passes_quality": self.passes_quality,
            "predicted_validity": self.predicted_validity.value,
            "predicted_action": self.predicted_action.value,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "UnitEvaluation":
        return cls(
            unit_id=data["unit_id"],
            paper_id=data["paper_id"],
            passes_quality=data["passes_quality"],
            predicted_validity=Validity(data["predicted_validity"]),
            predicted_action=AuthorAction(data["predicted_action"]),
        )


def evaluate_unit(
    client: JudgeClient,
    scoring_endpoint: EndpointConfig,
    predictor_endpoint: EndpointConfig,
    unit: FeedbackUnit,
    paper: PaperRecord,
    thresholds: QualityThresholds,
) -> UnitEvaluation:
    scores = score_quality(client, scoring_endpoint, unit, paper)
    prediction = predict_response(client, predictor_endpoint, unit, paper)
    return UnitEvaluation(
        unit_id=unit.id,
        paper_id=paper.paper_id,
        passes_quality=passes_quality(scores, thresholds),
        predicted_validity=prediction.predicted_validity,
        predicted_action=prediction.predicted_action,
    )


def success_rate(
    evaluations: Sequence[UnitEvaluation],
    mode: SuccessMode | str,
    quality_filter: bool = True,
) -> float:
    """Fraction of units succeeding under the mode's conjunction.

    The quality filter applies in every mode by default (pass
    quality_filter=False for the unfiltered variant); filtered-out
    units remain in the denominator.
    """
    if not evaluations:
        raise PipelineError("success_rate: empty unit set")
    mode = SuccessMode(mode)
    hits = sum(1 for e in evaluations if e.succeeds(mode, quality_filter))
    return hits / len(evaluations)


def _paper_entropy(paper_id: str) -> int:
    digest = hashlib.sha256(paper_id.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def bootstrap_eval(
    per_paper: Mapping[str, Sequence[UnitEvaluation]],
    k: int = 5,
    iterations: int = 1000,
    seed: int = 0,
    quality_filter: bool = True,
) -> dict[str, Any]:
    """Bootstrap success rates: draw min(k, n) units per paper, pool.

    Within an iteration the drawn units pool across papers into one
    rate per mode; the report gives the mean and percentile 95% CI over
    iterations. Per-paper generators derive from (seed, paper_id), so
    paper order cannot change the draws.
    """
    if iterations < 2:
        raise PipelineError("bootstrap_eval: iterations must be >= 2")
    if k < 1:
        raise PipelineError("bootstrap_eval: k must be >= 1")
    if not per_paper:
        raise PipelineError("bootstrap_eval: no papers")
    modes = list(SuccessMode)
    b = iterations
    numer = {mode: np.zeros(b) for mode in modes}
    denom = np.zeros(b)
    for paper_id in sorted(per_paper):
        evaluations = per_paper[paper_id]
        if not evaluations:
            raise PipelineError(f"bootstrap_eval: paper {paper_id} has no units")
        n = len(evaluations)
        passes = {
            mode: np.array(
                [e.succeeds(mode, quality_filter) for e in evaluations],
                dtype=float,
            )
            for mode in modes
        }
        if n <= k:
            for mode in modes:
                numer[mode] += passes[mode].sum()
            denom += n
            continue
        rng = np.random.default_rng(
            np.random.SeedSequence([seed, _paper_entropy(paper_id)])
        )
        idx = np.argpartition(rng.random((b, n)), k - 1, axis=1)[:, :k]
        for mode in modes:
            numer[mode] += passes[mode][idx].sum(axis=1)
        denom += k

    out: dict[str, Any] = {
        "k": k,
        "iterations": iterations,
        "seed": seed,
        "quality_filter": quality_filter,
        "papers": len(per_paper),
    }
    for mode in modes:
        draws = numer[mode] / denom
        lower, upper = percentile_ci(draws)
        out[mode.value] = {
            "mean": float(draws.mean()),
            "ci_lower": lower,
            "ci_upper": upper,
            "ci_half_width": (upper - lower) / 2.0,
        }
    return out


def exhaustive_subset_expectation(
    evaluations: Sequence[UnitEvaluation],
    k: int,
    mode: SuccessMode,
    quality_filter: bool = True,
) -> tuple[int, int]:
    """Expected (pass sum over draws, draw size) for one paper.

    Averaging over all size-min(k,n) subsets, each unit appears with
    equal probability, so the expected drawn pass count is
    m * min(k,n) / n for m passing units; returned as an exact ratio
    times a common scale (numerator, denominator support exact
    cross-paper pooling by the caller).
    """
    n = len(evaluations)
    if n == 0:
        raise PipelineError("exhaustive_subset_expectation: no units")
    m = sum(1 for e in evaluations if e.succeeds(mode, quality_filter))
    size = min(k, n)
    # expected pass count = m*size/n, expressed as (m*size, n)
    return m * size, n
