"""Per-object depths, outlier filtering and scene aggregation."""

from __future__ import annotations

import logging
import math
import statistics
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Iterable, Sequence

from .errors import EmptyInputError, ObservationParseError, VlmError
from .kg import KnowledgeGraph, MatchResult, canonicalize, lookup_height, match_entity
from .vlm import (
    BackendConfig,
    ImagePayload,
    PromptSpec,
    SceneObservation,
    parse_baseline,
    parse_observation,
    request_observation,
)

logger = logging.getLogger(__name__)

# one re-request after a parse/schema failure
PARSE_ATTEMPTS = 2


class HeightSource(str, Enum):
    KG = "kg"
    PROVISIONAL = "provisional"


class ExclusionReason(str, Enum):
    FULLY_SUBMERGED = "fully_submerged"
    MAD_OUTLIER = "mad_outlier"


@dataclass(frozen=True)
class GroundedObject:
    raw_label: str
    match: MatchResult | None
    resolved_height_cm: float
    height_source: HeightSource
    submerged_ratio: float
    depth_cm: float
    provisional_height_cm: float
    height_std_cm: float | None = None
    index: int = 0


@dataclass(frozen=True)
class PendingEvent:
    label: str
    height_cm: float


@dataclass(frozen=True)
class FilterPolicy:
    full_submergence_threshold: float = 0.95
    mad_k: float = 2.5
    mad_scale: float = 1.4826
    min_n_for_mad: int = 3

    def __post_init__(self):
        if not 0 < self.full_submergence_threshold <= 1:
            raise ValueError(f"full_submergence_threshold must be in (0, 1], got {self.full_submergence_threshold}")
        if not self.mad_k > 0:
            raise ValueError(f"mad_k must be > 0, got {self.mad_k}")
        if not self.mad_scale > 0:
            raise ValueError(f"mad_scale must be > 0, got {self.mad_scale}")
        if self.min_n_for_mad < 1:
            raise ValueError(f"min_n_for_mad must be >= 1, got {self.min_n_for_mad}")

    @classmethod
    def from_dict(cls, d: dict) -> "FilterPolicy":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown filter key(s): {', '.join(sorted('filter.' + k for k in unknown))}")
        return cls(**d)

    def to_dict(self) -> dict:
        return {
            "full_submergence_threshold": self.full_submergence_threshold,
            "mad_k": self.mad_k,
            "mad_scale": self.mad_scale,
            "min_n_for_mad": self.min_n_for_mad,
        }


@dataclass(frozen=True)
class SceneDepthEstimate:
    retained: tuple[GroundedObject, ...]
    excluded: tuple[tuple[GroundedObject, ExclusionReason], ...]
    depth_min_cm: float
    depth_avg_cm: float
    depth_max_cm: float

    @property
    def n_used(self) -> int:
        return len(self.retained)


def ground_objects(
    kg: KnowledgeGraph | None, obs: SceneObservation
) -> tuple[list[GroundedObject], list[PendingEvent]]:
    """Resolve each observed object's height, KG value first.

    With ``kg=None`` matching is disabled and every object keeps the model's
    provisional height (the ungrounded baseline); no pending events are emitted.
    """
    grounded: list[GroundedObject] = []
    pending: list[PendingEvent] = []
    for i, o in enumerate(obs.objects):
        m = match_entity(kg, o.raw_label) if kg is not None else None
        if m is not None:
            height, std = lookup_height(kg, m.entity)
            source = HeightSource.KG
        else:
            height, std = o.provisional_height_cm, None
            source = HeightSource.PROVISIONAL
            if kg is not None and canonicalize(o.raw_label, kg.qualifier_lexicon):
                pending.append(PendingEvent(o.raw_label, o.provisional_height_cm))
        grounded.append(
            GroundedObject(
                raw_label=o.raw_label,
                match=m,
                resolved_height_cm=height,
                height_source=source,
                submerged_ratio=o.submerged_ratio,
                depth_cm=o.submerged_ratio * height,
                provisional_height_cm=o.provisional_height_cm,
                height_std_cm=std,
                index=i,
            )
        )
    return grounded, pending


def _mad_outliers(depths: Sequence[float], policy: FilterPolicy) -> list[bool]:
    m = statistics.median(depths)
    mad = policy.mad_scale * statistics.median([abs(d - m) for d in depths])
    if mad > 0:
        limit = policy.mad_k * mad
        return [abs(d - m) > limit for d in depths]
    return [d != m for d in depths]


def filter_outliers(
    objects: Sequence[GroundedObject], policy: FilterPolicy = FilterPolicy()
) -> tuple[list[GroundedObject], list[tuple[GroundedObject, ExclusionReason]]]:
    """Drop fully submerged references, then median-absolute-deviation outliers.

    The MAD pass is repeated on the survivors until it excludes nothing, so the
    result is a fixed point: filtering the retained set again changes nothing.
    Neither pass ever removes every object; when it would, it removes none.
    Input order is preserved in both output lists.
    """
    if not objects:
        raise EmptyInputError("filter_outliers needs at least one object")
    excluded: list[tuple[GroundedObject, ExclusionReason]] = []

    submerged = [o.submerged_ratio >= policy.full_submergence_threshold for o in objects]
    if all(submerged):
        survivors = list(objects)
    else:
        survivors = [o for o, s in zip(objects, submerged) if not s]
        excluded += [(o, ExclusionReason.FULLY_SUBMERGED) for o, s in zip(objects, submerged) if s]

    while len(survivors) >= policy.min_n_for_mad:
        flags = _mad_outliers([o.depth_cm for o in survivors], policy)
        if not any(flags) or all(flags):
            break
        excluded += [(o, ExclusionReason.MAD_OUTLIER) for o, f in zip(survivors, flags) if f]
        survivors = [o for o, f in zip(survivors, flags) if not f]

    position = {id(o): i for i, o in enumerate(objects)}
    excluded.sort(key=lambda pair: position[id(pair[0])])
    return survivors, excluded


def aggregate(
    retained: Sequence[GroundedObject],
    excluded: Iterable[tuple[GroundedObject, ExclusionReason]] = (),
) -> SceneDepthEstimate:
    if not retained:
        raise EmptyInputError("aggregate needs at least one retained object")
    depths = [o.depth_cm for o in retained]
    lo, hi = min(depths), max(depths)
    # fsum keeps the mean order-independent; the clamp absorbs the final rounding
    avg = min(max(math.fsum(depths) / len(depths), lo), hi)
    return SceneDepthEstimate(tuple(retained), tuple(excluded), lo, avg, hi)


# ---------------------------------------------------------------------------
# orchestration


class OutcomeStatus(str, Enum):
    ESTIMATE = "estimate"
    NO_ESTIMATE = "no_estimate"
    FAILURE = "failure"


@dataclass(frozen=True)
class SceneOutcome:
    image: str
    status: OutcomeStatus
    estimate: SceneDepthEstimate | None = None
    grounded: tuple[GroundedObject, ...] = ()
    pending: tuple[PendingEvent, ...] = ()
    reason: str | None = None
    error: str | None = None
    error_type: str | None = None
    raw_response: str | None = None
    warnings: tuple[str, ...] = ()
    requests: int = 0


Requester = Callable[[BackendConfig, ImagePayload, PromptSpec], str]


def _observe(config, image, prompt, requester, parse):
    """Request + parse with one re-request on parse failure.

    Returns (parsed, raw, n_requests) or raises the last error with the raw
    reply attached as ``exc.raw_response``.
    """
    raw = None
    for attempt in range(1, PARSE_ATTEMPTS + 1):
        raw = requester(config, image, prompt)
        try:
            return parse(raw), raw, attempt
        except ObservationParseError as exc:
            logger.warning("%s: unparseable reply (attempt %d/%d): %s", image.source_path, attempt, PARSE_ATTEMPTS, exc)
            exc.raw_response = raw
            exc.requests = attempt
            if attempt == PARSE_ATTEMPTS:
                raise


def estimate_scene(
    kg: KnowledgeGraph | None,
    config: BackendConfig,
    image: ImagePayload,
    prompt: PromptSpec,
    policy: FilterPolicy = FilterPolicy(),
    *,
    requester: Requester = request_observation,
) -> SceneOutcome:
    """Run one image through request, parse, ground, filter and aggregate."""
    name = image.source_path
    try:
        obs, raw, n = _observe(
            config, image, prompt, requester,
            lambda r: parse_observation(r, config.model_id, prompt.max_objects),
        )
    except ObservationParseError as exc:
        return SceneOutcome(
            name, OutcomeStatus.FAILURE, error=str(exc), error_type=type(exc).__name__,
            raw_response=getattr(exc, "raw_response", None), requests=getattr(exc, "requests", PARSE_ATTEMPTS),
        )
    except VlmError as exc:
        return SceneOutcome(name, OutcomeStatus.FAILURE, error=str(exc), error_type=type(exc).__name__)

    if not obs.objects:
        return SceneOutcome(
            name, OutcomeStatus.NO_ESTIMATE, reason="no reference objects",
            raw_response=raw, warnings=obs.warnings, requests=n,
        )
    grounded, pending = ground_objects(kg, obs)
    retained, excluded = filter_outliers(grounded, policy)
    if not retained:  # unreachable while both filter guards hold
        return SceneOutcome(
            name, OutcomeStatus.NO_ESTIMATE, grounded=tuple(grounded), pending=tuple(pending),
            reason="no objects retained", raw_response=raw, warnings=obs.warnings, requests=n,
        )
    return SceneOutcome(
        name, OutcomeStatus.ESTIMATE, estimate=aggregate(retained, excluded),
        grounded=tuple(grounded), pending=tuple(pending), raw_response=raw,
        warnings=obs.warnings, requests=n,
    )


@dataclass(frozen=True)
class BaselineOutcome:
    image: str
    status: OutcomeStatus
    depth_cm: float | None = None
    error: str | None = None
    error_type: str | None = None
    raw_response: str | None = None


def estimate_baseline(
    config: BackendConfig,
    image: ImagePayload,
    prompt: PromptSpec,
    *,
    requester: Requester = request_observation,
) -> BaselineOutcome:
    """Knowledge-free single-depth estimate used as the comparison baseline."""
    try:
        depth, raw, _ = _observe(config, image, prompt, requester, parse_baseline)
    except ObservationParseError as exc:
        return BaselineOutcome(image.source_path, OutcomeStatus.FAILURE, error=str(exc),
                               error_type=type(exc).__name__, raw_response=getattr(exc, "raw_response", None))
    except VlmError as exc:
        return BaselineOutcome(image.source_path, OutcomeStatus.FAILURE, error=str(exc), error_type=type(exc).__name__)
    return BaselineOutcome(image.source_path, OutcomeStatus.ESTIMATE, depth_cm=depth, raw_response=raw)


# ---------------------------------------------------------------------------
# result serialization


def _object_doc(o: GroundedObject, reason: ExclusionReason | None) -> dict:
    return {
        "label": o.raw_label,
        "entity": o.match.entity if o.match else None,
        "match_tier": o.match.tier.label if o.match else None,
        "height_source": o.height_source.value,
        "height_cm": o.resolved_height_cm,
        "height_std_cm": o.height_std_cm,
        "provisional_height_cm": o.provisional_height_cm,
        "ratio": o.submerged_ratio,
        "depth_cm": o.depth_cm,
        "excluded": reason is not None,
        "exclusion_reason": reason.value if reason else None,
    }


def outcome_to_dict(outcome: SceneOutcome) -> dict:
    est = outcome.estimate
    reasons = {o.index: r for o, r in est.excluded} if est else {}
    doc = {
        "image": outcome.image,
        "status": outcome.status.value,
        "depth_min_cm": est.depth_min_cm if est else None,
        "depth_avg_cm": est.depth_avg_cm if est else None,
        "depth_max_cm": est.depth_max_cm if est else None,
        "n_used": est.n_used if est else 0,
        "objects": [_object_doc(o, reasons.get(o.index)) for o in outcome.grounded],
        "pending_entries": [{"label": p.label, "height_cm": p.height_cm} for p in outcome.pending],
        "warnings": list(outcome.warnings),
    }
    if outcome.status is OutcomeStatus.NO_ESTIMATE:
        doc["reason"] = outcome.reason
    if outcome.status is OutcomeStatus.FAILURE:
        doc["error"] = outcome.error
        doc["error_type"] = outcome.error_type
        doc["raw_response"] = outcome.raw_response
    return doc


def baseline_to_dict(outcome: BaselineOutcome) -> dict:
    doc = {"image": outcome.image, "status": outcome.status.value, "depth_cm": outcome.depth_cm}
    if outcome.status is OutcomeStatus.FAILURE:
        doc["error"] = outcome.error
        doc["error_type"] = outcome.error_type
        doc["raw_response"] = outcome.raw_response
    return doc
