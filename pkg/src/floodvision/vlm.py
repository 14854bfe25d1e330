"""Prompting a vision-language model and parsing its structured reply."""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import math
import os
import re
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Callable

import httpx

from .errors import (
    BackendTimeoutError,
    ConfigError,
    HttpStatusError,
    ImagePayloadError,
    MissingFixtureError,
    ObservationParseError,
    SchemaViolationError,
    TransportError,
)

logger = logging.getLogger(__name__)

API_KEY_ENV = "FLOODVISION_API_KEY"
MAX_OBJECTS = 3

_OBJECT_FIELDS = ("label", "height_cm", "submerged_ratio", "rationale")

RESPONSE_SCHEMA: dict[str, Any] = {
    "type": "object",
    "additionalProperties": False,
    "required": ["objects"],
    "properties": {
        "objects": {
            "type": "array",
            "maxItems": MAX_OBJECTS,
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": list(_OBJECT_FIELDS),
                "properties": {
                    "label": {"type": "string", "minLength": 1},
                    "height_cm": {"type": "number", "exclusiveMinimum": 0},
                    "submerged_ratio": {"type": "number", "minimum": 0.0, "maximum": 1.0},
                    "rationale": {"type": "string"},
                },
            },
        }
    },
}

BASELINE_SCHEMA: dict[str, Any] = {
    "type": "object",
    "additionalProperties": False,
    "required": ["depth_cm"],
    "properties": {"depth_cm": {"type": "number", "minimum": 0}},
}

SYSTEM_FRAMING = (
    "You are a customized flood analysis assistant. You estimate floodwater depth "
    "in street-level photographs by reasoning about partially submerged reference "
    "objects of known real-world size."
)

_STEPS = """\
Work through the following three steps for the attached image.

Step 1: Object identification.
Select up to {n} visually distinct reference objects that touch the water surface \
and whose real-world height is well known. Prefer, in order: vehicle parts (tires, \
bumpers, doors), whole vehicles, people and body landmarks (ankle, knee, waist), then \
street infrastructure (curbs, fire hydrants, trash cans, bollards, mailboxes). Name each \
object with a short generic noun phrase. When several similar instances are visible, \
disambiguate them with positional or visual qualifiers, for example "rear SUV tire", \
"front left sedan tire" or "nearest fire hydrant". Skip objects that are occluded, \
floating, or whose base cannot be located.

Step 2: Measurement estimation.
For each selected object give (a) its provisional real-world height in centimeters, \
measured from the ground to its top, and (b) its submerged ratio: the fraction of that \
height that lies below the waterline, a number from 0.0 (dry) to 1.0 (fully submerged). \
Use visual anchors such as where the waterline crosses the object, hub caps, door \
sills, or the curb edge. Do not guess water depth directly; estimate the ratio.

Step 3: Structured output.
Reply with a single JSON object and nothing else. It must conform exactly to this \
JSON schema (no extra keys; use an empty "objects" list when no usable reference \
object is visible):
"""

_BASELINE_STEPS = """\
Estimate the floodwater depth at the deepest clearly visible point of the street in \
the attached image, in centimeters. Reply with a single JSON object and nothing else, \
conforming exactly to this JSON schema:
"""


class PromptKind(str, Enum):
    OBJECTS = "objects"
    BASELINE = "baseline"


@dataclass(frozen=True)
class PromptSpec:
    system_framing: str
    step_instructions: str
    max_objects: int
    response_schema_text: str
    kind: PromptKind = PromptKind.OBJECTS

    @property
    def user_text(self) -> str:
        return self.step_instructions + self.response_schema_text


def _schema_text(schema: dict) -> str:
    return json.dumps(schema, indent=2, sort_keys=True)


def build_prompt(max_objects: int = MAX_OBJECTS) -> PromptSpec:
    """Image-agnostic three-step prompt asking for reference objects and ratios."""
    if max_objects < 1:
        raise ValueError("max_objects must be >= 1")
    schema = json.loads(json.dumps(RESPONSE_SCHEMA))
    schema["properties"]["objects"]["maxItems"] = max_objects
    return PromptSpec(
        system_framing=SYSTEM_FRAMING,
        step_instructions=_STEPS.format(n=max_objects),
        max_objects=max_objects,
        response_schema_text=_schema_text(schema),
    )


def build_baseline_prompt() -> PromptSpec:
    """Knowledge-free prompt asking directly for one scene depth (comparison baseline)."""
    return PromptSpec(
        system_framing=SYSTEM_FRAMING,
        step_instructions=_BASELINE_STEPS,
        max_objects=0,
        response_schema_text=_schema_text(BASELINE_SCHEMA),
        kind=PromptKind.BASELINE,
    )


# ---------------------------------------------------------------------------
# images

_MAGIC = {
    "jpeg": (b"\xff\xd8\xff",),
    "png": (b"\x89PNG\r\n\x1a\n",),
}


def sniff_media_type(data: bytes) -> str | None:
    for media, prefixes in _MAGIC.items():
        if any(data.startswith(p) for p in prefixes):
            return media
    return None


@dataclass(frozen=True)
class ImagePayload:
    data: bytes = field(repr=False)
    media_type: str
    source_path: str = ""

    def __post_init__(self):
        if not self.data:
            raise ImagePayloadError(f"{self.source_path or '<bytes>'}: image is empty")
        if self.media_type not in _MAGIC:
            raise ImagePayloadError(f"{self.source_path or '<bytes>'}: unsupported media type {self.media_type!r}")
        sniffed = sniff_media_type(self.data)
        if sniffed != self.media_type:
            raise ImagePayloadError(
                f"{self.source_path or '<bytes>'}: declared {self.media_type} but content looks like {sniffed or 'unknown'}"
            )

    @classmethod
    def from_path(cls, path: str | os.PathLike) -> "ImagePayload":
        path = Path(path)
        data = path.read_bytes()
        media = sniff_media_type(data)
        if media is None:
            raise ImagePayloadError(f"{path}: not a JPEG or PNG image")
        return cls(data, media, str(path))

    @property
    def sha256(self) -> str:
        return hashlib.sha256(self.data).hexdigest()

    @property
    def mime(self) -> str:
        return f"image/{self.media_type}"

    def data_url(self) -> str:
        return f"data:{self.mime};base64,{base64.b64encode(self.data).decode('ascii')}"


# ---------------------------------------------------------------------------
# backends


class BackendKind(str, Enum):
    HTTP = "http"
    MOCK = "mock"


@dataclass(frozen=True)
class BackendConfig:
    kind: BackendKind = BackendKind.MOCK
    base_url: str = ""
    model_name: str = ""
    timeout_s: float = 60.0
    max_retries: int = 2
    fixture_dir: str = ""
    parallelism: int = 4
    backoff_base_s: float = 1.0

    def __post_init__(self):
        if self.max_retries < 0:
            raise ConfigError(f"backend.max_retries must be >= 0, got {self.max_retries}")
        if not self.timeout_s > 0:
            raise ConfigError(f"backend.timeout_s must be > 0, got {self.timeout_s}")
        if self.parallelism < 1:
            raise ConfigError(f"backend.parallelism must be >= 1, got {self.parallelism}")
        if self.kind is BackendKind.HTTP and not (self.base_url and self.model_name):
            raise ConfigError("backend.base_url and backend.model_name are required for kind=http")
        if self.kind is BackendKind.MOCK and not self.fixture_dir:
            raise ConfigError("backend.fixture_dir is required for kind=mock")

    @classmethod
    def from_dict(cls, d: dict) -> "BackendConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown backend key(s): {', '.join(sorted('backend.' + k for k in unknown))}")
        d = dict(d)
        try:
            d["kind"] = BackendKind(d.get("kind", "mock"))
        except ValueError:
            raise ConfigError(f"backend.kind must be 'http' or 'mock', got {d.get('kind')!r}") from None
        return cls(**d)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "base_url": self.base_url,
            "model_name": self.model_name,
            "timeout_s": self.timeout_s,
            "max_retries": self.max_retries,
            "fixture_dir": self.fixture_dir,
            "backoff_base_s": self.backoff_base_s,
        }

    @property
    def model_id(self) -> str:
        return self.model_name if self.kind is BackendKind.HTTP else "mock"


def _mock_reply(config: BackendConfig, image: ImagePayload) -> str:
    root = Path(config.fixture_dir)
    probes = [root / f"{image.sha256}.json"]
    if image.source_path:
        probes.append(root / f"{os.path.basename(image.source_path)}.json")
    for p in probes:
        if p.is_file():
            return p.read_text(encoding="utf-8")
    raise MissingFixtureError(probes)


def _chat_body(config: BackendConfig, image: ImagePayload, prompt: PromptSpec) -> dict:
    return {
        "model": config.model_name,
        "temperature": 0,
        "messages": [
            {"role": "system", "content": prompt.system_framing},
            {
                "role": "user",
                "content": [
                    {"type": "text", "text": prompt.user_text},
                    {"type": "image_url", "image_url": {"url": image.data_url()}},
                ],
            },
        ],
    }


def _assistant_text(resp: httpx.Response) -> str:
    try:
        content = resp.json()["choices"][0]["message"]["content"]
    except (ValueError, KeyError, IndexError, TypeError) as exc:
        raise HttpStatusError(resp.status_code, f"unexpected response shape: {resp.text[:500]}") from exc
    if isinstance(content, list):
        content = "".join(part.get("text", "") for part in content if isinstance(part, dict))
    if not isinstance(content, str):
        raise HttpStatusError(resp.status_code, f"assistant content is not text: {content!r}")
    return content


def _retryable(status: int) -> bool:
    return status == 429 or status >= 500


def request_observation(
    config: BackendConfig,
    image: ImagePayload,
    prompt: PromptSpec,
    *,
    client: httpx.Client | None = None,
    api_key: str | None = None,
    sleep: Callable[[float], None] = time.sleep,
) -> str:
    """Send one image + prompt to the configured backend and return the reply text.

    The HTTP backend makes at most ``1 + max_retries`` attempts, sleeping
    ``backoff_base_s * 2**k`` between them. Connection errors, timeouts, 429
    and 5xx responses are retried; other non-2xx statuses fail immediately.
    """
    if config.kind is BackendKind.MOCK:
        return _mock_reply(config, image)

    key = api_key if api_key is not None else os.environ.get(API_KEY_ENV)
    if not key:
        raise ConfigError(f"environment variable {API_KEY_ENV} is not set")
    url = config.base_url.rstrip("/") + "/chat/completions"
    headers = {"Authorization": f"Bearer {key}"}
    body = _chat_body(config, image, prompt)

    owns_client = client is None
    if owns_client:
        client = httpx.Client(timeout=config.timeout_s)
    attempts = 1 + config.max_retries
    last: Exception | None = None
    try:
        for attempt in range(attempts):
            if attempt:
                sleep(config.backoff_base_s * 2 ** (attempt - 1))
            try:
                resp = client.post(url, json=body, headers=headers, timeout=config.timeout_s)
            except httpx.TimeoutException as exc:
                last = BackendTimeoutError(f"timeout calling {url}: {exc}", attempt + 1)
                logger.warning("attempt %d/%d timed out: %s", attempt + 1, attempts, exc)
                continue
            except httpx.TransportError as exc:
                last = TransportError(f"transport error calling {url}: {exc}", attempt + 1)
                logger.warning("attempt %d/%d failed: %s", attempt + 1, attempts, exc)
                continue
            if resp.is_success:
                return _assistant_text(resp)
            if not _retryable(resp.status_code):
                raise HttpStatusError(resp.status_code, resp.text, attempt + 1)
            last = HttpStatusError(resp.status_code, resp.text, attempt + 1)
            logger.warning("attempt %d/%d got HTTP %d", attempt + 1, attempts, resp.status_code)
    finally:
        if owns_client:
            client.close()
    assert last is not None
    raise last


# ---------------------------------------------------------------------------
# reply parsing


@dataclass(frozen=True)
class ObjectObservation:
    raw_label: str
    provisional_height_cm: float
    submerged_ratio: float
    rationale: str = ""


@dataclass(frozen=True)
class SceneObservation:
    objects: tuple[ObjectObservation, ...]
    model_id: str
    raw_response: str = field(default="", compare=False, repr=False)
    warnings: tuple[str, ...] = field(default=(), compare=False)


_FENCE_RE = re.compile(r"\A\s*```[A-Za-z0-9_+-]*[ \t]*\n?(.*?)\n?[ \t]*```\s*\Z", re.DOTALL)


def strip_fence(raw: str) -> str:
    m = _FENCE_RE.match(raw)
    return m.group(1) if m else raw


def _load_json(raw: str):
    if not isinstance(raw, str):
        raise ObservationParseError(f"reply must be text, got {type(raw).__name__}")
    text = strip_fence(raw).strip()
    if not text:
        raise ObservationParseError("reply is empty")
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ObservationParseError(f"reply is not valid JSON: {exc}") from exc


def _number(obj: dict, key: str, where: str) -> float:
    value = obj[key]
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise SchemaViolationError(f"{where}.{key}", value, "must be a number")
    if not math.isfinite(value):
        raise SchemaViolationError(f"{where}.{key}", value, "must be finite")
    return float(value)


def _check_keys(obj: dict, expected: tuple[str, ...], where: str) -> None:
    for key in expected:
        if key not in obj:
            raise SchemaViolationError(f"{where}.{key}", None, "is required")
    extra = sorted(set(obj) - set(expected))
    if extra:
        raise SchemaViolationError(f"{where}.{extra[0]}", obj[extra[0]], "is not an allowed field")


def _parse_object(obj, where: str) -> ObjectObservation:
    if not isinstance(obj, dict):
        raise SchemaViolationError(where, obj, "must be an object")
    _check_keys(obj, _OBJECT_FIELDS, where)
    label = obj["label"]
    if not isinstance(label, str) or not label.strip():
        raise SchemaViolationError(f"{where}.label", label, "must be a non-empty string")
    height = _number(obj, "height_cm", where)
    if height <= 0:
        raise SchemaViolationError(f"{where}.height_cm", obj["height_cm"], "must be > 0")
    ratio = _number(obj, "submerged_ratio", where)
    if not 0.0 <= ratio <= 1.0:
        raise SchemaViolationError(f"{where}.submerged_ratio", obj["submerged_ratio"], "out of [0,1]")
    rationale = obj["rationale"]
    if not isinstance(rationale, str):
        raise SchemaViolationError(f"{where}.rationale", rationale, "must be a string")
    return ObjectObservation(label, height, ratio, rationale)


def parse_observation(raw: str, model_id: str, max_objects: int = MAX_OBJECTS) -> SceneObservation:
    """Parse and strictly validate a reply produced under :func:`build_prompt`.

    Out-of-range values are rejected, never clamped. Lists longer than
    ``max_objects`` are truncated (with a warning) before validation.
    """
    doc = _load_json(raw)
    if not isinstance(doc, dict):
        raise SchemaViolationError("$", doc, "must be a JSON object")
    _check_keys(doc, ("objects",), "$")
    items = doc["objects"]
    if not isinstance(items, list):
        raise SchemaViolationError("$.objects", items, "must be an array")
    warnings: list[str] = []
    if len(items) > max_objects:
        msg = f"reply listed {len(items)} objects; kept the first {max_objects}"
        logger.warning(msg)
        warnings.append(msg)
        items = items[:max_objects]
    objects = tuple(_parse_object(o, f"$.objects[{i}]") for i, o in enumerate(items))
    return SceneObservation(objects, model_id, raw_response=raw, warnings=tuple(warnings))


def serialize_observation(obs: SceneObservation) -> str:
    return json.dumps(
        {
            "objects": [
                {
                    "label": o.raw_label,
                    "height_cm": o.provisional_height_cm,
                    "submerged_ratio": o.submerged_ratio,
                    "rationale": o.rationale,
                }
                for o in obs.objects
            ]
        },
        sort_keys=True,
    )


def parse_baseline(raw: str) -> float:
    """Parse a ``{"depth_cm": number}`` reply from the baseline prompt."""
    doc = _load_json(raw)
    if not isinstance(doc, dict):
        raise SchemaViolationError("$", doc, "must be a JSON object")
    _check_keys(doc, ("depth_cm",), "$")
    depth = _number(doc, "depth_cm", "$")
    if depth < 0:
        raise SchemaViolationError("$.depth_cm", doc["depth_cm"], "must be >= 0")
    return depth
