"""Reference-object knowledge graph: canonical heights plus subClassOf/partOf structure.

The graph is an immutable value. Mutating operations (``add_pending``,
``promote``) return a new graph; callers swap the reference.
"""

from __future__ import annotations

import dataclasses
import json
import math
import re
import unicodedata
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from functools import cached_property
from typing import Iterable, Mapping

from .errors import (
    KgParseError,
    KgValidationError,
    PendingEntryError,
    UnknownEntityError,
)

DEFAULT_QUALIFIERS: tuple[str, ...] = (
    "front", "rear", "back", "left", "right", "near", "far", "nearest",
    "farthest", "first", "second", "third", "foreground", "background",
    "partially", "visible",
)

PROVISIONAL_SOURCE = "vlm_provisional"

_ENTITY_ID_RE = re.compile(r"[a-z0-9]+(?:_[a-z0-9]+)*\Z")
_SPLIT_RE = re.compile(r"[^a-z0-9]+")


class Status(str, Enum):
    CANONICAL = "canonical"
    PENDING = "pending"


class Predicate(str, Enum):
    SUBCLASS_OF = "subClassOf"
    PART_OF = "partOf"


class Tier(IntEnum):
    """Match strength; lower is stronger."""

    EXACT_ID = 0
    EXACT_ALIAS = 1
    QUALIFIER_STRIPPED = 2
    TOKEN_SUBSET = 3

    @property
    def label(self) -> str:
        return self.name.lower()


def is_entity_id(value) -> bool:
    return isinstance(value, str) and _ENTITY_ID_RE.match(value) is not None


@dataclass(frozen=True)
class KgEntity:
    id: str
    label: str
    height_mean: float
    height_std: float = 0.0
    aliases: tuple[str, ...] = ()
    category: str | None = None
    source: str = ""
    status: Status = Status.CANONICAL
    observation_count: int = 1


@dataclass(frozen=True, order=True)
class KgRelation:
    subject: str
    predicate: Predicate
    object: str


@dataclass(frozen=True)
class Violation:
    rule: str
    target: str
    detail: str = ""

    def __str__(self) -> str:
        s = f"{self.rule}: {self.target}"
        return f"{s} ({self.detail})" if self.detail else s


@dataclass(frozen=True)
class MatchResult:
    entity: str
    tier: Tier
    matched_text: str


@dataclass(frozen=True)
class KnowledgeGraph:
    entities: Mapping[str, KgEntity] = field(default_factory=dict)
    relations: frozenset[KgRelation] = frozenset()
    version: str = "1"
    qualifier_lexicon: tuple[str, ...] = DEFAULT_QUALIFIERS

    def canonical_ids(self) -> list[str]:
        return sorted(i for i, e in self.entities.items() if e.status is Status.CANONICAL)

    @cached_property
    def _index(self) -> dict[Status, "_MatchIndex"]:
        return {
            status: _MatchIndex(
                [e for e in self.entities.values() if e.status is status],
                self.qualifier_lexicon,
            )
            for status in Status
        }


# ---------------------------------------------------------------------------
# label normalization


def _tokens(raw: str) -> list[str]:
    text = unicodedata.normalize("NFKD", raw).encode("ascii", "ignore").decode("ascii")
    text = text.lower().replace("'", "")
    return [t for t in _SPLIT_RE.split(text) if t]


def canonicalize(raw_label: str, qualifiers: Iterable[str] = DEFAULT_QUALIFIERS) -> str:
    """Lowercase, drop punctuation and positional/visual qualifiers, collapse spaces.

    >>> canonicalize("rear SUV tire")
    'suv tire'
    """
    qual = frozenset(qualifiers)
    return " ".join(t for t in _tokens(raw_label) if t not in qual)


def normalize(raw_label: str) -> str:
    """Like :func:`canonicalize` but keeps qualifier tokens."""
    return " ".join(_tokens(raw_label))


# ---------------------------------------------------------------------------
# validation


def _find_cycles(edges: Iterable[tuple[str, str]]) -> list[list[str]]:
    """Strongly connected components with more than one node (Tarjan, iterative)."""
    graph: dict[str, list[str]] = {}
    for a, b in edges:
        graph.setdefault(a, []).append(b)
        graph.setdefault(b, [])
    index: dict[str, int] = {}
    low: dict[str, int] = {}
    on_stack: set[str] = set()
    stack: list[str] = []
    out: list[list[str]] = []
    counter = 0
    for root in sorted(graph):
        if root in index:
            continue
        work = [(root, iter(sorted(graph[root])))]
        index[root] = low[root] = counter
        counter += 1
        stack.append(root)
        on_stack.add(root)
        while work:
            node, it = work[-1]
            advanced = False
            for nxt in it:
                if nxt not in index:
                    index[nxt] = low[nxt] = counter
                    counter += 1
                    stack.append(nxt)
                    on_stack.add(nxt)
                    work.append((nxt, iter(sorted(graph[nxt]))))
                    advanced = True
                    break
                if nxt in on_stack:
                    low[node] = min(low[node], index[nxt])
            if advanced:
                continue
            work.pop()
            if work:
                parent = work[-1][0]
                low[parent] = min(low[parent], low[node])
            if low[node] == index[node]:
                comp = []
                while True:
                    w = stack.pop()
                    on_stack.discard(w)
                    comp.append(w)
                    if w == node:
                        break
                if len(comp) > 1:
                    out.append(sorted(comp))
    return sorted(out)


def _check(
    entities: list[KgEntity],
    relations: Iterable[KgRelation],
    qualifiers: Iterable[str],
) -> list[Violation]:
    report: list[Violation] = []
    seen: dict[str, KgEntity] = {}
    for e in entities:
        if not is_entity_id(e.id):
            report.append(Violation("invalid id", repr(e.id)))
        if e.id in seen:
            report.append(Violation("duplicate id", e.id))
        seen[e.id] = e
        if not (isinstance(e.height_mean, (int, float)) and e.height_mean > 0 and math.isfinite(e.height_mean)):
            report.append(Violation("non-positive height", e.id, f"height_mean={e.height_mean!r}"))
        if not (isinstance(e.height_std, (int, float)) and e.height_std >= 0 and math.isfinite(e.height_std)):
            report.append(Violation("negative height std", e.id, f"height_std={e.height_std!r}"))
        if not isinstance(e.observation_count, int) or e.observation_count < 1:
            report.append(Violation("invalid observation count", e.id, f"{e.observation_count!r}"))

    # the label is matched like an alias, so it takes part in the uniqueness check
    alias_owner: dict[str, set[str]] = {}
    for e in entities:
        label_key = canonicalize(e.label, qualifiers) if isinstance(e.label, str) else ""
        if label_key:
            alias_owner.setdefault(label_key, set()).add(e.id)
        for a in e.aliases:
            key = canonicalize(a, qualifiers)
            if not key:
                report.append(Violation("empty alias", e.id, f"alias {a!r} canonicalizes to nothing"))
                continue
            alias_owner.setdefault(key, set()).add(e.id)
    for key in sorted(alias_owner):
        owners = alias_owner[key]
        if len(owners) > 1:
            report.append(Violation("duplicate alias", key, "claimed by " + ", ".join(sorted(owners))))

    for e in entities:
        if e.category is not None and e.category not in seen:
            report.append(Violation("dangling category", e.id, f"category {e.category!r} not in graph"))

    by_pred: dict[Predicate, list[tuple[str, str]]] = {p: [] for p in Predicate}
    for r in sorted(relations):
        ident = f"{r.subject} {r.predicate.value} {r.object}"
        dangling = [x for x in (r.subject, r.object) if x not in seen]
        if dangling:
            report.append(Violation("dangling relation", ident, "missing " + ", ".join(dangling)))
        if r.subject == r.object:
            report.append(Violation("self-relation", ident))
            continue
        by_pred[r.predicate].append((r.subject, r.object))
    for pred in Predicate:
        for comp in _find_cycles(by_pred[pred]):
            report.append(Violation("cycle", pred.value, " -> ".join(comp)))
    return report


def validate(kg: KnowledgeGraph) -> list[Violation]:
    """Return every invariant violation in ``kg``; empty when valid. Never raises."""
    report = [
        Violation("id mismatch", key, f"entity stored under key has id {e.id!r}")
        for key, e in sorted(kg.entities.items())
        if key != e.id
    ]
    report += _check(list(kg.entities.values()), kg.relations, kg.qualifier_lexicon)
    return report


# ---------------------------------------------------------------------------
# (de)serialization


def _require(obj: dict, key: str, types, where: str):
    if key not in obj:
        raise KgParseError(f"{where}: missing field {key!r}")
    value = obj[key]
    if isinstance(value, bool) or not isinstance(value, types):
        raise KgParseError(f"{where}: field {key!r} has wrong type ({type(value).__name__})")
    return value


def _parse_document(document: bytes | str) -> tuple[list[KgEntity], list[KgRelation], str, tuple[str, ...], list[Violation]]:
    if isinstance(document, bytes):
        try:
            document = document.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise KgParseError(f"KG document is not UTF-8: {exc}") from exc
    try:
        doc = json.loads(document)
    except json.JSONDecodeError as exc:
        raise KgParseError(f"KG document is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise KgParseError("KG document must be a JSON object")
    version = str(_require(doc, "version", (str, int), "document"))
    lexicon = doc.get("qualifier_lexicon", list(DEFAULT_QUALIFIERS))
    if not isinstance(lexicon, list) or not all(isinstance(q, str) for q in lexicon):
        raise KgParseError("document: qualifier_lexicon must be a list of strings")
    qualifiers = tuple(normalize(q) for q in lexicon)

    violations: list[Violation] = []
    entities: list[KgEntity] = []
    for i, raw in enumerate(_require(doc, "entities", list, "document")):
        where = f"entities[{i}]"
        if not isinstance(raw, dict):
            raise KgParseError(f"{where}: must be an object")
        aliases = raw.get("aliases", [])
        if not isinstance(aliases, list) or not all(isinstance(a, str) for a in aliases):
            raise KgParseError(f"{where}: aliases must be a list of strings")
        category = raw.get("category")
        if category is not None and not isinstance(category, str):
            raise KgParseError(f"{where}: category must be a string or null")
        status_raw = raw.get("status", Status.CANONICAL.value)
        try:
            status = Status(status_raw)
        except ValueError:
            violations.append(Violation("invalid status", str(raw.get("id")), repr(status_raw)))
            status = Status.PENDING
        count = raw.get("observation_count", 1)
        if isinstance(count, bool) or not isinstance(count, int):
            raise KgParseError(f"{where}: observation_count must be an integer")
        entities.append(
            KgEntity(
                id=_require(raw, "id", str, where),
                label=_require(raw, "label", str, where),
                height_mean=float(_require(raw, "height_mean_cm", (int, float), where)),
                height_std=float(_require(raw, "height_std_cm", (int, float), where)),
                aliases=tuple(aliases),
                category=category,
                source=str(raw.get("source", "")),
                status=status,
                observation_count=count,
            )
        )

    relations: list[KgRelation] = []
    for i, raw in enumerate(doc.get("relations", [])):
        where = f"relations[{i}]"
        if not isinstance(raw, dict):
            raise KgParseError(f"{where}: must be an object")
        subject = _require(raw, "subject", str, where)
        obj = _require(raw, "object", str, where)
        pred_raw = _require(raw, "predicate", str, where)
        try:
            pred = Predicate(pred_raw)
        except ValueError:
            violations.append(Violation("invalid predicate", f"{subject} {pred_raw} {obj}"))
            continue
        relations.append(KgRelation(subject, pred, obj))
    return entities, relations, version, qualifiers, violations


def load_kg(document: bytes | str) -> KnowledgeGraph:
    """Parse and validate a KG JSON document.

    Raises :class:`KgParseError` for malformed documents and
    :class:`KgValidationError` listing every violated invariant otherwise.
    """
    entities, relations, version, qualifiers, violations = _parse_document(document)
    violations += _check(entities, relations, qualifiers)
    if violations:
        raise KgValidationError(violations)
    return KnowledgeGraph(
        entities={e.id: e for e in entities},
        relations=frozenset(relations),
        version=version,
        qualifier_lexicon=qualifiers,
    )


def _entity_doc(e: KgEntity) -> dict:
    doc = {
        "id": e.id,
        "label": e.label,
        "aliases": list(e.aliases),
        "height_mean_cm": e.height_mean,
        "height_std_cm": e.height_std,
        "source": e.source,
        "status": e.status.value,
        "observation_count": e.observation_count,
    }
    if e.category is not None:
        doc["category"] = e.category
    return doc


def kg_to_dict(kg: KnowledgeGraph) -> dict:
    return {
        "version": kg.version,
        "qualifier_lexicon": list(kg.qualifier_lexicon),
        "entities": [_entity_doc(kg.entities[k]) for k in sorted(kg.entities)],
        "relations": [
            {"subject": r.subject, "predicate": r.predicate.value, "object": r.object}
            for r in sorted(kg.relations)
        ],
    }


def save_kg(kg: KnowledgeGraph) -> bytes:
    return (json.dumps(kg_to_dict(kg), indent=2, sort_keys=True, ensure_ascii=False) + "\n").encode("utf-8")


# ---------------------------------------------------------------------------
# queries


class _MatchIndex:
    def __init__(self, entities: list[KgEntity], qualifiers: tuple[str, ...]):
        self.by_id_text: dict[str, str] = {}
        self.by_name: dict[str, set[str]] = {}
        self.token_sets: list[tuple[str, str, frozenset[str]]] = []
        for e in sorted(entities, key=lambda e: e.id):
            id_text = e.id.replace("_", " ")
            self.by_id_text[id_text] = e.id
            self.token_sets.append((e.id, id_text, frozenset(id_text.split())))
            for name in (e.label, *e.aliases):
                for key in {normalize(name), canonicalize(name, qualifiers)}:
                    if key:
                        self.by_name.setdefault(key, set()).add(e.id)
                norm = normalize(name)
                if norm:
                    self.token_sets.append((e.id, name, frozenset(norm.split())))

    def exact(self, text: str) -> tuple[str, Tier] | None:
        if text in self.by_id_text:
            return self.by_id_text[text], Tier.EXACT_ID
        if text in self.by_name:
            return min(self.by_name[text]), Tier.EXACT_ALIAS
        return None

    def subset(self, query: frozenset[str]) -> tuple[str, str] | None:
        best = None
        for eid, name, tokens in self.token_sets:
            if not query <= tokens:
                continue
            key = (-len(query & tokens), eid)
            if best is None or key < best[0]:
                best = (key, eid, name)
        return (best[1], best[2]) if best else None


def _match_pool(index: _MatchIndex, tokens: list[str], qualifiers: frozenset[str]) -> MatchResult | None:
    text = " ".join(tokens)
    hit = index.exact(text)
    if hit:
        return MatchResult(hit[0], hit[1], text)
    # peel qualifier tokens one at a time, left to right
    remaining = list(tokens)
    while True:
        pos = next((i for i, t in enumerate(remaining) if t in qualifiers), None)
        if pos is None:
            break
        del remaining[pos]
        stripped = " ".join(remaining)
        if not stripped:
            break
        hit = index.exact(stripped)
        if hit:
            return MatchResult(hit[0], Tier.QUALIFIER_STRIPPED, stripped)
    canon = frozenset(t for t in tokens if t not in qualifiers)
    found = index.subset(canon)
    if found:
        return MatchResult(found[0], Tier.TOKEN_SUBSET, found[1])
    return None


def match_entity(kg: KnowledgeGraph, raw_label: str) -> MatchResult | None:
    """Resolve a free-text object label to a graph entity.

    Tiers are tried strongest first: exact id, exact alias/label, the same two
    after peeling qualifier words, then token-subset containment (ties go to
    the larger overlap, then the smaller id). Pending entities are only
    considered when no canonical entity matches at any tier.
    """
    tokens = _tokens(raw_label)
    qualifiers = frozenset(kg.qualifier_lexicon)
    if not [t for t in tokens if t not in qualifiers]:
        return None
    for status in (Status.CANONICAL, Status.PENDING):
        result = _match_pool(kg._index[status], tokens, qualifiers)
        if result is not None:
            return result
    return None


def lookup_height(kg: KnowledgeGraph, entity_id: str) -> tuple[float, float]:
    try:
        e = kg.entities[entity_id]
    except KeyError:
        raise UnknownEntityError(entity_id) from None
    return e.height_mean, e.height_std


def add_pending(kg: KnowledgeGraph, raw_label: str, provisional_height: float) -> KnowledgeGraph:
    """Record a model-provided height for an object the graph does not know.

    Repeated observations of the same label keep a running mean. The new
    entity is quarantined (status pending) until promoted by a curator.
    """
    if isinstance(provisional_height, bool) or not isinstance(provisional_height, (int, float)) \
            or not math.isfinite(provisional_height) or provisional_height <= 0:
        raise PendingEntryError(f"provisional height must be positive, got {provisional_height!r}")
    canon = canonicalize(raw_label, kg.qualifier_lexicon)
    if not canon:
        raise PendingEntryError(f"label {raw_label!r} is empty after canonicalization")
    m = match_entity(kg, raw_label)
    if m is not None and kg.entities[m.entity].status is Status.CANONICAL:
        raise PendingEntryError(f"label {raw_label!r} matches canonical entity {m.entity!r}")
    # a non-fuzzy hit on a pending entity (e.g. via its alias) is another sighting of it
    eid = m.entity if m is not None and m.tier < Tier.TOKEN_SUBSET else canon.replace(" ", "_")
    existing = kg.entities.get(eid)
    if existing is None:
        entity = KgEntity(
            id=eid,
            label=canon,
            height_mean=float(provisional_height),
            height_std=0.0,
            source=PROVISIONAL_SOURCE,
            status=Status.PENDING,
            observation_count=1,
        )
    elif existing.status is Status.CANONICAL:
        raise PendingEntryError(f"entity {eid!r} already exists as canonical")
    else:
        n = existing.observation_count + 1
        mean = existing.height_mean + (provisional_height - existing.height_mean) / n
        entity = dataclasses.replace(existing, height_mean=mean, observation_count=n)
    return dataclasses.replace(kg, entities={**kg.entities, eid: entity})


def promote(kg: KnowledgeGraph, entity_id: str, source: str | None = None) -> KnowledgeGraph:
    """Curation edit: mark a pending entity canonical."""
    e = kg.entities.get(entity_id)
    if e is None:
        raise UnknownEntityError(entity_id)
    e = dataclasses.replace(e, status=Status.CANONICAL, source=source or e.source)
    new = dataclasses.replace(kg, entities={**kg.entities, entity_id: e})
    problems = validate(new)
    if problems:
        raise KgValidationError(problems)
    return new
