"""Synthetic relation annotation through a chat-completion endpoint.

Each corpus text becomes one job: every ordered entity pair is listed in
a deterministic prompt asking for a free-form relation label or
"NO RELATION" per pair, as strict JSON. Responses are schema-validated;
malformed ones are retried up to a cap, and pairs missing from an
otherwise valid response are filled with "NO RELATION" and flagged. Jobs
run in a bounded thread pool behind a token-bucket rate limiter, and an
audit log keeps every raw response.

Offline mode replays recorded responses keyed by prompt hash, so tests
and CI never need a live endpoint. Labels colliding (case-insensitively)
with benchmark label sets are stripped from the final dataset.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Protocol, Sequence

import requests

from .data import EntitySpan, InputInstance, Relation
from .errors import AnnotationError, InvalidInputError
from .representation import enumerate_pairs
from .scorer import NO_RELATION_LABEL

log = logging.getLogger(__name__)

API_KEY_ENV = "GLIREL_API_KEY"


@dataclass
class AnnotationJob:
    """One text to annotate, with the endpoint settings that govern it."""

    text: str
    entities: list[EntitySpan]
    endpoint_url: str = ""
    model_name: str = ""
    temperature: float = 0.0
    max_retries: int = 2
    rate_limit_per_s: float = 0.0
    doc_id: str | None = None

    def __post_init__(self) -> None:
        if self.max_retries < 0:
            raise InvalidInputError("max_retries must be >= 0")
        if self.temperature < 0:
            raise InvalidInputError("temperature must be >= 0")

    @property
    def tokens(self) -> list[str]:
        return self.text.split()


@dataclass
class AnnotationResult:
    """Per-pair verdicts plus the raw responses for auditing."""

    pairs: list[tuple[int, int]]
    verdicts: list[str]
    raw_responses: list[str]
    flags: list[str] = field(default_factory=list)
    failed: bool = False

    def relation_triples(self) -> list[tuple[int, int, str]]:
        return [
            (u, v, label)
            for (u, v), label in zip(self.pairs, self.verdicts)
            if label != NO_RELATION_LABEL
        ]

    def no_relation_fraction(self) -> float:
        if not self.verdicts:
            return 1.0
        return sum(1 for v in self.verdicts if v == NO_RELATION_LABEL) / len(self.verdicts)


def build_prompt(
    text: str, entities: Sequence[EntitySpan], pairs: Sequence[tuple[int, int]]
) -> str:
    """Deterministic annotation prompt for one text.

    Lists every entity with its surface form and every ordered pair to
    label, and demands strict JSON without a predefined taxonomy.
    """
    tokens = text.split()
    lines = [
        "You label the relationships between entities in a text.",
        "",
        f"Text: {text}",
        "",
        "Entities (token spans, inclusive):",
    ]
    for idx, span in enumerate(entities):
        surface = " ".join(tokens[span.start : span.end + 1])
        lines.append(f'  {idx}: "{surface}" [{span.start}, {span.end}]')
    lines.append("")
    lines.append("Ordered entity pairs to label (head -> tail):")
    lines.append("  " + ", ".join(f"({u}, {v})" for u, v in pairs))
    lines.append("")
    lines.extend(
        [
            "For every listed pair, state the relationship expressed by the text",
            'from head to tail as a short free-form label of your choosing, or use',
            f'"{NO_RELATION_LABEL}" if the text expresses none. Do not restrict',
            "yourself to any fixed set of labels.",
            "",
            "Respond with strict JSON only, no prose, in exactly this shape,",
            "covering every listed pair exactly once:",
            '{"relations": [{"head": 0, "tail": 1, "label": "..."}]}',
        ]
    )
    return "\n".join(lines)


class ResponseFormatError(ValueError):
    """Response body is not the strict JSON the prompt demanded."""


def parse_response(raw: str, pairs: Sequence[tuple[int, int]]) -> tuple[list[str], list[str]]:
    """Validate a response body and align its verdicts with ``pairs``.

    Returns (verdicts, flags). Pairs the model skipped become
    "NO RELATION" with a flag; duplicated pairs keep the first verdict.
    Raises ResponseFormatError when the body cannot be used at all.
    """
    try:
        payload = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ResponseFormatError(f"response is not valid JSON: {exc}") from exc
    if not isinstance(payload, dict) or not isinstance(payload.get("relations"), list):
        raise ResponseFormatError('response must be an object with a "relations" list')

    seen: dict[tuple[int, int], str] = {}
    flags: list[str] = []
    wanted = set(pairs)
    for entry in payload["relations"]:
        if (
            not isinstance(entry, dict)
            or not isinstance(entry.get("head"), int)
            or not isinstance(entry.get("tail"), int)
            or not isinstance(entry.get("label"), str)
        ):
            raise ResponseFormatError(f"malformed relation entry: {entry!r}")
        key = (entry["head"], entry["tail"])
        if key not in wanted:
            flags.append(f"verdict for unknown pair {key} ignored")
            continue
        if key in seen:
            flags.append(f"duplicate verdict for pair {key} ignored")
            continue
        label = entry["label"].strip()
        seen[key] = label if label else NO_RELATION_LABEL

    verdicts: list[str] = []
    for pair in pairs:
        if pair in seen:
            verdicts.append(seen[pair])
        else:
            verdicts.append(NO_RELATION_LABEL)
            flags.append(f"pair {pair} missing from response; filled with {NO_RELATION_LABEL}")
    return verdicts, flags


class Transport(Protocol):
    def complete(self, prompt: str, job: AnnotationJob) -> str: ...


def prompt_key(prompt: str) -> str:
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()


class HttpChatTransport:
    """OpenAI-style chat-completion client over JSON HTTP.

    The API key is read from the GLIREL_API_KEY environment variable.
    """

    def __init__(self, base_url: str, model_name: str, timeout: float = 60.0):
        self.base_url = base_url.rstrip("/")
        self.model_name = model_name
        self.timeout = timeout
        self.session = requests.Session()

    def complete(self, prompt: str, job: AnnotationJob) -> str:
        headers = {"Content-Type": "application/json"}
        api_key = os.environ.get(API_KEY_ENV)
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        body = {
            "model": job.model_name or self.model_name,
            "temperature": job.temperature,
            "messages": [{"role": "user", "content": prompt}],
        }
        response = self.session.post(
            f"{self.base_url}/chat/completions",
            headers=headers,
            json=body,
            timeout=self.timeout,
        )
        response.raise_for_status()
        payload = response.json()
        try:
            return payload["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise ResponseFormatError(f"unexpected completion envelope: {exc}") from exc


class ReplayTransport:
    """Replays recorded responses keyed by prompt hash.

    The replay file is JSONL with records {"key": <sha256 of prompt>,
    "responses": [body, ...]}; successive calls for the same prompt
    consume successive bodies (so recorded retries replay too), repeating
    the last one if exhausted.
    """

    def __init__(self, path: str | Path):
        self.responses: dict[str, list[str]] = {}
        self._cursor: dict[str, int] = {}
        self._lock = threading.Lock()
        with Path(path).open("r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                record = json.loads(line)
                self.responses[record["key"]] = list(record["responses"])

    def complete(self, prompt: str, job: AnnotationJob) -> str:
        key = prompt_key(prompt)
        with self._lock:
            if key not in self.responses:
                raise AnnotationError(f"no recorded response for prompt key {key}")
            bodies = self.responses[key]
            cursor = self._cursor.get(key, 0)
            self._cursor[key] = cursor + 1
            return bodies[min(cursor, len(bodies) - 1)]


class RecordingTransport:
    """Wraps a live transport and writes a replay file as it goes."""

    def __init__(self, inner: Transport, record_path: str | Path):
        self.inner = inner
        self.record_path = Path(record_path)
        self._lock = threading.Lock()
        self._seen: dict[str, list[str]] = {}

    def complete(self, prompt: str, job: AnnotationJob) -> str:
        body = self.inner.complete(prompt, job)
        with self._lock:
            self._seen.setdefault(prompt_key(prompt), []).append(body)
        return body

    def flush(self) -> None:
        with self._lock, self.record_path.open("w", encoding="utf-8") as fh:
            for key, bodies in self._seen.items():
                fh.write(json.dumps({"key": key, "responses": bodies}) + "\n")


class RateLimiter:
    """Token bucket: at most ``rate`` acquisitions per second, burst of
    ``burst``. A rate of zero disables limiting."""

    def __init__(self, rate: float, burst: int = 1, clock: Callable[[], float] = time.monotonic):
        self.rate = rate
        self.burst = max(1, burst)
        self.clock = clock
        self._tokens = float(self.burst)
        self._updated = clock()
        self._lock = threading.Lock()

    def acquire(self) -> float:
        """Blocks until a token is available; returns seconds waited."""
        if self.rate <= 0:
            return 0.0
        waited = 0.0
        while True:
            with self._lock:
                now = self.clock()
                self._tokens = min(
                    float(self.burst), self._tokens + (now - self._updated) * self.rate
                )
                self._updated = now
                if self._tokens >= 1.0:
                    self._tokens -= 1.0
                    return waited
                needed = (1.0 - self._tokens) / self.rate
            time.sleep(needed)
            waited += needed


class EntityTagger(Protocol):
    def tag(self, tokens: Sequence[str]) -> list[EntitySpan]: ...


class DictionaryTagger:
    """Greedy longest-match tagger over a gazetteer of surface phrases.

    A stand-in for a real upstream NER component; matching is exact on
    whitespace tokens, longest phrase first, left to right.
    """

    def __init__(self, phrases: Iterable[str]):
        self.phrases = [tuple(p.split()) for p in phrases if p.split()]
        self.phrases.sort(key=len, reverse=True)

    def tag(self, tokens: Sequence[str]) -> list[EntitySpan]:
        spans: list[EntitySpan] = []
        i = 0
        n = len(tokens)
        while i < n:
            matched = False
            for phrase in self.phrases:
                k = len(phrase)
                if i + k <= n and tuple(tokens[i : i + k]) == phrase:
                    spans.append(EntitySpan(i, i + k - 1))
                    i += k
                    matched = True
                    break
            if not matched:
                i += 1
        return spans


def annotate_job(job: AnnotationJob, transport: Transport, limiter: RateLimiter | None = None) -> AnnotationResult:
    """Run one annotation job, retrying malformed responses."""
    pairs = list(enumerate_pairs(len(job.entities)))
    if not pairs:
        return AnnotationResult(pairs=[], verdicts=[], raw_responses=[], flags=["no entity pairs"])
    prompt = build_prompt(job.text, job.entities, pairs)
    raw_responses: list[str] = []
    flags: list[str] = []
    last_error: Exception | None = None
    for attempt in range(job.max_retries + 1):
        if limiter is not None:
            limiter.acquire()
        try:
            raw = transport.complete(prompt, job)
        except (requests.RequestException, AnnotationError) as exc:
            last_error = exc
            flags.append(f"attempt {attempt + 1}: transport error: {exc}")
            continue
        raw_responses.append(raw)
        try:
            verdicts, parse_flags = parse_response(raw, pairs)
        except ResponseFormatError as exc:
            last_error = exc
            flags.append(f"attempt {attempt + 1}: {exc}")
            continue
        return AnnotationResult(
            pairs=pairs,
            verdicts=verdicts,
            raw_responses=raw_responses,
            flags=flags + parse_flags,
        )
    log.warning("annotation job %r failed after %d attempts: %s", job.doc_id, job.max_retries + 1, last_error)
    return AnnotationResult(
        pairs=pairs,
        verdicts=[NO_RELATION_LABEL] * len(pairs),
        raw_responses=raw_responses,
        flags=flags + ["retries exhausted; text skipped"],
        failed=True,
    )


@dataclass
class CorpusRecord:
    text: str
    entities: list[EntitySpan] | None = None
    doc_id: str | None = None

    @classmethod
    def from_dict(cls, record: dict) -> "CorpusRecord":
        entities = record.get("entities")
        if entities is not None:
            entities = [EntitySpan(int(s), int(e)) for s, e in entities]
        return cls(text=str(record["text"]), entities=entities, doc_id=record.get("doc_id"))


def load_corpus(path: str | Path) -> list[CorpusRecord]:
    records = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(CorpusRecord.from_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise InvalidInputError(f"{path}:{lineno}: bad corpus record: {exc}") from exc
    return records


def annotate_corpus(
    records: Sequence[CorpusRecord],
    transport: Transport,
    endpoint_url: str = "",
    model_name: str = "",
    temperature: float = 0.0,
    max_retries: int = 2,
    rate_limit_per_s: float = 0.0,
    jobs: int = 1,
    tagger: EntityTagger | None = None,
    audit_path: str | Path | None = None,
) -> list[InputInstance]:
    """Annotate a corpus into dataset instances; failed texts are skipped.

    Runs at most ``jobs`` requests concurrently behind one shared rate
    limiter. The audit log (JSONL) keeps prompt hashes, raw responses,
    verdicts, and flags per text, written by this single coordinating
    call.
    """
    limiter = RateLimiter(rate_limit_per_s) if rate_limit_per_s > 0 else None
    annotation_jobs: list[AnnotationJob] = []
    for i, record in enumerate(records):
        tokens = record.text.split()
        entities = record.entities
        if entities is None:
            if tagger is None:
                raise InvalidInputError(
                    f"corpus record {i} has no entities and no tagger was provided"
                )
            entities = tagger.tag(tokens)
        annotation_jobs.append(
            AnnotationJob(
                text=record.text,
                entities=list(entities),
                endpoint_url=endpoint_url,
                model_name=model_name,
                temperature=temperature,
                max_retries=max_retries,
                rate_limit_per_s=rate_limit_per_s,
                doc_id=record.doc_id or f"text-{i:05d}",
            )
        )

    if jobs <= 1:
        results = [annotate_job(job, transport, limiter) for job in annotation_jobs]
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(
                pool.map(lambda job: annotate_job(job, transport, limiter), annotation_jobs)
            )

    instances: list[InputInstance] = []
    audit_entries: list[dict] = []
    for job, result in zip(annotation_jobs, results):
        audit_entries.append(
            {
                "doc_id": job.doc_id,
                "failed": result.failed,
                "pairs": [list(p) for p in result.pairs],
                "verdicts": result.verdicts,
                "flags": result.flags,
                "raw_responses": result.raw_responses,
            }
        )
        if result.failed:
            continue
        instances.append(
            InputInstance(
                tokens=job.tokens,
                entities=list(job.entities),
                relations=[Relation(u, v, label) for u, v, label in result.relation_triples()],
                doc_id=job.doc_id,
            )
        )

    if audit_path is not None:
        audit_file = Path(audit_path)
        audit_file.parent.mkdir(parents=True, exist_ok=True)
        with audit_file.open("w", encoding="utf-8") as fh:
            for entry in audit_entries:
                fh.write(json.dumps(entry, ensure_ascii=False) + "\n")
    return instances


def filter_benchmark_labels(
    dataset: Sequence[InputInstance],
    benchmark_label_sets: Sequence[Iterable[str]],
) -> list[InputInstance]:
    """Strip triples whose label collides with any benchmark label set.

    Comparison is case-folded. Instances keep their place if any triple
    survives or if they can still contribute negative pairs (at least two
    entities); otherwise they are dropped.
    """
    blocked: set[str] = set()
    for label_set in benchmark_label_sets:
        blocked.update(label.casefold() for label in label_set)

    filtered: list[InputInstance] = []
    for instance in dataset:
        kept = [rel for rel in instance.relations if rel.label.casefold() not in blocked]
        if not kept and len(instance.entities) < 2:
            continue
        filtered.append(
            InputInstance(
                tokens=list(instance.tokens),
                entities=list(instance.entities),
                relations=kept,
                doc_id=instance.doc_id,
                clusters=instance.clusters,
            )
        )
    return filtered


def benchmark_intersection(
    dataset: Sequence[InputInstance],
    benchmark_label_sets: Sequence[Iterable[str]],
) -> set[str]:
    """Labels in the dataset that case-fold into a benchmark label set."""
    blocked: set[str] = set()
    for label_set in benchmark_label_sets:
        blocked.update(label.casefold() for label in label_set)
    present: set[str] = set()
    for instance in dataset:
        for rel in instance.relations:
            if rel.label.casefold() in blocked:
                present.add(rel.label)
    return present


def dataset_no_relation_fraction(audit_path: str | Path) -> float:
    """Fraction of pair verdicts labeled NO RELATION across an audit log."""
    total = 0
    no_rel = 0
    with Path(audit_path).open("r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            entry = json.loads(line)
            if entry.get("failed"):
                continue
            for verdict in entry.get("verdicts", []):
                total += 1
                if verdict == NO_RELATION_LABEL:
                    no_rel += 1
    return no_rel / total if total else 1.0
