"""End-to-end answer generation: retrieve exemplars, assemble a grounded
context, query a generator, and parse the reply into a structured answer.

The generator is always external to this package: either a remote
endpoint speaking the ``/v1/generate`` wire contract or the deterministic
local stub, which answers from the retrieved exemplars' spec values and
keeps the whole pipeline testable offline.
"""

from __future__ import annotations

import hashlib
import re
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Mapping, Protocol, Sequence

import httpx
import numpy as np

from .core import (
    ClassDistribution,
    NUMERIC_ATTRIBUTES,
    VehicleSpec,
    as_embedding,
)
from .errors import (
    ConfigError,
    MissingSpecError,
    PipelineError,
    RagatrError,
    RemoteServiceError,
    UnparseableAnswerError,
)
from .index import MATCH_ALL, ExemplarIndex, MetadataFilter, RetrievalHit

TASKS = ("type", "qualities", "mounted_weapon", "weight", "dimensions")

TEMPLATE_VERSION = "1"

QUESTION_TEXT = {
    "type": "What is the vehicle type of the queried SAR target?",
    "qualities": "Which descriptive qualities characterize the queried SAR target?",
    "mounted_weapon": "Does the queried SAR target carry a mounted weapon? Answer yes or no.",
    "weight": "What is the weight of the queried SAR target in metric tons?",
    "dimensions": "What are the length, width, and height of the queried SAR target in meters?",
}


@dataclass(frozen=True, eq=False)
class VqaQuestion:
    """One question against the pipeline: an embedding plus a task."""

    query_id: str
    query_embedding: np.ndarray
    task: str
    k: int = 5
    metadata_filter: MetadataFilter = MATCH_ALL

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        object.__setattr__(self, "query_embedding", as_embedding(self.query_embedding))


@dataclass(frozen=True)
class AssembledContext:
    """Canonical textual context handed to the generator; one exemplar
    line per hit, in rank order, byte-identical for identical inputs."""

    question_text: str
    exemplar_lines: tuple[str, ...]
    hits: tuple[RetrievalHit, ...]
    task: str

    def __post_init__(self):
        object.__setattr__(self, "exemplar_lines", tuple(self.exemplar_lines))
        object.__setattr__(self, "hits", tuple(self.hits))
        if len(self.exemplar_lines) != len(self.hits):
            raise PipelineError("assemble", "exemplar line count does not match hit count")


@dataclass(frozen=True)
class StructuredAnswer:
    """Parsed generator output. ``unparseable`` marks answers missing the
    field their task demands; they score as incorrect downstream and are
    excluded (with a count) from regression sample sets."""

    raw_text: str
    target_type: str | None = None
    qualities: frozenset[str] | None = None
    mounted_weapon: bool | None = None
    weight_tons: float | None = None
    length_m: float | None = None
    width_m: float | None = None
    height_m: float | None = None
    unparseable: bool = False

    def attribute(self, name: str) -> float | None:
        if name not in NUMERIC_ATTRIBUTES:
            raise ConfigError(f"unknown numeric attribute {name!r}")
        return getattr(self, name)


def _fmt_num(value: float) -> str:
    return f"{value:g}"


def format_exemplar_line(rank: int, hit: RetrievalHit, spec: VehicleSpec) -> str:
    return (
        f"EXEMPLAR {rank}: type={hit.target_type} sim={hit.score:.4f} "
        f"depression={_fmt_num(hit.depression_deg)} azimuth={_fmt_num(hit.azimuth_deg)} "
        f"weight_tons={_fmt_num(spec.weight_tons)} length_m={_fmt_num(spec.length_m)} "
        f"width_m={_fmt_num(spec.width_m)} height_m={_fmt_num(spec.height_m)} "
        f"mounted_weapon={'yes' if spec.mounted_weapon else 'no'}"
    )


def assemble_context(
    question: VqaQuestion,
    hits: Sequence[RetrievalHit],
    specs: Mapping[str, VehicleSpec],
) -> AssembledContext:
    """Build the canonical grounded context for ``hits`` in rank order."""
    if not hits:
        raise PipelineError("assemble", f"query {question.query_id!r}: no hits to assemble")
    lines = []
    for hit in hits:
        spec = specs.get(hit.target_type)
        if spec is None:
            raise MissingSpecError(f"no vehicle spec for retrieved type {hit.target_type!r}")
        lines.append(format_exemplar_line(hit.rank, hit, spec))
    return AssembledContext(
        question_text=f"QUESTION: {QUESTION_TEXT[question.task]}",
        exemplar_lines=tuple(lines),
        hits=tuple(hits),
        task=question.task,
    )


def _vote_type(hits: Sequence[RetrievalHit]) -> str:
    counts = Counter(h.target_type for h in hits)
    best_count = max(counts.values())
    tied = [t for t, c in counts.items() if c == best_count]
    if len(tied) == 1:
        return tied[0]
    sums = {t: sum(h.score for h in hits if h.target_type == t) for t in tied}
    best_sum = max(sums.values())
    return min(t for t, s in sums.items() if s == best_sum)


def _weighted_attribute(hits: Sequence[RetrievalHit], specs, attribute: str) -> float:
    values = [specs[h.target_type].attribute(attribute) for h in hits]
    if all(v == values[0] for v in values):
        # Short-circuit keeps the answer exact when every hit agrees.
        return values[0]
    weights = [max(h.score, 0.0) for h in hits]
    total = sum(weights)
    if total <= 0.0:
        return sum(values) / len(values)
    return sum(w * v for w, v in zip(weights, values)) / total


def stub_generate(
    hits: Sequence[RetrievalHit],
    specs: Mapping[str, VehicleSpec],
    task: str,
) -> StructuredAnswer:
    """Deterministic generator: majority-vote the type (ties: larger summed
    similarity, then lexicographic), take categorical fields from the voted
    type's spec, and answer numeric fields with the similarity-weighted mean
    of the hits' spec values (weights max(score, 0); uniform if all <= 0)."""
    if task not in TASKS:
        raise ConfigError(f"unknown task {task!r}")
    if not hits:
        raise PipelineError("generate", "stub generator needs at least one hit")
    for hit in hits:
        if hit.target_type not in specs:
            raise MissingSpecError(f"no vehicle spec for retrieved type {hit.target_type!r}")
    voted = _vote_type(hits)
    spec = specs[voted]
    weight = _weighted_attribute(hits, specs, "weight_tons")
    length = _weighted_attribute(hits, specs, "length_m")
    width = _weighted_attribute(hits, specs, "width_m")
    height = _weighted_attribute(hits, specs, "height_m")
    raw = (
        f"type={voted}; qualities={','.join(sorted(spec.qualities))}; "
        f"mounted_weapon={'yes' if spec.mounted_weapon else 'no'}; "
        f"weight_tons={weight!r}; length_m={length!r}; width_m={width!r}; height_m={height!r}"
    )
    return StructuredAnswer(
        raw_text=raw,
        target_type=voted,
        qualities=spec.qualities,
        mounted_weapon=spec.mounted_weapon,
        weight_tons=weight,
        length_m=length,
        width_m=width,
        height_m=height,
    )


def prior_generate(
    dist: ClassDistribution,
    specs: Mapping[str, VehicleSpec],
    task: str,
    seed: int,
) -> StructuredAnswer:
    """No-retrieval reference generator: sample a type from the class prior
    and answer with that type's spec values."""
    if task not in TASKS:
        raise ConfigError(f"unknown task {task!r}")
    types, p = dist.as_arrays()
    for t in types:
        if t not in specs:
            raise MissingSpecError(f"no vehicle spec for type {t!r}")
    rng = np.random.Generator(np.random.Philox(key=seed))
    sampled = types[int(rng.choice(len(types), p=p))]
    spec = specs[sampled]
    raw = f"prior guess: type={sampled}"
    return StructuredAnswer(
        raw_text=raw,
        target_type=sampled,
        qualities=spec.qualities,
        mounted_weapon=spec.mounted_weapon,
        weight_tons=spec.weight_tons,
        length_m=spec.length_m,
        width_m=spec.width_m,
        height_m=spec.height_m,
    )


def derive_seed(base_seed: int, *parts: str) -> int:
    """Stable 128-bit Philox key from a run seed and string parts."""
    digest = hashlib.blake2b("\x1f".join(parts).encode("utf-8"), digest_size=8).digest()
    return (base_seed << 64) | int.from_bytes(digest, "big")


# --- answer parsing ---------------------------------------------------------

_STRIP_CHARS = "()[]{}<>,.;:!?\"'"
_NUM_RE = re.compile(r"^[-+]?(?:\d+(?:\.\d+)?|\.\d+)$")
_NUM_UNIT_RE = re.compile(r"^([-+]?(?:\d+(?:\.\d+)?|\.\d+))[a-zA-Z%]+$")
_WEIGHT_UNIT_RE = re.compile(
    r"([-+]?\d+(?:\.\d+)?)\s*(?:metric\s+)?(?:tons?|tonnes?)(?![a-z])", re.IGNORECASE
)
_YES_RE = re.compile(r"(?<![a-z])(?:yes|true)(?![a-z])", re.IGNORECASE)
_NO_RE = re.compile(r"(?<![a-z])(?:no|false|none)(?![a-z])", re.IGNORECASE)
_DIMENSION_KEYWORDS = {
    "length_m": "length|long",
    "width_m": "width|wide",
    "height_m": "height|high|tall",
}


def _numeric_tokens(text: str) -> list[float]:
    values = []
    for token in text.split():
        token = token.strip(_STRIP_CHARS)
        if not token:
            continue
        if _NUM_RE.match(token):
            values.append(float(token))
            continue
        match = _NUM_UNIT_RE.match(token)
        if match:
            values.append(float(match.group(1)))
    return values


def parse_numeric_answer(text: str, attribute: str) -> float:
    """First decimal-number token in ``text`` as the attribute's value.

    Unit words (tons/tonnes for weight, m/meters for dimensions) pass
    through as metric units; no conversion is applied. Raises
    UnparseableAnswerError when no number is present or the value is not
    positive.
    """
    if attribute not in NUMERIC_ATTRIBUTES:
        raise ConfigError(f"unknown numeric attribute {attribute!r}")
    if not text:
        raise UnparseableAnswerError(f"empty answer for {attribute}")
    values = _numeric_tokens(text)
    if not values:
        raise UnparseableAnswerError(f"no numeric token in answer for {attribute}: {text[:80]!r}")
    value = values[0]
    if value <= 0.0:
        raise UnparseableAnswerError(f"nonpositive value {value} for {attribute}")
    return value


def _find_known_type(text: str, specs: Mapping[str, VehicleSpec]) -> str | None:
    best: tuple[int, int, str] | None = None
    for name in specs:
        pattern = rf"(?<![A-Za-z0-9]){re.escape(name)}(?![A-Za-z0-9])"
        match = re.search(pattern, text, re.IGNORECASE)
        if match and (best is None or (match.start(), -len(name)) < (best[0], best[1])):
            best = (match.start(), -len(name), name)
    return best[2] if best else None


def _find_qualities(text: str, specs: Mapping[str, VehicleSpec]) -> frozenset[str]:
    vocabulary = set().union(*(spec.qualities for spec in specs.values())) if specs else set()
    found = set()
    for quality in vocabulary:
        pattern = rf"(?<![A-Za-z0-9]){re.escape(quality)}(?![A-Za-z0-9])"
        if re.search(pattern, text, re.IGNORECASE):
            found.add(quality)
    return frozenset(found)


def _find_yes_no(text: str) -> bool | None:
    yes = _YES_RE.search(text)
    no = _NO_RE.search(text)
    if yes and (not no or yes.start() < no.start()):
        return True
    if no:
        return False
    return None


def _find_dimension(text: str, keywords: str) -> float | None:
    # Punctuation between a number and a keyword means they belong to
    # different clauses, so the number-first pattern only crosses spaces.
    kw_first = re.search(rf"(?:{keywords})\D{{0,30}}?(\d+(?:\.\d+)?)", text, re.IGNORECASE)
    num_first = re.search(
        rf"(\d+(?:\.\d+)?)\s*(?:(?:meters?|metres?|m)\b)?\s*(?:{keywords})", text, re.IGNORECASE
    )
    candidates = [m for m in (kw_first, num_first) if m]
    if not candidates:
        return None
    match = min(candidates, key=lambda m: m.start())
    value = float(match.group(1))
    return value if value > 0.0 else None


def parse_structured_answer(
    text: str, task: str, specs: Mapping[str, VehicleSpec]
) -> StructuredAnswer:
    """Parse free-form generator text into a structured answer.

    Every field is extracted opportunistically (known type names and
    qualities from the spec table, yes/no tokens, unit-anchored numbers);
    the answer is marked unparseable when the field the task demands is
    missing.
    """
    if task not in TASKS:
        raise ConfigError(f"unknown task {task!r}")
    text = text or ""
    target_type = _find_known_type(text, specs)
    qualities = _find_qualities(text, specs)
    mounted = _find_yes_no(text)

    weight: float | None = None
    if task == "weight":
        try:
            weight = parse_numeric_answer(text, "weight_tons")
        except UnparseableAnswerError:
            weight = None
    else:
        match = _WEIGHT_UNIT_RE.search(text)
        if match and float(match.group(1)) > 0.0:
            weight = float(match.group(1))

    dims = {name: _find_dimension(text, kws) for name, kws in _DIMENSION_KEYWORDS.items()}
    if task == "dimensions" and all(v is None for v in dims.values()):
        # Keyword-free replies: exactly three numbers read as L, W, H.
        values = [v for v in _numeric_tokens(text) if v > 0.0]
        if len(values) == 3:
            dims = dict(zip(_DIMENSION_KEYWORDS, values))

    demanded_missing = {
        "type": target_type is None,
        "qualities": not qualities,
        "mounted_weapon": mounted is None,
        "weight": weight is None,
        "dimensions": any(dims[name] is None for name in _DIMENSION_KEYWORDS),
    }[task]
    return StructuredAnswer(
        raw_text=text,
        target_type=target_type,
        qualities=qualities or None,
        mounted_weapon=mounted,
        weight_tons=weight,
        length_m=dims["length_m"],
        width_m=dims["width_m"],
        height_m=dims["height_m"],
        unparseable=demanded_missing,
    )


# --- generator clients ------------------------------------------------------


class GeneratorClient(Protocol):
    def generate(self, context: AssembledContext) -> StructuredAnswer: ...


class StubGeneratorClient:
    """Local deterministic generator; zero network I/O."""

    def __init__(self, specs: Mapping[str, VehicleSpec]):
        self._specs = dict(specs)

    def generate(self, context: AssembledContext) -> StructuredAnswer:
        return stub_generate(context.hits, self._specs, context.task)


class RemoteGeneratorClient:
    """Client for a remote generator endpoint (POST /v1/generate).

    Sends the canonical context, receives ``{text}`` back, and parses it
    against the spec table vocabulary. Transport failures and 5xx
    responses retry with exponential backoff.
    """

    def __init__(
        self,
        endpoint: str,
        specs: Mapping[str, VehicleSpec],
        *,
        timeout: float = 30.0,
        max_attempts: int = 3,
        backoff_base: float = 0.25,
        transport: httpx.BaseTransport | None = None,
    ):
        if max_attempts < 1:
            raise ConfigError("max_attempts must be >= 1")
        self.endpoint = endpoint.rstrip("/")
        self.max_attempts = max_attempts
        self.backoff_base = backoff_base
        self._specs = dict(specs)
        self._client = httpx.Client(base_url=self.endpoint, timeout=timeout, transport=transport)

    def close(self) -> None:
        self._client.close()

    def __enter__(self) -> "RemoteGeneratorClient":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def generate(self, context: AssembledContext) -> StructuredAnswer:
        payload = {
            "template_version": TEMPLATE_VERSION,
            "question": context.question_text,
            "context_lines": list(context.exemplar_lines),
        }
        last_error = "no attempt made"
        for attempt in range(1, self.max_attempts + 1):
            try:
                response = self._client.post(
                    "/v1/generate",
                    json=payload,
                    headers={"x-ragatr-request-id": hashlib.blake2b(
                        context.question_text.encode(), digest_size=8).hexdigest()},
                )
            except httpx.HTTPError as exc:
                last_error = f"transport error: {exc}"
            else:
                if response.is_success:
                    try:
                        text = response.json()["text"]
                    except (ValueError, KeyError) as exc:
                        raise RemoteServiceError(f"generator response missing text: {exc}") from exc
                    return parse_structured_answer(text, context.task, self._specs)
                last_error = f"status {response.status_code}"
                if response.status_code < 500:
                    raise RemoteServiceError(f"generator returned {response.status_code}")
            if attempt < self.max_attempts:
                time.sleep(self.backoff_base * 2 ** (attempt - 1))
        raise RemoteServiceError(f"generator failed after {self.max_attempts} attempts ({last_error})")


def generate(client: GeneratorClient, context: AssembledContext) -> StructuredAnswer:
    """Ask ``client`` to answer the assembled context."""
    return client.generate(context)


def answer_pipeline(
    index: ExemplarIndex,
    question: VqaQuestion,
    client: GeneratorClient,
    specs: Mapping[str, VehicleSpec],
) -> StructuredAnswer:
    """retrieve -> assemble -> generate; errors carry the failing stage."""
    try:
        hits = index.knn(question.query_embedding, question.k, question.metadata_filter)
    except RagatrError as exc:
        raise PipelineError("retrieve", str(exc)) from exc
    if not hits:
        raise PipelineError("retrieve", f"query {question.query_id!r}: no candidates match the filter")
    try:
        context = assemble_context(question, hits, specs)
    except PipelineError:
        raise
    except RagatrError as exc:
        raise PipelineError("assemble", str(exc)) from exc
    try:
        return generate(client, context)
    except PipelineError:
        raise
    except RagatrError as exc:
        raise PipelineError("generate", str(exc)) from exc


def answer_batch(
    index: ExemplarIndex,
    questions: Iterable[VqaQuestion],
    client: GeneratorClient,
    specs: Mapping[str, VehicleSpec],
    *,
    max_parallel: int = 4,
) -> dict[str, StructuredAnswer]:
    """Answer many questions, up to ``max_parallel`` generator calls in
    flight; results key by query_id so completion order never matters."""
    questions = list(questions)
    if max_parallel < 1:
        raise ConfigError("max_parallel must be >= 1")
    if max_parallel == 1 or len(questions) <= 1:
        return {q.query_id: answer_pipeline(index, q, client, specs) for q in questions}
    with ThreadPoolExecutor(max_workers=max_parallel) as pool:
        futures = {q.query_id: pool.submit(answer_pipeline, index, q, client, specs) for q in questions}
        return {query_id: future.result() for query_id, future in futures.items()}
