"""Four-stage graph-grounded chain-of-thought annotation.

Each record is annotated by calling a vision-language backend four times:

1. traffic risks (free text)
2. accident-causing road structures (labels from the vocabulary)
3. accident process (free text)
4. infrastructure improvements (labels from the vocabulary)

Every prompt embeds the serialized outputs of the stages it depends on. The
labels parsed from stages 2 and 4 become the nodes of the record's instance
graph, joined by every structure -> improvement edge; the reference filter
later removes the pairs the ontology does not support.
"""

from __future__ import annotations

import enum
import hashlib
import logging
import random
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Protocol, Sequence

import requests

from .graph_filter import FilterVerdict
from .ontology import Module, NodeRef, OntologyConfig, TypedDiGraph

log = logging.getLogger(__name__)


class Stage(enum.IntEnum):
    TRAFFIC_RISKS = 1
    ROAD_STRUCTURES = 2
    ACCIDENT_PROCESS = 3
    IMPROVEMENTS = 4

    @property
    def title(self) -> str:
        return _STAGE_TITLES[self]

    @property
    def module(self) -> Module | None:
        """Vocabulary module a label stage selects from; None for free text."""
        return _STAGE_MODULES.get(self)

    @property
    def dependencies(self) -> tuple["Stage", ...]:
        return _STAGE_DEPENDENCIES[self]


_STAGE_TITLES = {
    Stage.TRAFFIC_RISKS: "TrafficRisks",
    Stage.ROAD_STRUCTURES: "RoadStructures",
    Stage.ACCIDENT_PROCESS: "AccidentProcess",
    Stage.IMPROVEMENTS: "Improvements",
}
_STAGE_MODULES = {
    Stage.ROAD_STRUCTURES: Module.ROAD_STRUCTURE,
    Stage.IMPROVEMENTS: Module.IMPROVEMENT,
}
_STAGE_DEPENDENCIES = {
    Stage.TRAFFIC_RISKS: (),
    Stage.ROAD_STRUCTURES: (Stage.TRAFFIC_RISKS,),
    Stage.ACCIDENT_PROCESS: (Stage.TRAFFIC_RISKS, Stage.ROAD_STRUCTURES),
    Stage.IMPROVEMENTS: (Stage.ROAD_STRUCTURES, Stage.ACCIDENT_PROCESS),
}

# Reconstructed template; only its four-stage structure is fixed.
STAGE_INSTRUCTIONS = {
    Stage.TRAFFIC_RISKS: (
        "You are a road traffic safety engineer. Describe the static traffic risks "
        "visible in this driving-scene image. Ignore moving vehicles, traffic volume "
        "and other time-dependent factors."
    ),
    Stage.ROAD_STRUCTURES: (
        "Using the image and the traffic risks above, identify the road structures "
        "that could cause an accident here. Select every matching identifier from the "
        "list below. Answer with identifiers only, separated by commas or newlines."
    ),
    Stage.ACCIDENT_PROCESS: (
        "Using the traffic risks and road structures above, explain step by step how "
        "an accident at this location would unfold."
    ),
    Stage.IMPROVEMENTS: (
        "Using the road structures and the accident process above, choose the "
        "infrastructure improvements that would prevent the accident. Select every "
        "applicable identifier from the list below. Answer with identifiers only, "
        "separated by commas or newlines."
    ),
}


class StageOrderError(RuntimeError):
    """A stage was requested before its predecessor was recorded."""


class BackendError(RuntimeError):
    """Transport-level failure talking to a backend (after retries)."""


class StageParseError(ValueError):
    pass


@dataclass(frozen=True)
class StageOutput:
    stage: Stage
    raw_text: str
    parsed_labels: frozenset[NodeRef] = frozenset()
    unknown_count: int = 0

    def __post_init__(self) -> None:
        module = self.stage.module
        if module is None and self.parsed_labels:
            raise ValueError(f"free-text stage {self.stage.title} cannot carry labels")
        if any(n.module is not module for n in self.parsed_labels):
            raise ValueError(f"stage {self.stage.title} labels must be {module}")


@dataclass(frozen=True)
class BackendRequest:
    record_id: str
    stage: Stage
    image_ref: str
    prompt_text: str

    def __post_init__(self) -> None:
        if not self.prompt_text:
            raise ValueError("prompt_text must be nonempty")

    def to_json(self) -> dict:
        return {
            "record_id": self.record_id,
            "stage": int(self.stage),
            "image_ref": self.image_ref,
            "prompt": self.prompt_text,
        }


@dataclass(frozen=True)
class BackendResponse:
    raw_text: str
    backend_id: str
    latency_ms: float = 0.0


class Backend(Protocol):
    def complete(self, request: BackendRequest) -> BackendResponse: ...


@dataclass(frozen=True)
class Transcript:
    stage: Stage
    prompt: str
    response: str
    backend_id: str
    latency_ms: float


@dataclass(frozen=True)
class AnnotationRecord:
    record_id: str
    image_ref: str
    stages: tuple[StageOutput, ...] = ()
    instance_graph: TypedDiGraph = field(default_factory=TypedDiGraph)
    verdict: FilterVerdict | None = None
    final_structures: frozenset[str] = frozenset()
    final_improvements: frozenset[str] = frozenset()
    status: str = "ok"  # "ok" or "failed"
    failure: dict | None = None
    transcripts: tuple[Transcript, ...] = field(default=(), compare=False)

    @property
    def failed(self) -> bool:
        return self.status == "failed"

    @property
    def excluded(self) -> bool:
        return self.verdict is not None and not self.verdict.kept

    def stage(self, stage: Stage) -> StageOutput | None:
        for out in self.stages:
            if out.stage is stage:
                return out
        return None

    @property
    def risk_text(self) -> str:
        """Stage-1 text; the textual input of the classifier."""
        out = self.stage(Stage.TRAFFIC_RISKS)
        return out.raw_text if out else ""

    def with_verdict(self, verdict: FilterVerdict) -> "AnnotationRecord":
        g = verdict.filtered_graph
        return replace(
            self,
            verdict=verdict,
            final_structures=g.labels(Module.ROAD_STRUCTURE) if verdict.kept else frozenset(),
            final_improvements=g.labels(Module.IMPROVEMENT) if verdict.kept else frozenset(),
        )


# ---------------------------------------------------------------------------
# prompt serialization and parsing


def _check_history(history: Sequence[StageOutput]) -> None:
    for expected, out in enumerate(history, start=1):
        if out.stage != expected:
            raise StageOrderError(
                f"stage history out of order: position {expected} holds stage {int(out.stage)}"
            )


def serialize_graph_prompt(stage_outputs: Sequence[StageOutput], cfg: OntologyConfig) -> str:
    """Render stage outputs as a graph-style context block.

    Free-text stages are quoted line by line (``> ``). Label stages become
    ``node: <label>`` lines in vocabulary order. When both label stages are
    present, the candidate structure -> improvement edges follow as
    ``A -> B`` lines. Empty input renders as the empty string.
    """
    blocks = []
    structures: list[NodeRef] = []
    improvements: list[NodeRef] = []
    for out in sorted(stage_outputs, key=lambda o: o.stage):
        lines = [f"## Stage {int(out.stage)}: {out.stage.title}"]
        if out.stage.module is None:
            lines += ["> " + line for line in out.raw_text.split("\n")]
        else:
            nodes = cfg.sorted_nodes(out.parsed_labels)
            lines += [f"node: {n.label}" for n in nodes] or ["(none)"]
            if out.stage.module is Module.ROAD_STRUCTURE:
                structures = nodes
            else:
                improvements = nodes
        blocks.append("\n".join(lines))
    if structures and improvements:
        edge_lines = [f"{s.label} -> {i.label}" for s in structures for i in improvements]
        blocks.append("\n".join(["## Graph"] + edge_lines))
    return "\n\n".join(blocks)


def build_stage_prompt(stage: Stage, history: Sequence[StageOutput], cfg: OntologyConfig) -> str:
    """Full prompt for ``stage`` given the stages recorded so far."""
    _check_history(history)
    if len(history) != int(stage) - 1:
        raise StageOrderError(
            f"stage {int(stage)} requested with {len(history)} stage(s) recorded"
        )
    deps = [out for out in history if out.stage in stage.dependencies]
    parts = [STAGE_INSTRUCTIONS[stage]]
    context = serialize_graph_prompt(deps, cfg)
    if context:
        parts.append("# Context\n" + context)
    if stage.module is not None:
        choices = "\n".join(f"- {label}" for label in cfg.vocabulary.labels(stage.module))
        parts.append("# Choices\n" + choices)
    return "\n\n".join(parts)


@dataclass(frozen=True)
class ParsedLabels:
    labels: frozenset[NodeRef]
    unknown_count: int


_SPLIT = re.compile(r"[,\n]")
_BULLET = re.compile(r"^(?:[-*•]|\d+[.)])\s+")


def parse_label_stage(raw_text: str, module: Module, cfg: OntologyConfig) -> ParsedLabels:
    """Exact-identifier extraction from comma- or line-delimited text.

    Surrounding whitespace and list bullets are stripped; anything that is not
    a label of ``module`` counts as unknown. Never raises.
    """
    found = set()
    unknown = 0
    for token in _SPLIT.split(raw_text):
        token = _BULLET.sub("", token.strip()).strip()
        if not token:
            continue
        if cfg.vocabulary.contains(module, token):
            found.add(NodeRef(module, token))
        else:
            unknown += 1
    return ParsedLabels(frozenset(found), unknown)


def instance_graph(stages: Sequence[StageOutput]) -> TypedDiGraph:
    """Complete bipartite graph between parsed structures and improvements."""
    structures: frozenset[NodeRef] = frozenset()
    improvements: frozenset[NodeRef] = frozenset()
    for out in stages:
        if out.stage is Stage.ROAD_STRUCTURES:
            structures = out.parsed_labels
        elif out.stage is Stage.IMPROVEMENTS:
            improvements = out.parsed_labels
    edges = frozenset((s, i) for s in structures for i in improvements)
    return TypedDiGraph(structures | improvements, edges)


# ---------------------------------------------------------------------------
# orchestration


def run_g2cot(record_id: str, image_ref: str, cfg: OntologyConfig, backend: Backend) -> AnnotationRecord:
    """Annotate one image. Backend and parse failures mark the record failed."""
    history: list[StageOutput] = []
    transcripts: list[Transcript] = []
    for stage in Stage:
        prompt = build_stage_prompt(stage, history, cfg)
        request = BackendRequest(record_id, stage, image_ref, prompt)
        try:
            response = backend.complete(request)
            if not response.raw_text.strip():
                raise StageParseError(f"empty response at stage {int(stage)}")
        except BackendError as exc:
            log.warning("record %s: backend failure at stage %d: %s", record_id, stage, exc)
            return _failed(record_id, image_ref, history, transcripts, stage, "transport", str(exc))
        except StageParseError as exc:
            return _failed(record_id, image_ref, history, transcripts, stage, "parse", str(exc))
        transcripts.append(
            Transcript(stage, prompt, response.raw_text, response.backend_id, response.latency_ms)
        )
        if stage.module is None:
            history.append(StageOutput(stage, response.raw_text))
        else:
            parsed = parse_label_stage(response.raw_text, stage.module, cfg)
            history.append(StageOutput(stage, response.raw_text, parsed.labels, parsed.unknown_count))
    return AnnotationRecord(
        record_id=record_id,
        image_ref=image_ref,
        stages=tuple(history),
        instance_graph=instance_graph(history),
        transcripts=tuple(transcripts),
    )


def _failed(record_id, image_ref, history, transcripts, stage, kind, message) -> AnnotationRecord:
    return AnnotationRecord(
        record_id=record_id,
        image_ref=image_ref,
        stages=tuple(history),
        instance_graph=instance_graph(history),
        status="failed",
        failure={"stage": int(stage), "kind": kind, "message": message},
        transcripts=tuple(transcripts),
    )


def annotate_many(
    items: Iterable[tuple[str, str]],
    cfg: OntologyConfig,
    backend: Backend,
    jobs: int = 1,
) -> list[AnnotationRecord]:
    """Run ``run_g2cot`` over (record_id, image_ref) pairs; output keeps input order."""
    items = list(items)
    if jobs <= 1:
        return [run_g2cot(rid, ref, cfg, backend) for rid, ref in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(lambda it: run_g2cot(it[0], it[1], cfg, backend), items))


# ---------------------------------------------------------------------------
# backends


def _derived_rng(*parts: object) -> random.Random:
    digest = hashlib.sha256("|".join(map(str, parts)).encode("utf-8")).digest()
    return random.Random(int.from_bytes(digest[:8], "little"))


OFF_VOCABULARY_TOKENS = (
    "install_floating_crosswalk",
    "repaint_the_sky",
    "add_roundabout_tunnel",
    "remove_all_lanes",
    "magnetic_guardrail",
)


@dataclass(frozen=True)
class MockPlan:
    """The latent answer a mock backend gives for one record."""

    corrupted: bool
    mode: str  # "clean", "wrong_pairing" or "off_vocabulary"
    structures: tuple[str, ...]
    improvements: tuple[str, ...]


class MockBackend:
    """Deterministic in-process stand-in for a VLM.

    Generative process per record (driven only by ``seed`` and ``record_id``):

    * With probability ``noise`` the record is corrupted, otherwise clean.
    * Clean: one structure (two with probability 0.3) is drawn from those that
      have at least one reference edge. For each, every linked improvement is
      kept with probability 0.7, with at least one forced. With probability
      0.25 one improvement linked to none of the chosen structures is added as
      a spurious extra. At least one emitted pair is a reference edge, so the
      record always survives filtering.
    * Corrupted, ``wrong_pairing`` (probability 0.5): one structure with an
      unlinked improvement is drawn and stage 4 names one or two improvements
      it is not linked to. ``off_vocabulary`` (probability 0.5): stage 4 names
      only tokens outside the vocabulary. No reference edge survives, so the
      record is always discarded.

    The discard probability of a record is therefore exactly ``noise``.
    Stage texts are rendered with an RNG keyed on (seed, record_id, stage), so
    the backend keeps no mutable state and is safe to share across threads.
    """

    P_SECOND_STRUCTURE = 0.3
    P_KEEP_LINKED = 0.7
    P_SPURIOUS = 0.25
    P_WRONG_PAIRING = 0.5

    def __init__(self, seed: int, noise: float, cfg: OntologyConfig):
        if not 0.0 <= noise <= 1.0:
            raise ValueError(f"noise must lie in [0, 1], got {noise}")
        self.seed = seed
        self.noise = noise
        self.cfg = cfg
        self.backend_id = f"mock:{seed}:{noise:g}"
        vocab = cfg.vocabulary
        self._linkable = [s for s in vocab.structures if cfg.neighbours(s)]
        self._mislinkable = [
            s for s in vocab.structures if len(cfg.neighbours(s)) < len(vocab.improvements)
        ]
        known = {*vocab.structures, *vocab.improvements}
        self._off_vocabulary = [t for t in OFF_VOCABULARY_TOKENS if t not in known]
        if not self._linkable:
            raise ValueError("ontology has no reference edges; mock cannot produce clean records")
        if noise > 0 and not self._mislinkable:
            raise ValueError("every structure links to every improvement; cannot corrupt records")

    def expected_discard_rate(self) -> float:
        return self.noise

    def plan(self, record_id: str) -> MockPlan:
        rng = _derived_rng("plan", self.seed, record_id)
        cfg = self.cfg
        if rng.random() < self.noise:
            s = rng.choice(self._mislinkable)
            if rng.random() < self.P_WRONG_PAIRING:
                linked = set(cfg.neighbours(s))
                pool = [i for i in cfg.vocabulary.improvements if i not in linked]
                k = min(len(pool), rng.choice((1, 2)))
                return MockPlan(True, "wrong_pairing", (s,), tuple(rng.sample(pool, k)))
            k = rng.choice((1, 2))
            return MockPlan(True, "off_vocabulary", (s,), tuple(rng.sample(self._off_vocabulary, k)))
        k = 2 if (len(self._linkable) > 1 and rng.random() < self.P_SECOND_STRUCTURE) else 1
        structures = rng.sample(self._linkable, k)
        improvements: list[str] = []
        for s in structures:
            linked = cfg.neighbours(s)
            chosen = [i for i in linked if rng.random() < self.P_KEEP_LINKED]
            if not chosen:
                chosen = [rng.choice(linked)]
            improvements += [i for i in chosen if i not in improvements]
        if rng.random() < self.P_SPURIOUS:
            covered = {i for s in structures for i in cfg.neighbours(s)}
            pool = [i for i in cfg.vocabulary.improvements if i not in covered]
            if pool:
                improvements.append(rng.choice(pool))
        return MockPlan(False, "clean", tuple(structures), tuple(improvements))

    def complete(self, request: BackendRequest) -> BackendResponse:
        plan = self.plan(request.record_id)
        rng = _derived_rng("text", self.seed, request.record_id, int(request.stage))
        stage = request.stage
        if stage is Stage.TRAFFIC_RISKS:
            text = "\n".join(
                f"Risk: {s.replace('_', ' ')} limits safe driving at this location."
                for s in plan.structures
            )
        elif stage is Stage.ACCIDENT_PROCESS:
            cause = " and ".join(s.replace("_", " ") for s in plan.structures)
            text = (
                f"A driver approaching the {cause} reacts late; "
                f"{rng.choice(('a rear-end', 'a side', 'a pedestrian'))} collision follows."
            )
        else:
            labels = list(plan.structures if stage is Stage.ROAD_STRUCTURES else plan.improvements)
            rng.shuffle(labels)
            text = (", " if rng.random() < 0.5 else "\n").join(labels)
        return BackendResponse(text, self.backend_id, 0.0)


class HttpBackend:
    """JSON-over-HTTP VLM backend.

    POSTs ``{record_id, stage, image_ref, prompt}`` and expects ``{text}``.
    Connection errors, timeouts, non-2xx responses and malformed bodies are
    retried with exponential backoff and jitter; the last failure is raised
    as ``BackendError``.
    """

    def __init__(
        self,
        url: str,
        attempts: int = 3,
        base_delay: float = 0.5,
        max_delay: float = 8.0,
        timeout: float = 60.0,
        sleep: Callable[[float], None] = time.sleep,
        jitter_seed: int | None = None,
    ):
        if attempts < 1:
            raise ValueError("attempts must be >= 1")
        self.url = url
        self.attempts = attempts
        self.base_delay = base_delay
        self.max_delay = max_delay
        self.timeout = timeout
        self.backend_id = f"http:{url}"
        self._sleep = sleep
        self._jitter = random.Random(jitter_seed)

    def backoff(self, attempt: int) -> float:
        delay = min(self.max_delay, self.base_delay * (2 ** attempt))
        return delay + self._jitter.uniform(0, delay * 0.1)

    def complete(self, request: BackendRequest) -> BackendResponse:
        last: Exception | None = None
        for attempt in range(self.attempts):
            if attempt:
                self._sleep(self.backoff(attempt - 1))
            start = time.perf_counter()
            try:
                resp = requests.post(self.url, json=request.to_json(), timeout=self.timeout)
                if not 200 <= resp.status_code < 300:
                    raise BackendError(f"HTTP {resp.status_code} from {self.url}")
                body = resp.json()
                text = body["text"]
                if not isinstance(text, str):
                    raise BackendError("response field 'text' is not a string")
            except (requests.RequestException, ValueError, KeyError, TypeError, BackendError) as exc:
                last = exc
                log.info("backend attempt %d/%d failed: %s", attempt + 1, self.attempts, exc)
                continue
            latency = (time.perf_counter() - start) * 1000.0
            return BackendResponse(text, self.backend_id, latency)
        raise BackendError(f"{self.attempts} attempt(s) failed: {last}") from last


def mock_backend(seed: int, noise: float, cfg: OntologyConfig) -> MockBackend:
    return MockBackend(seed, noise, cfg)


def backend_from_spec(spec: str, cfg: OntologyConfig) -> Backend:
    """``mock:<seed>:<noise>`` or an http(s) URL."""
    if spec.startswith("mock:"):
        parts = spec.split(":")
        if len(parts) != 3:
            raise ValueError(f"mock backend spec must be mock:<seed>:<noise>, got {spec!r}")
        return MockBackend(int(parts[1]), float(parts[2]), cfg)
    if spec.startswith(("http://", "https://")):
        return HttpBackend(spec)
    raise ValueError(f"unrecognised backend spec {spec!r}")
