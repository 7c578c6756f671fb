"""
Pipeline for the Financial QA Agent Framework.
Wires the agents into the four fixed configurations and records every
backend call of a question's run in a PipelineTrace.

    M0  closed book           [BG]
    M1  + evidence            [ER, BG]
    M2  + critique            [BG, XR, BG]
    M3  evidence + critique   [ER, BG, XR, BG]
"""

import logging
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, Optional, Tuple

from agents import (
    AgentError, CallSink, Critique, EvidenceBundle, GeneratorOutput, PromptLibrary,
    generate, render_context, retrieve_and_summarize, review,
)
from corpus_index import CorpusError, EmbeddingProvider, RetrievalConfig, VectorIndex
from llm_gateway import CallRecord, GatewayError
from question_bank import Question
from role_registry import RoleRegistry

logger = logging.getLogger(__name__)

TRACE_SCHEMA_VERSION = 1


class Mode(Enum):
    """Agent wiring. Values are the short names used in files and on the command line."""
    M0 = "M0"
    M1 = "M1"
    M2 = "M2"
    M3 = "M3"

    @classmethod
    def parse(cls, text: str) -> 'Mode':
        key = text.strip().upper().replace('-', '')
        try:
            return cls(key)
        except ValueError:
            raise ValueError(f"Unknown mode '{text}' (expected one of M0, M1, M2, M3)") from None

    @property
    def label(self) -> str:
        return MODE_LABELS[self]

    @property
    def uses_evidence(self) -> bool:
        return self in (Mode.M1, Mode.M3)

    @property
    def uses_critique(self) -> bool:
        return self in (Mode.M2, Mode.M3)


MODE_LABELS = {
    Mode.M0: "M-0 (Baseline)",
    Mode.M1: "M-1 (+Evidence)",
    Mode.M2: "M-2 (+Critique)",
    Mode.M3: "M-3 (Full)",
}

AGENT_SEQUENCES: Dict[Mode, Tuple[str, ...]] = {
    Mode.M0: ("BG",),
    Mode.M1: ("ER", "BG"),
    Mode.M2: ("BG", "XR", "BG"),
    Mode.M3: ("ER", "BG", "XR", "BG"),
}


def expected_calls(mode: Mode) -> int:
    return len(AGENT_SEQUENCES[mode])


class PipelineError(Exception):
    """A question's run failed. `trace` keeps the calls completed before the failure."""

    def __init__(self, message: str, trace: Optional['PipelineTrace'] = None):
        super().__init__(message)
        self.trace = trace


class MissingDependency(PipelineError):
    """Mode needs an index or embedding provider that was not supplied."""


class TraceInvariantError(PipelineError):
    """A completed trace does not match its mode's wiring."""


@dataclass
class PipelineDeps:
    backend: Any
    registry: RoleRegistry
    index: Optional[VectorIndex] = None
    provider: Optional[EmbeddingProvider] = None
    cfg: RetrievalConfig = field(default_factory=RetrievalConfig)
    prompts: Optional[PromptLibrary] = None
    include_bodies: bool = False

    def check(self, mode: Mode):
        """
        Raises:
            MissingDependency: An evidence mode lacks the index or provider
        """
        if mode.uses_evidence:
            missing = [name for name, value in (('index', self.index), ('provider', self.provider)) if value is None]
            if missing:
                raise MissingDependency(f"Mode {mode.value} needs an evidence {' and '.join(missing)}")


@dataclass(frozen=True)
class PipelineTrace:
    """
    Full record of one question's run. Completed traces are checked against
    their mode's call count, agent order and intermediate outputs.
    """
    question_id: str
    mode: Mode
    calls: Tuple[CallRecord, ...]
    final: Optional[GeneratorOutput] = None
    evidence: Optional[EvidenceBundle] = None
    initial: Optional[GeneratorOutput] = None
    critique: Optional[Critique] = None
    wall_ms: int = 0
    error: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, 'calls', tuple(self.calls))
        if self.wall_ms < 0:
            raise TraceInvariantError("wall_ms must be non-negative")
        if self.error is None:
            self._check_complete()

    def _check_complete(self):
        mode = self.mode
        agents = tuple(c.agent for c in self.calls)
        if len(agents) != expected_calls(mode):
            raise TraceInvariantError(
                f"{self.question_id}/{mode.value}: {len(agents)} calls, expected {expected_calls(mode)}"
            )
        if agents != AGENT_SEQUENCES[mode]:
            raise TraceInvariantError(f"{self.question_id}/{mode.value}: call order {list(agents)}")
        if self.final is None:
            raise TraceInvariantError(f"{self.question_id}/{mode.value}: completed trace has no final answer")
        if (self.initial is not None) != mode.uses_critique or (self.critique is not None) != mode.uses_critique:
            raise TraceInvariantError(f"{self.question_id}/{mode.value}: draft/critique presence does not match mode")
        if (self.evidence is not None) != mode.uses_evidence:
            raise TraceInvariantError(f"{self.question_id}/{mode.value}: evidence presence does not match mode")

    @property
    def ok(self) -> bool:
        return self.error is None

    @property
    def predicted(self) -> Optional[str]:
        return self.final.answer_letter if self.final is not None else None

    @property
    def prompt_tokens(self) -> int:
        return sum(c.prompt_tokens for c in self.calls)

    @property
    def completion_tokens(self) -> int:
        return sum(c.completion_tokens for c in self.calls)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'schema_version': TRACE_SCHEMA_VERSION,
            'question_id': self.question_id,
            'mode': self.mode.value,
            'status': 'ok' if self.ok else 'error',
            'error': self.error,
            'calls': [c.to_dict() for c in self.calls],
            'evidence': self.evidence.to_dict() if self.evidence else None,
            'initial': self.initial.to_dict() if self.initial else None,
            'critique': self.critique.to_dict() if self.critique else None,
            'final': self.final.to_dict() if self.final else None,
            'wall_ms': self.wall_ms,
        }


def run(question: Question, mode: Mode, deps: PipelineDeps) -> PipelineTrace:
    """
    Run one question through one mode.

    Calls are strictly sequential. The final answer comes from the last
    Base Generator call; an unparseable final reply is kept as an invalid
    prediction rather than retried.

    Args:
        question: Question to answer
        mode: Agent wiring
        deps: Backend, registry and (for M1/M3) the index and embedding provider

    Returns:
        Completed PipelineTrace

    Raises:
        MissingDependency: M1/M3 without index or provider
        PipelineError: A backend, retrieval or agent failure; `.trace` holds the partial record
    """
    deps.check(mode)
    sink = CallSink(include_bodies=deps.include_bodies)
    started = time.perf_counter()
    state: Dict[str, Any] = {}

    try:
        if mode.uses_evidence:
            state['evidence'] = retrieve_and_summarize(
                deps.backend, question, deps.index, deps.provider, deps.cfg, sink=sink, prompts=deps.prompts,
            )

        if mode.uses_critique:
            draft_context = render_context(state['evidence']) if 'evidence' in state else None
            state['initial'] = generate(deps.backend, question, draft_context, 0, sink=sink, prompts=deps.prompts)
            state['critique'] = review(
                deps.backend, question, state['initial'], deps.registry,
                evidence=state.get('evidence'), sink=sink, prompts=deps.prompts,
            )
            # M2 refines on (question, critique) only; M3 also keeps the evidence.
            final_context = render_context(state.get('evidence'), state['critique'])
            state['final'] = generate(deps.backend, question, final_context, 1, sink=sink, prompts=deps.prompts)
        else:
            context = render_context(state['evidence']) if 'evidence' in state else None
            state['final'] = generate(deps.backend, question, context, 0, sink=sink, prompts=deps.prompts)
    except (GatewayError, AgentError, CorpusError) as e:
        trace = PipelineTrace(
            question_id=question.id,
            mode=mode,
            calls=tuple(sink.records),
            wall_ms=_elapsed_ms(started),
            error=f"{type(e).__name__}: {e}",
            **state,
        )
        logger.error(f"{question.id}/{mode.value} failed after {len(sink.records)} call(s): {e}")
        raise PipelineError(f"{question.id}/{mode.value}: {type(e).__name__}: {e}", trace=trace) from e

    trace = PipelineTrace(
        question_id=question.id, mode=mode, calls=tuple(sink.records), wall_ms=_elapsed_ms(started), **state,
    )
    if trace.final.unparseable:
        logger.warning(f"{question.id}/{mode.value}: final answer unparseable, scored as invalid")
    return trace


def _elapsed_ms(started: float) -> int:
    return max(0, int((time.perf_counter() - started) * 1000))

