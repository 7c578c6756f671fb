"""
Agents for the Financial QA Agent Framework.

Three agents, each a prompt assembly step plus one chat call plus response parsing:
- Base Generator (BG): zero-shot chain-of-thought answer with a "Final Answer" line
- Evidence Retriever (ER): top-k retrieval over the corpus index, summarized by the LLM
- Expert Reviewer (XR): role-prompted critique of a draft answer

Agents hold no state; every call starts a fresh conversation.
"""

import logging
import os
import re
import string
from dataclasses import dataclass, field
from enum import Enum
from typing import TYPE_CHECKING, Any, Dict, FrozenSet, List, Optional, Sequence, Tuple

from corpus_index import EmbeddingProvider, RetrievalConfig, VectorIndex, embed, search
from llm_gateway import (
    CallRecord, CallTag, ChatMessage, ChatRequest, ChatRole, ContextOverflow, complete,
)
from role_registry import RoleRegistry, apply_role

if TYPE_CHECKING:
    from question_bank import Question

logger = logging.getLogger(__name__)

PROMPTS_DIR = os.path.join(os.path.dirname(__file__), '..', 'data', 'prompts')
NO_EVIDENCE = "[NO EVIDENCE]"
NO_CRITIQUE = "(no critique)"
LETTERS = ('A', 'B', 'C', 'D')

# Sentinel: "Final Answer" in any case, optional "is", ":" or "-", bold markers and "(" before the letter.
# A lowercase letter only counts when the line ends or ".", ")" or "*" follows it.
_FINAL_ANSWER = re.compile(
    r"(?i:final\s*answer)\s*(?i:is)?\s*[:\-]?\s*\**\s*\(?\s*(?:([A-D])\b|([a-d])(?=[.)*]|[ \t]*$))",
    re.MULTILINE,
)
_PAREN_LETTER = re.compile(r"\(([A-D])\)")
_LINE_LETTER = re.compile(r"^\s*([A-D])\.", re.MULTILINE)
_LIST_ITEM = re.compile(r"^\s*(?:\d+[.)]|[-*•])\s+(.*\S)\s*$")


class AgentRole(Enum):
    BASE_GENERATOR = "BG"
    EVIDENCE_RETRIEVER = "ER"
    EXPERT_REVIEWER = "XR"


class AgentError(Exception):
    """Base class for agent failures."""


class Unparseable(AgentError):
    """No answer letter could be extracted from a reply."""


class MalformedSummary(AgentError):
    """Evidence Retriever reply is neither a list nor the no-evidence sentinel."""


class BothAbsent(AgentError):
    """A context block needs evidence, a critique, or both."""


class TemplateError(AgentError):
    """Template file missing or a slot left unresolved."""


class ContextPart(Enum):
    HINT = "hint"
    EVIDENCE = "evidence"
    CRITIQUE = "critique"


@dataclass(frozen=True)
class PromptTemplate:
    """A named prompt body with ${slot} placeholders."""
    name: str
    body: str

    @classmethod
    def load(cls, name: str, directory: Optional[str] = None) -> 'PromptTemplate':
        path = os.path.join(directory or PROMPTS_DIR, f"{name}.txt")
        if not os.path.exists(path):
            raise TemplateError(f"Prompt template not found: {path}")
        with open(path, 'r', encoding='utf-8') as f:
            body = f.read()
        return cls(name=name, body=body[:-1] if body.endswith('\n') else body)

    @property
    def slots(self) -> List[str]:
        return string.Template(self.body).get_identifiers()

    def render(self, **values: str) -> str:
        try:
            return string.Template(self.body).substitute(values)
        except KeyError as e:
            raise TemplateError(f"Template '{self.name}' has unresolved slot {e}") from e
        except ValueError as e:
            raise TemplateError(f"Template '{self.name}' is malformed: {e}") from e


class PromptLibrary:
    """Loads every agent template once; shared read-only across workers."""

    NAMES = ('base_generator', 'evidence_retriever_system', 'evidence_retriever_user', 'expert_reviewer')

    def __init__(self, directory: Optional[str] = None):
        self.directory = directory or PROMPTS_DIR
        self.templates: Dict[str, PromptTemplate] = {
            name: PromptTemplate.load(name, self.directory) for name in self.NAMES
        }

    def __getitem__(self, name: str) -> PromptTemplate:
        return self.templates[name]


_default_library: Optional[PromptLibrary] = None


def default_prompts() -> PromptLibrary:
    global _default_library
    if _default_library is None:
        _default_library = PromptLibrary()
    return _default_library


@dataclass(frozen=True)
class GeneratorOutput:
    """Parsed Base Generator reply. answer_letter is None when the reply was unparseable."""
    answer_letter: Optional[str]
    reasoning: str
    raw: str
    evidence_dropped: int = 0

    @property
    def unparseable(self) -> bool:
        return self.answer_letter is None

    def to_dict(self) -> Dict[str, Any]:
        data = {'answer_letter': self.answer_letter, 'reasoning': self.reasoning, 'raw': self.raw}
        if self.evidence_dropped:
            data['evidence_dropped'] = self.evidence_dropped
        return data


@dataclass(frozen=True)
class EvidenceBundle:
    hint: Optional[str]
    summaries: Tuple[str, ...] = ()
    no_evidence: bool = False
    passage_ids: Tuple[str, ...] = ()
    scores: Tuple[float, ...] = ()
    malformed: bool = False

    def __post_init__(self):
        object.__setattr__(self, 'summaries', tuple(self.summaries))
        object.__setattr__(self, 'passage_ids', tuple(self.passage_ids))
        object.__setattr__(self, 'scores', tuple(self.scores))
        if self.no_evidence and self.summaries:
            raise ValueError("A no-evidence bundle cannot carry summaries")

    def with_summaries(self, summaries: Sequence[str]) -> 'EvidenceBundle':
        return EvidenceBundle(
            hint=self.hint, summaries=tuple(summaries), no_evidence=self.no_evidence,
            passage_ids=self.passage_ids, scores=self.scores, malformed=self.malformed,
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            'hint': self.hint,
            'summaries': list(self.summaries),
            'no_evidence': self.no_evidence,
            'passage_ids': list(self.passage_ids),
            'scores': [round(s, 6) for s in self.scores],
            'malformed': self.malformed,
        }


@dataclass(frozen=True)
class Critique:
    text: str
    reviewer_topic: str
    role_fallback: bool = False
    empty_reply: bool = False
    evidence_dropped: int = 0

    def __post_init__(self):
        if not self.text.strip():
            raise ValueError("Critique text must be non-empty")

    def to_dict(self) -> Dict[str, Any]:
        data = {
            'text': self.text,
            'reviewer_topic': self.reviewer_topic,
            'role_fallback': self.role_fallback,
            'empty_reply': self.empty_reply,
        }
        if self.evidence_dropped:
            data['evidence_dropped'] = self.evidence_dropped
        return data


@dataclass(frozen=True)
class ContextBlock:
    """Rendered hint + evidence + critique. Keeps its sources so evidence can be trimmed later."""
    rendered: str
    parts: FrozenSet[ContextPart]
    evidence: Optional[EvidenceBundle] = None
    critique: Optional[Critique] = None


@dataclass
class CallSink:
    """Collects CallRecords for a pipeline trace."""
    records: List[CallRecord] = field(default_factory=list)
    include_bodies: bool = False


def render_context(evidence: Optional[EvidenceBundle] = None, critique: Optional[Critique] = None) -> ContextBlock:
    """
    Render the context block fed to the Base Generator.

    Sections appear in the order hint, evidence, critique; absent parts are
    omitted, and a no-evidence bundle contributes only its hint.

    Args:
        evidence: Evidence Retriever output
        critique: Expert Reviewer output

    Returns:
        ContextBlock

    Raises:
        BothAbsent: Neither argument was given
    """
    if evidence is None and critique is None:
        raise BothAbsent("render_context needs evidence, a critique, or both")

    sections = []
    parts = set()
    if evidence is not None and evidence.hint and evidence.hint.strip():
        sections.append(f"Hint:\n{evidence.hint.strip()}")
        parts.add(ContextPart.HINT)
    if evidence is not None and not evidence.no_evidence and evidence.summaries:
        lines = [f"{i}. {s}" for i, s in enumerate(evidence.summaries, 1)]
        sections.append("Evidence:\n" + "\n".join(lines))
        parts.add(ContextPart.EVIDENCE)
    if critique is not None:
        sections.append(f"Expert critique:\n{critique.text.strip()}")
        parts.add(ContextPart.CRITIQUE)

    return ContextBlock(
        rendered="\n\n".join(sections),
        parts=frozenset(parts),
        evidence=evidence,
        critique=critique,
    )


def sentinel_line(letter: str) -> str:
    return f"Final Answer: {letter}"


def extract_answer(raw: str) -> str:
    """
    Extract the answer letter from a model reply.

    The last "Final Answer" sentinel wins. Without a sentinel, the last
    "(A)".."(D)" token or "A.".."D." at the start of a line is used.

    Args:
        raw: Model reply

    Returns:
        One of "A", "B", "C", "D"

    Raises:
        Unparseable: No letter could be found
    """
    matches = list(_FINAL_ANSWER.finditer(raw or ""))
    if matches:
        last = matches[-1]
        return last.group(1) or last.group(2).upper()

    fallback = list(_PAREN_LETTER.finditer(raw or "")) + list(_LINE_LETTER.finditer(raw or ""))
    if fallback:
        return max(fallback, key=lambda m: m.start(1)).group(1)
    raise Unparseable(f"No answer letter found in reply: {(raw or '')[:80]!r}")


def parse_generator_output(raw: str) -> GeneratorOutput:
    """Split a BG reply into answer letter and reasoning (reply minus the final-answer line)."""
    matches = list(_FINAL_ANSWER.finditer(raw))
    try:
        letter = extract_answer(raw)
    except Unparseable:
        logger.warning(f"Unparseable Base Generator reply: {raw[:80]!r}")
        return GeneratorOutput(answer_letter=None, reasoning=raw.strip(), raw=raw)

    if matches:
        last = matches[-1]
        line_start = raw.rfind('\n', 0, last.start()) + 1
        line_end = raw.find('\n', last.end())
        line_end = len(raw) if line_end == -1 else line_end + 1
        reasoning = (raw[:line_start] + raw[line_end:]).strip()
    else:
        reasoning = raw.strip()
    return GeneratorOutput(answer_letter=letter, reasoning=reasoning, raw=raw)


def parse_summaries(reply: str) -> List[str]:
    """
    Parse a numbered or bulleted list. Continuation lines join the previous item.

    Raises:
        MalformedSummary: The reply holds no list items
    """
    items: List[str] = []
    for line in reply.splitlines():
        match = _LIST_ITEM.match(line)
        if match:
            items.append(match.group(1).strip())
        elif line.strip() and items:
            items[-1] = f"{items[-1]} {line.strip()}"
    if not items:
        raise MalformedSummary(f"Evidence reply is not a list: {reply[:80]!r}")
    return items


def format_options(options: Dict[str, str]) -> str:
    return "\n".join(f"{letter}. {options[letter]}" for letter in LETTERS)


def _instructed_messages(supports_system_prompt: bool, instructions: str, user_body: str) -> List[ChatMessage]:
    if supports_system_prompt:
        return [ChatMessage(ChatRole.SYSTEM, instructions), ChatMessage(ChatRole.USER, user_body)]
    return [ChatMessage(ChatRole.USER, f"{instructions}\n\n{user_body}")]


def _call(backend, messages: List[ChatMessage], tag: CallTag, sink: Optional[CallSink]) -> str:
    request = ChatRequest(messages=messages, tag=tag)
    response = complete(backend, request)
    if sink is not None:
        sink.records.append(CallRecord.from_exchange(backend.profile, request, response, sink.include_bodies))
    return response.content


def generate(backend, question: 'Question', context: Optional[ContextBlock] = None, pass_index: int = 0,
             sink: Optional[CallSink] = None, prompts: Optional[PromptLibrary] = None) -> GeneratorOutput:
    """
    Run the Base Generator once, in a fresh conversation.

    On ContextOverflow, evidence summaries are dropped from last to first and
    the call retried; the critique and hint are never dropped.

    Args:
        backend: LLMGateway or ChatBackend
        question: Question to answer
        context: Optional context block (evidence and/or critique)
        pass_index: 0 for the draft pass, 1 for the refinement pass
        sink: Collector for the call record
        prompts: Template library (defaults to the bundled templates)

    Returns:
        GeneratorOutput; answer_letter is None when the reply had no extractable letter
    """
    if pass_index not in (0, 1):
        raise ValueError(f"pass_index must be 0 or 1, got {pass_index}")
    template = (prompts or default_prompts())['base_generator']
    tag = CallTag(AgentRole.BASE_GENERATOR.value, question.id, pass_index)
    dropped = 0

    while True:
        rendered = context.rendered if context is not None else ""
        body = template.render(
            context=f"{rendered}\n\n" if rendered else "",
            stem=question.stem,
            options=format_options(question.options),
        )
        try:
            raw = _call(backend, [ChatMessage(ChatRole.USER, body)], tag, sink)
            break
        except ContextOverflow:
            evidence = context.evidence if context is not None else None
            if evidence is None or not evidence.summaries:
                raise
            dropped += 1
            logger.warning(f"Context overflow on {tag}; dropping evidence summary {len(evidence.summaries)}")
            context = render_context(evidence.with_summaries(evidence.summaries[:-1]), context.critique)

    output = parse_generator_output(raw)
    if dropped:
        output = GeneratorOutput(output.answer_letter, output.reasoning, output.raw, evidence_dropped=dropped)
    return output


def retrieve_and_summarize(backend, question: 'Question', index: VectorIndex, provider: EmbeddingProvider,
                           cfg: Optional[RetrievalConfig] = None, sink: Optional[CallSink] = None,
                           prompts: Optional[PromptLibrary] = None) -> EvidenceBundle:
    """
    Run the Evidence Retriever: embed the stem, take the top-k passages and
    have the LLM summarize them.

    The hint is copied from the question and never used for retrieval.

    Args:
        backend: LLMGateway or ChatBackend
        question: Question being answered
        index: Corpus index
        provider: Embedding provider used to build the index
        cfg: Retrieval settings (k defaults to 3)
        sink: Collector for the call record
        prompts: Template library

    Returns:
        EvidenceBundle with summaries in relevance order
    """
    cfg = cfg or RetrievalConfig()
    prompts = prompts or default_prompts()
    query_vec = embed(provider, [question.stem])[0]
    hits = search(index, query_vec, cfg.k)

    chunks = "\n\n".join(f"[Chunk {i}] {passage.text}" for i, (passage, _) in enumerate(hits, 1))
    user_body = prompts['evidence_retriever_user'].render(stem=question.stem, chunks=chunks)
    messages = _instructed_messages(
        backend.profile.supports_system_prompt, prompts['evidence_retriever_system'].body, user_body,
    )
    reply = _call(backend, messages, CallTag(AgentRole.EVIDENCE_RETRIEVER.value, question.id, 0), sink)

    passage_ids = [p.passage_id for p, _ in hits]
    scores = [score for _, score in hits]
    if reply.strip() == NO_EVIDENCE:
        return EvidenceBundle(hint=question.hint, no_evidence=True, passage_ids=passage_ids, scores=scores)
    try:
        summaries = parse_summaries(reply)
        malformed = False
    except MalformedSummary:
        logger.warning(f"Evidence reply for {question.id} is not a list; keeping it as one summary")
        summaries = [reply.strip()] if reply.strip() else []
        malformed = True
    return EvidenceBundle(
        hint=question.hint, summaries=summaries, no_evidence=not summaries,
        passage_ids=passage_ids, scores=scores, malformed=malformed,
    )


def review(backend, question: 'Question', draft: GeneratorOutput, registry: RoleRegistry,
           evidence: Optional[EvidenceBundle] = None, sink: Optional[CallSink] = None,
           prompts: Optional[PromptLibrary] = None) -> Critique:
    """
    Run the Expert Reviewer on a draft answer.

    The topic's role prompt is applied here and nowhere else. On
    ContextOverflow, evidence summaries are dropped from last to first and the
    call retried, as for the Base Generator.

    Args:
        backend: LLMGateway or ChatBackend
        question: Question under review
        draft: First-pass generator output (an unparseable draft is still reviewed)
        registry: Role registry for the topic's expert persona
        evidence: Evidence summaries to include (full pipeline only)
        sink: Collector for the call record
        prompts: Template library

    Returns:
        Critique; an empty reply becomes "(no critique)" with empty_reply set
    """
    role = registry.resolve_role(question.topic)
    template = (prompts or default_prompts())['expert_reviewer']
    tag = CallTag(AgentRole.EXPERT_REVIEWER.value, question.id, 0)
    summaries = tuple(evidence.summaries) if evidence is not None else ()
    dropped = 0

    while True:
        evidence_section = ""
        if summaries:
            lines = "\n".join(f"{i}. {s}" for i, s in enumerate(summaries, 1))
            evidence_section = f"\n\nEvidence:\n{lines}"
        body = template.render(
            stem=question.stem,
            options=format_options(question.options),
            answer=draft.answer_letter or "(no answer letter given)",
            reasoning=draft.reasoning or draft.raw or "(no reasoning given)",
            evidence=evidence_section,
        )
        try:
            reply = _call(backend, apply_role(backend.profile, role, body), tag, sink)
            break
        except ContextOverflow:
            if not summaries:
                raise
            dropped += 1
            logger.warning(f"Context overflow on {tag}; dropping evidence summary {len(summaries)}")
            summaries = summaries[:-1]

    if not reply.strip():
        logger.warning(f"Expert Reviewer returned an empty critique for {question.id}")
        return Critique(text=NO_CRITIQUE, reviewer_topic=role.topic, role_fallback=role.fallback,
                        empty_reply=True, evidence_dropped=dropped)
    return Critique(text=reply.strip(), reviewer_topic=role.topic, role_fallback=role.fallback,
                    evidence_dropped=dropped)
