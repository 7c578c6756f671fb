"""
Question Bank for the Financial QA Agent Framework.
Loads and validates multiple-choice question sets, linearizes tables into
bullet text, and converts free-response questions into four-option MCQs with
LLM-proposed distractors.
"""

import json
import logging
import os
import re
from dataclasses import dataclass, field
from decimal import Decimal, InvalidOperation
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from agents import LETTERS, PromptTemplate
from llm_gateway import CallTag, ChatMessage, ChatRequest, ChatRole, complete
from role_registry import RoleRegistry

logger = logging.getLogger(__name__)

DISTRACTOR_AGENT = "MCQ"
UNIT_WORDS = {'thousand': Decimal(1000), 'million': Decimal(10) ** 6, 'billion': Decimal(10) ** 9}

_NUMBER = re.compile(r"(?<![\d.])-?\d+(?:\.\d+)?(?!\.?\d)")
_UNIT_AMOUNT = re.compile(r"(?<![\d.])(-?\d+(?:\.\d+)?)\s*(thousand|million|billion)\b")
_DISPLAY_UNIT_AMOUNT = re.compile(r"^(\$?)\s*(-?\d[\d,]*(?:\.\d+)?)\s*(thousand|million|billion)\b", re.IGNORECASE)
_DISTRACTOR_ITEM = re.compile(r"^\s*(?:\d+[.)]|[-*•]|[A-D][.)])\s+(.*\S)\s*$")


class QuestionBankError(Exception):
    """Base class for question-bank failures."""


class SchemaError(QuestionBankError):
    """A question file violates the schema. `locator` is a JSON-pointer-style path."""

    def __init__(self, message: str, locator: str = "", question_id: Optional[str] = None):
        self.detail = message
        self.locator = locator
        self.question_id = question_id
        prefix = f"{locator}: " if locator else ""
        suffix = f" (question {question_id})" if question_id else ""
        super().__init__(f"{prefix}{message}{suffix}")


class DuplicateId(SchemaError):
    """Two questions share an id."""


class EmptyTable(QuestionBankError):
    """A table with no rows cannot be linearized."""


class DistractorCollision(QuestionBankError):
    """Distractors repeat each other or the correct answer."""


class MalformedDistractors(QuestionBankError):
    """The distractor reply did not hold exactly three options."""


@dataclass(frozen=True)
class Question:
    """One multiple-choice item with options A-D."""
    id: str
    topic: str
    stem: str
    options: Dict[str, str]
    ground_truth: str
    hint: Optional[str] = None
    explanation: Optional[str] = None
    category: Optional[str] = None
    topic_registered: bool = True

    def __post_init__(self):
        if set(self.options) != set(LETTERS):
            raise SchemaError(f"options must have exactly the keys A-D, got {sorted(self.options)}",
                              "/options", self.id)
        texts = [normalize_answer(self.options[k]) for k in LETTERS]
        if len(set(texts)) != 4:
            raise SchemaError("option texts must be pairwise distinct", "/options", self.id)
        if self.ground_truth not in LETTERS:
            raise SchemaError(f"ground_truth must be one of A-D, got {self.ground_truth!r}",
                              "/ground_truth", self.id)

    @property
    def correct_text(self) -> str:
        return self.options[self.ground_truth]

    def to_dict(self) -> Dict[str, Any]:
        data = {
            'id': self.id,
            'topic': self.topic,
            'stem': self.stem,
            'options': {k: self.options[k] for k in LETTERS},
            'ground_truth': self.ground_truth,
        }
        if self.category:
            data['category'] = self.category
        if self.hint:
            data['hint'] = self.hint
        if self.explanation:
            data['explanation'] = self.explanation
        return data


@dataclass
class QuestionSet:
    name: str
    questions: List[Question] = field(default_factory=list)
    source: str = ""

    def __post_init__(self):
        seen = set()
        for i, question in enumerate(self.questions):
            if question.id in seen:
                raise DuplicateId(f"duplicate question id {question.id!r}", f"/{i}/id", question.id)
            seen.add(question.id)

    def __len__(self) -> int:
        return len(self.questions)

    def __iter__(self):
        return iter(self.questions)

    def get(self, question_id: str) -> Question:
        for question in self.questions:
            if question.id == question_id:
                return question
        raise KeyError(f"No question with id {question_id!r} in set {self.name!r}")


@dataclass(frozen=True)
class TableSpec:
    column_names: Tuple[str, ...]
    rows: Tuple[Tuple[str, ...], ...]
    caption: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, 'column_names', tuple(self.column_names))
        object.__setattr__(self, 'rows', tuple(tuple(r) for r in self.rows))
        for i, row in enumerate(self.rows):
            if len(row) != len(self.column_names):
                raise SchemaError(
                    f"row has {len(row)} cells but the table has {len(self.column_names)} columns",
                    f"/table/rows/{i}",
                )

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'TableSpec':
        return cls(
            column_names=data.get('columns') or data.get('column_names') or [],
            rows=data.get('rows') or [],
            caption=data.get('caption'),
        )


def _require_text(record: Dict[str, Any], key: str, locator: str, question_id: Optional[str],
                  optional: bool = False) -> Optional[str]:
    value = record.get(key)
    if value is None and optional:
        return None
    if not isinstance(value, str) or not value.strip():
        raise SchemaError(f"'{key}' must be a non-empty string", f"{locator}/{key}", question_id)
    return value.strip()


def question_from_dict(record: Dict[str, Any], locator: str = "",
                       registry: Optional[RoleRegistry] = None) -> Question:
    """
    Validate one question record and build a Question.

    Args:
        record: Parsed JSON object
        locator: JSON-pointer prefix used in error messages
        registry: When given, the category is derived from the topic

    Raises:
        SchemaError: On any schema violation
    """
    if not isinstance(record, dict):
        raise SchemaError("question must be an object", locator)
    question_id = record.get('id')
    if not isinstance(question_id, (str, int)) or str(question_id).strip() == "":
        raise SchemaError("'id' is required", f"{locator}/id")
    question_id = str(question_id)

    topic = _require_text(record, 'topic', locator, question_id)
    stem = _require_text(record, 'stem', locator, question_id)
    options = record.get('options')
    if not isinstance(options, dict) or len(options) != 4 or set(options) != set(LETTERS):
        raise SchemaError("options must map exactly A, B, C, D to text", f"{locator}/options", question_id)
    for letter in LETTERS:
        if not isinstance(options[letter], str) or not options[letter].strip():
            raise SchemaError("option text must be non-empty", f"{locator}/options/{letter}", question_id)
    ground_truth = record.get('ground_truth')
    if ground_truth not in LETTERS:
        raise SchemaError(f"ground_truth must be one of A-D, got {ground_truth!r}",
                          f"{locator}/ground_truth", question_id)

    category = record.get('category')
    registered = True
    if registry is not None:
        entry = registry.entry(topic)
        if entry is None:
            registered = False
            logger.warning(f"Question {question_id}: topic '{topic}' is not registered")
        else:
            category = entry.category.value

    try:
        return Question(
            id=question_id,
            topic=topic,
            stem=stem,
            options={k: options[k].strip() for k in LETTERS},
            ground_truth=ground_truth,
            hint=_require_text(record, 'hint', locator, question_id, optional=True),
            explanation=_require_text(record, 'explanation', locator, question_id, optional=True),
            category=category,
            topic_registered=registered,
        )
    except SchemaError as e:
        raise SchemaError(e.detail, f"{locator}{e.locator}", question_id) from e


def load_question_set(path: str, registry: Optional[RoleRegistry] = None) -> QuestionSet:
    """
    Load and validate a question set.

    The file is a JSON array of questions, or an object with "name" and
    "questions" keys.

    Args:
        path: Path to the JSON file
        registry: Role registry used to derive categories

    Returns:
        QuestionSet

    Raises:
        SchemaError: Unreadable file or invalid question (with locator)
        DuplicateId: Two questions share an id
    """
    if not os.path.exists(path):
        raise SchemaError(f"question file not found: {path}")
    try:
        with open(path, 'r', encoding='utf-8') as f:
            raw = json.load(f)
    except ValueError as e:
        raise SchemaError(f"not valid JSON: {e}") from e

    name = os.path.splitext(os.path.basename(path))[0]
    prefix = ""
    if isinstance(raw, dict):
        name = raw.get('name', name)
        raw = raw.get('questions')
        prefix = "/questions"
    if not isinstance(raw, list):
        raise SchemaError("expected a JSON array of questions", prefix or "/")

    questions = [question_from_dict(record, f"{prefix}/{i}", registry) for i, record in enumerate(raw)]
    question_set = QuestionSet(name=name, questions=questions, source=path)
    logger.info(f"Loaded {len(question_set)} questions from {path}")
    return question_set


def save_question_set(question_set: QuestionSet, path: str):
    payload = {
        'name': question_set.name,
        'questions': [q.to_dict() for q in question_set.questions],
    }
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(payload, f, indent=2, ensure_ascii=False)
        f.write('\n')


def linearize_table(table: TableSpec) -> str:
    """
    Render a table as bullet lines, one per row.

    Two-column rows become "• <label>: <value>"; wider rows become
    "• <label>: <col>: <value>; <col>: <value>".

    Raises:
        EmptyTable: The table has no rows
    """
    if not table.rows:
        raise EmptyTable("Cannot linearize a table with no rows")
    lines = []
    if table.caption:
        lines.append(table.caption.strip())
    for row in table.rows:
        label, rest = row[0].strip(), row[1:]
        if len(rest) == 1:
            lines.append(f"• {label}: {rest[0].strip()}")
        elif not rest:
            lines.append(f"• {label}")
        else:
            cells = "; ".join(f"{col.strip()}: {value.strip()}" for col, value in zip(table.column_names[1:], rest))
            lines.append(f"• {label}: {cells}")
    return "\n".join(lines)


def compose_stem(preamble: Optional[str], table: Optional[TableSpec], question: str) -> str:
    """Assemble a converted stem: preamble, linearized table, then the question."""
    head = [p for p in (preamble and preamble.strip(), table and linearize_table(table)) if p]
    if not head:
        return question.strip()
    return "\n".join(head) + "\n\n" + question.strip()


def _canonical_number(text: str) -> str:
    try:
        value = Decimal(text)
    except InvalidOperation:
        return text
    return format(value.normalize(), 'f')


def normalize_answer(text: str) -> str:
    """
    Canonical form used only for collision checks: trimmed, case-folded,
    "$" and "," removed, "<n> thousand/million/billion" expanded to digits.
    """
    s = ' '.join(text.strip().casefold().split())
    s = s.replace('$', '').replace(',', '')
    expanded = None
    while expanded != s:
        expanded, s = s, _UNIT_AMOUNT.sub(
            lambda m: _canonical_number(str(Decimal(m.group(1)) * UNIT_WORDS[m.group(2)])), s)
    s = _NUMBER.sub(lambda m: _canonical_number(m.group(0)), s)
    return ' '.join(re.sub(r"[.\s]+$", "", s).split())


def format_answer_option(text: str) -> str:
    """Render "<n> thousand/million/billion" answers in digit form: "$109 thousand" -> "$109,000"."""
    match = _DISPLAY_UNIT_AMOUNT.match(text.strip())
    if not match:
        return text.strip()
    currency, number, unit = match.groups()
    value = (Decimal(number.replace(',', '')) * UNIT_WORDS[unit.lower()]).normalize()
    rest = text.strip()[match.end():]
    return f"{currency}{format(value, ',f')}{rest}"


def parse_distractors(reply: str) -> List[str]:
    """
    Parse a distractor reply into exactly three options.

    Raises:
        MalformedDistractors: Not exactly three options found
    """
    lines = [line for line in reply.splitlines() if line.strip()]
    items = [m.group(1) for m in (_DISTRACTOR_ITEM.match(line) for line in lines) if m]
    if not items:
        items = [line.strip() for line in lines]
    if len(items) != 3:
        raise MalformedDistractors(f"expected 3 distractors, got {len(items)}: {reply[:80]!r}")
    return items


def check_distractors(correct_answer: str, distractors: Sequence[str]):
    """
    Raises:
        DistractorCollision: A distractor normalizes equal to the answer or to another distractor
    """
    answer_key = normalize_answer(correct_answer)
    keys = [normalize_answer(d) for d in distractors]
    if answer_key in keys:
        raise DistractorCollision(f"distractor equals the correct answer {correct_answer!r}")
    if len(set(keys)) != len(keys):
        raise DistractorCollision(f"distractors repeat each other: {list(distractors)}")


def shuffle_options(correct: str, distractors: Sequence[str], seed: int) -> Tuple[Dict[str, str], str]:
    """
    Place the correct answer and three distractors under A-D with a seeded permutation.

    Returns:
        (options, ground_truth letter)
    """
    texts = [correct] + list(distractors)
    permutation = np.random.default_rng(seed).permutation(4)
    options = {LETTERS[slot]: texts[int(source)] for slot, source in enumerate(permutation)}
    ground_truth = LETTERS[int(np.where(permutation == 0)[0][0])]
    return options, ground_truth


@dataclass
class ConversionOutcome:
    question: Question
    attempts: List[Dict[str, Any]]

    def report_entry(self) -> Dict[str, Any]:
        return {
            'id': self.question.id,
            'ground_truth': self.question.ground_truth,
            'correct_text': self.question.correct_text,
            'attempts': self.attempts,
        }


def _convert(backend, stem: str, correct_answer: str, seed: int, question_id: str, topic: str,
             hint: Optional[str], explanation: Optional[str], category: Optional[str],
             template: Optional[PromptTemplate]) -> ConversionOutcome:
    if not correct_answer or not correct_answer.strip():
        raise QuestionBankError(f"Question {question_id}: correct answer is empty")
    template = template or PromptTemplate.load('mcq_distractors')
    body = template.render(stem=stem, answer=correct_answer.strip())

    attempts: List[Dict[str, Any]] = []
    last_error: Optional[QuestionBankError] = None
    for attempt in range(2):
        request = ChatRequest(
            messages=[ChatMessage(ChatRole.USER, body)],
            tag=CallTag(DISTRACTOR_AGENT, question_id, attempt),
        )
        reply = complete(backend, request).content
        record = {'attempt': attempt, 'reply': reply}
        attempts.append(record)
        try:
            distractors = parse_distractors(reply)
            check_distractors(correct_answer, distractors)
        except (MalformedDistractors, DistractorCollision) as e:
            record['error'] = f"{type(e).__name__}: {e}"
            last_error = e
            logger.warning(f"Question {question_id}: distractor attempt {attempt + 1} rejected ({e})")
            continue

        record['distractors'] = distractors
        options, ground_truth = shuffle_options(format_answer_option(correct_answer), distractors, seed)
        question = Question(
            id=question_id, topic=topic, stem=stem, options=options, ground_truth=ground_truth,
            hint=hint, explanation=explanation, category=category,
        )
        return ConversionOutcome(question=question, attempts=attempts)

    raise last_error


def convert_to_mcq(backend, stem: str, correct_answer: str, seed: int, question_id: str = "q0",
                   topic: str = "", hint: Optional[str] = None, explanation: Optional[str] = None,
                   template: Optional[PromptTemplate] = None) -> Question:
    """
    Convert a free-response question into a four-option MCQ.

    One chat call asks for three distractors; on a collision or a malformed
    reply the call is retried once.

    Args:
        backend: LLMGateway or ChatBackend
        stem: Question stem (tables already linearized)
        correct_answer: Ground-truth answer text
        seed: Seed of the option permutation
        question_id: Id of the produced question
        topic: Topic of the produced question
        hint: Optional hint carried over
        explanation: Optional explanation carried over
        template: Distractor prompt (defaults to the bundled one)

    Returns:
        Question with ground_truth pointing at the correct answer

    Raises:
        DistractorCollision, MalformedDistractors: Second attempt failed too
    """
    return _convert(backend, stem, correct_answer, seed, question_id, topic or "Unspecified",
                    hint, explanation, None, template).question


def convert_file(backend, input_path: str, output_path: str, seed: int = 0,
                 registry: Optional[RoleRegistry] = None,
                 report_path: Optional[str] = None) -> Tuple[QuestionSet, Dict[str, Any]]:
    """
    Convert a free-response JSON file into an MCQ question set.

    Input records hold id, topic, question, answer and optionally preamble,
    table, hint and explanation. Each item is seeded with seed + its position.
    Items whose conversion fails are listed in the report and skipped.

    Returns:
        (converted QuestionSet, conversion report)
    """
    try:
        with open(input_path, 'r', encoding='utf-8') as f:
            records = json.load(f)
    except (OSError, ValueError) as e:
        raise SchemaError(f"cannot read free-response file {input_path}: {e}") from e
    if isinstance(records, dict):
        records = records.get('questions')
    if not isinstance(records, list):
        raise SchemaError("expected a JSON array of free-response records", "/")

    template = PromptTemplate.load('mcq_distractors')
    converted: List[Question] = []
    report: Dict[str, Any] = {'source': input_path, 'seed': seed, 'converted': [], 'failed': []}
    for i, record in enumerate(records):
        locator = f"/{i}"
        question_id = str(record.get('id', f"fr{i + 1}"))
        text = _require_text(record, 'question', locator, question_id)
        answer = _require_text(record, 'answer', locator, question_id)
        topic = _require_text(record, 'topic', locator, question_id)
        table = TableSpec.from_dict(record['table']) if record.get('table') else None
        stem = compose_stem(record.get('preamble'), table, text)
        category = None
        if registry is not None and registry.entry(topic) is not None:
            category = registry.category_of(topic).value

        try:
            outcome = _convert(backend, stem, answer, seed + i, question_id, topic,
                               record.get('hint'), record.get('explanation'), category, template)
        except (DistractorCollision, MalformedDistractors) as e:
            logger.error(f"Conversion of {question_id} failed: {e}")
            report['failed'].append({'id': question_id, 'error': f"{type(e).__name__}: {e}"})
            continue
        converted.append(outcome.question)
        report['converted'].append(outcome.report_entry())

    name = os.path.splitext(os.path.basename(output_path))[0]
    question_set = QuestionSet(name=name, questions=converted, source=input_path)
    save_question_set(question_set, output_path)
    if report_path:
        with open(report_path, 'w', encoding='utf-8') as f:
            json.dump(report, f, indent=2, ensure_ascii=False)
            f.write('\n')
    logger.info(f"Converted {len(converted)}/{len(records)} questions into {output_path}")
    return question_set, report
