"""
Role Registry for the Financial QA Agent Framework.
Maps each of the 82 finance topics to its category and to the expert role
prompt the Expert Reviewer is given, and applies a role to a backend
according to whether the backend accepts a system prompt.
"""

import json
import logging
import os
import re
from dataclasses import dataclass
from enum import Enum
from typing import Dict, Iterator, List, Optional

from llm_gateway import BackendProfile, ChatMessage, ChatRole

logger = logging.getLogger(__name__)

DEFAULT_REGISTRY_PATH = os.path.join(os.path.dirname(__file__), '..', 'data', 'roles.json')
FALLBACK_ROLE_TEXT = "You are a finance expert skilled in quantitative reasoning and financial analysis."

PERSONA_PATTERN = re.compile(r"^You are an? [^.]*?\b(expert|analyst|specialist|manager|strategist)\b", re.IGNORECASE)


class FinanceCategory(Enum):
    """The seven question categories."""
    INVESTMENTS_VALUATION = "Investments & Valuation"
    INCOME_INTEREST = "Income & Interest"
    FINANCIAL_STATEMENTS = "Financial Statements & Analysis"
    DERIVATIVES_RISK = "Derivatives & Risk Management"
    CORPORATE_FINANCE = "Corporate Finance & Capital Management"
    TAXATION_PAYROLL = "Taxation & Payroll"
    BUDGETING_PERSONAL = "Budgeting & Personal Finance"

    @classmethod
    def from_label(cls, label: str) -> 'FinanceCategory':
        for category in cls:
            if category.value.lower() == label.strip().lower() or category.name.lower() == label.strip().lower():
                return category
        raise RegistryError(f"Unknown category '{label}'")


class RegistryError(Exception):
    """Raised for invalid registry files."""


class UnknownTopic(RegistryError):
    """Topic is not present in the registry."""


@dataclass(frozen=True)
class TopicEntry:
    topic: str
    category: FinanceCategory
    role_text: str
    aliases: tuple = ()


@dataclass(frozen=True)
class RolePrompt:
    topic: str
    text: str
    fallback: bool = False


def normalize_topic(topic: str) -> str:
    return ' '.join(topic.replace('-', ' ').split()).casefold()


def is_valid_role_text(text: str) -> bool:
    """Check a role prompt follows the persona + responsibility pattern."""
    match = PERSONA_PATTERN.match(text)
    if not match:
        return False
    remainder = text[match.end():].strip(' ,.')
    return len(remainder.split()) >= 2


class RoleRegistry:
    """
    Immutable topic → (category, role prompt) registry, loaded once and shared.
    Lookups are case-insensitive and also match registered aliases.
    """

    def __init__(self, entries: List[TopicEntry], fallback_enabled: bool = True):
        """
        Initialize the registry.

        Args:
            entries: Topic entries (topics and aliases must be unique)
            fallback_enabled: When False, unknown topics resolve to an empty role
        """
        self._entries: Dict[str, TopicEntry] = {}
        self._lookup: Dict[str, TopicEntry] = {}
        self.fallback_enabled = fallback_enabled
        for entry in entries:
            for name in (entry.topic,) + tuple(entry.aliases):
                key = normalize_topic(name)
                if key in self._lookup:
                    raise RegistryError(f"Topic or alias '{name}' registered twice")
                self._lookup[key] = entry
            self._entries[entry.topic] = entry

    @classmethod
    def load(cls, path: Optional[str] = None, fallback_enabled: bool = True) -> 'RoleRegistry':
        """
        Load and schema-validate a registry JSON file.

        Args:
            path: Registry file (defaults to data/roles.json)
            fallback_enabled: See __init__

        Returns:
            RoleRegistry instance

        Raises:
            RegistryError: If the file is missing or any entry is invalid
        """
        path = path or DEFAULT_REGISTRY_PATH
        if not os.path.exists(path):
            raise RegistryError(f"Registry file not found: {path}")
        try:
            with open(path, 'r', encoding='utf-8') as f:
                raw = json.load(f)
        except ValueError as e:
            raise RegistryError(f"Registry file {path} is not valid JSON: {e}") from e

        records = raw.get('topics') if isinstance(raw, dict) else raw
        if not isinstance(records, list):
            raise RegistryError(f"{path}: expected a list of topic entries")

        entries = []
        for i, record in enumerate(records):
            locator = f"/topics/{i}"
            if not isinstance(record, dict):
                raise RegistryError(f"{locator}: entry must be an object")
            for required in ('topic', 'category', 'role_text'):
                if not isinstance(record.get(required), str) or not record[required].strip():
                    raise RegistryError(f"{locator}/{required}: missing or empty")
            if not is_valid_role_text(record['role_text']):
                raise RegistryError(
                    f"{locator}/role_text: '{record['role_text']}' does not follow the "
                    f"'You are a(n) ... expert' pattern with a responsibility clause"
                )
            try:
                category = FinanceCategory.from_label(record['category'])
            except RegistryError as e:
                raise RegistryError(f"{locator}/category: {e}") from e
            entries.append(TopicEntry(
                topic=record['topic'].strip(),
                category=category,
                role_text=record['role_text'].strip(),
                aliases=tuple(record.get('aliases', ())),
            ))

        registry = cls(entries, fallback_enabled=fallback_enabled)
        logger.info(f"Loaded {len(entries)} role prompts from {path}")
        return registry

    def __iter__(self) -> Iterator[TopicEntry]:
        return iter(self._entries.values())

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, topic: str) -> bool:
        return normalize_topic(topic) in self._lookup

    def entry(self, topic: str) -> Optional[TopicEntry]:
        return self._lookup.get(normalize_topic(topic))

    def resolve_role(self, topic: str) -> RolePrompt:
        """
        Resolve the Expert Reviewer role prompt for a topic.

        Args:
            topic: Question topic

        Returns:
            The registered RolePrompt, or the generic fallback with fallback=True
        """
        entry = self.entry(topic)
        if entry is not None:
            return RolePrompt(topic=entry.topic, text=entry.role_text)
        logger.warning(f"No role prompt registered for topic '{topic}'; using fallback role")
        text = FALLBACK_ROLE_TEXT if self.fallback_enabled else ""
        return RolePrompt(topic=topic, text=text, fallback=True)

    def category_of(self, topic: str) -> FinanceCategory:
        """
        Category of a registered topic.

        Raises:
            UnknownTopic: If the topic is not registered
        """
        entry = self.entry(topic)
        if entry is None:
            raise UnknownTopic(f"Topic '{topic}' is not registered")
        return entry.category

    def topics_by_category(self) -> Dict[FinanceCategory, List[str]]:
        grouped = {category: [] for category in FinanceCategory}
        for entry in self:
            grouped[entry.category].append(entry.topic)
        return grouped


def apply_role(backend: BackendProfile, role: RolePrompt, user_body: str) -> List[ChatMessage]:
    """
    Wrap a user body with a role prompt.

    Backends with a system prompt get the role as the system message; others get
    the role prepended to the user message, separated by a blank line.

    Args:
        backend: Profile of the backend that will receive the messages
        role: Role prompt to apply
        user_body: User message body (never altered)

    Returns:
        Ordered list of chat messages
    """
    if not role.text:
        return [ChatMessage(ChatRole.USER, user_body)]
    if backend.supports_system_prompt:
        return [ChatMessage(ChatRole.SYSTEM, role.text), ChatMessage(ChatRole.USER, user_body)]
    return [ChatMessage(ChatRole.USER, f"{role.text}\n\n{user_body}")]
