"""
Unit tests for the role registry.
Tests the bundled topic table, role resolution with fallback, schema
validation and how a role is applied to backends with and without
system-prompt support.
"""

import unittest
import tempfile
import shutil
import json
import sys
import os

# Add src directory to path for imports
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

from llm_gateway import BackendProfile, ChatRole
from role_registry import (
    FALLBACK_ROLE_TEXT, FinanceCategory, RegistryError, RolePrompt, RoleRegistry, TopicEntry,
    UnknownTopic, apply_role, is_valid_role_text, normalize_topic,
)


class TestBundledRegistry(unittest.TestCase):
    """Test the shipped data/roles.json."""

    @classmethod
    def setUpClass(cls):
        cls.registry = RoleRegistry.load()

    def test_topic_count(self):
        self.assertEqual(len(self.registry), 82)

    def test_category_counts(self):
        expected = {
            FinanceCategory.INVESTMENTS_VALUATION: 21,
            FinanceCategory.INCOME_INTEREST: 14,
            FinanceCategory.FINANCIAL_STATEMENTS: 10,
            FinanceCategory.DERIVATIVES_RISK: 10,
            FinanceCategory.CORPORATE_FINANCE: 11,
            FinanceCategory.TAXATION_PAYROLL: 7,
            FinanceCategory.BUDGETING_PERSONAL: 9,
        }
        grouped = self.registry.topics_by_category()
        self.assertEqual(len(grouped), 7)
        for category, count in expected.items():
            with self.subTest(category=category.value):
                self.assertEqual(len(grouped[category]), count)

    def test_every_topic_has_conforming_role(self):
        for entry in self.registry:
            with self.subTest(topic=entry.topic):
                role = self.registry.resolve_role(entry.topic)
                self.assertFalse(role.fallback)
                self.assertTrue(is_valid_role_text(role.text), role.text)

    def test_known_role_prompts(self):
        cases = {
            "Dividend": "You are a dividend-policy expert, proficient in dividend strategies and payout analysis.",
            "Bonds in finance": "You are a bond-market expert with deep knowledge of fixed-income valuation.",
            "Portfolios in finance": "You are a portfolio manager, expert in constructing and rebalancing portfolios.",
        }
        for topic, text in cases.items():
            with self.subTest(topic=topic):
                self.assertEqual(self.registry.resolve_role(topic).text, text)

    def test_lookup_ignores_case_hyphens_and_aliases(self):
        for name in ("dividend", "  DIVIDEND ", "zero coupon bond", "Bonds", "portfolio management"):
            with self.subTest(name=name):
                self.assertIn(name, self.registry)
        self.assertEqual(self.registry.resolve_role("Bond").topic, "Bonds in finance")

    def test_category_of(self):
        self.assertEqual(self.registry.category_of("Cash flow"), FinanceCategory.FINANCIAL_STATEMENTS)
        self.assertEqual(self.registry.category_of("payroll tax"), FinanceCategory.TAXATION_PAYROLL)
        with self.assertRaises(UnknownTopic):
            self.registry.category_of("Cryptocurrency")

    def test_unknown_topic_falls_back(self):
        with self.assertLogs('role_registry', level='WARNING'):
            role = self.registry.resolve_role("Cryptocurrency")
        self.assertTrue(role.fallback)
        self.assertEqual(role.text, FALLBACK_ROLE_TEXT)


class TestRegistryValidation(unittest.TestCase):
    """Test registry file validation."""

    def setUp(self):
        self.temp_dir = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.temp_dir)

    def write(self, payload):
        path = os.path.join(self.temp_dir, 'roles.json')
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(payload, f)
        return path

    def test_role_without_persona_rejected(self):
        path = self.write({'topics': [
            {'topic': 'Budget', 'category': 'Budgeting & Personal Finance', 'role_text': 'Check the budget.'},
        ]})
        with self.assertRaises(RegistryError) as ctx:
            RoleRegistry.load(path)
        self.assertIn('/topics/0/role_text', str(ctx.exception))

    def test_unknown_category_rejected(self):
        path = self.write({'topics': [
            {'topic': 'Budget', 'category': 'Astrology', 'role_text': 'You are a budgeting specialist who plans budgets.'},
        ]})
        with self.assertRaises(RegistryError) as ctx:
            RoleRegistry.load(path)
        self.assertIn('/topics/0/category', str(ctx.exception))

    def test_missing_field_rejected(self):
        path = self.write({'topics': [{'topic': 'Budget', 'category': 'Budgeting & Personal Finance'}]})
        with self.assertRaises(RegistryError):
            RoleRegistry.load(path)

    def test_duplicate_topic_rejected(self):
        entry = TopicEntry('Budget', FinanceCategory.BUDGETING_PERSONAL, 'You are a budgeting specialist who plans budgets.')
        with self.assertRaises(RegistryError):
            RoleRegistry([entry, entry])

    def test_missing_file(self):
        with self.assertRaises(RegistryError):
            RoleRegistry.load(os.path.join(self.temp_dir, 'missing.json'))

    def test_strict_registry_gives_empty_role(self):
        registry = RoleRegistry([], fallback_enabled=False)
        with self.assertLogs('role_registry', level='WARNING'):
            role = registry.resolve_role("Anything")
        self.assertEqual(role.text, "")

    def test_role_text_pattern(self):
        cases = [
            ("You are a tax expert, skilled in corporate tax planning.", True),
            ("You are an asset-valuation analyst who values assets.", True),
            ("You are a finance expert.", False),
            ("Act as a finance expert skilled in ratios.", False),
        ]
        for text, valid in cases:
            with self.subTest(text=text):
                self.assertEqual(is_valid_role_text(text), valid)

    def test_normalize_topic(self):
        self.assertEqual(normalize_topic("  Zero-Coupon   Bond "), "zero coupon bond")


class TestApplyRole(unittest.TestCase):
    """Test role placement for different backend capabilities."""

    def setUp(self):
        self.role = RolePrompt(topic="Credit", text="You are a credit analyst who assesses default risk.")
        self.body = "Review this answer."

    def profile(self, supports_system_prompt):
        return BackendProfile(name='b', endpoint='scripted://local', model='m',
                              supports_system_prompt=supports_system_prompt)

    def test_system_prompt_backend(self):
        messages = apply_role(self.profile(True), self.role, self.body)
        self.assertEqual([m.role for m in messages], [ChatRole.SYSTEM, ChatRole.USER])
        self.assertEqual(messages[0].content, self.role.text)
        self.assertEqual(messages[1].content, self.body)

    def test_prepended_for_completion_style_backend(self):
        messages = apply_role(self.profile(False), self.role, self.body)
        self.assertEqual(len(messages), 1)
        self.assertEqual(messages[0].content, f"{self.role.text}\n\n{self.body}")

    def test_empty_role_leaves_body_alone(self):
        messages = apply_role(self.profile(True), RolePrompt(topic="x", text="", fallback=True), self.body)
        self.assertEqual([(m.role, m.content) for m in messages], [(ChatRole.USER, self.body)])


if __name__ == '__main__':
    unittest.main()
