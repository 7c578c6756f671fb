"""
Integration tests for the command-line interface.
Runs every subcommand through main() on the bundled sample data with the
scripted backend and checks output and exit codes.
"""

import unittest
import tempfile
import shutil
import json
import sys
import os
from io import StringIO
from unittest.mock import patch

# Add project root and src directory to path for imports
ROOT = os.path.join(os.path.dirname(__file__), '..')
sys.path.insert(0, os.path.join(ROOT, 'src'))
sys.path.insert(0, ROOT)

import main as cli
from llm_gateway import AuthError
from pipeline import PipelineError

DATA_DIR = os.path.join(ROOT, 'data')
SCRIPT = os.path.join(DATA_DIR, 'sample_script.json')
CORPUS = os.path.join(DATA_DIR, 'sample_corpus')


class CLITestCase(unittest.TestCase):

    def setUp(self):
        self.temp_dir = tempfile.mkdtemp()
        self.index_path = os.path.join(self.temp_dir, 'corpus.idx')

    def tearDown(self):
        shutil.rmtree(self.temp_dir)

    def invoke(self, *argv):
        out, err = StringIO(), StringIO()
        with patch('sys.stderr', err):
            code = cli.main(list(argv), out=out)
        return code, out.getvalue(), err.getvalue()

    def build_index(self):
        code, output, _ = self.invoke('index', '--corpus', CORPUS, '--out', self.index_path,
                                      '--provider', 'hash', '--chunk-size', '80', '--overlap', '20')
        self.assertEqual(code, cli.EXIT_OK)
        return output


class TestRolesCommand(CLITestCase):

    def test_topic_prompt(self):
        code, output, _ = self.invoke('roles', '--topic', 'Bonds')
        self.assertEqual(code, 0)
        self.assertIn("Bonds in finance [Income & Interest]", output)
        self.assertIn("You are a bond-market expert with deep knowledge of fixed-income valuation.", output)

    def test_unregistered_topic_prints_fallback(self):
        code, output, _ = self.invoke('roles', '--topic', 'Cryptocurrency')
        self.assertEqual(code, 0)
        self.assertIn("fallback role", output)

    def test_list_all_categories(self):
        code, output, _ = self.invoke('roles', 'list')
        self.assertEqual(code, 0)
        self.assertIn("Investments & Valuation (21 topics)", output)
        self.assertIn("Financial Statements & Analysis (10 topics)", output)
        self.assertIn("Budgeting & Personal Finance (9 topics)", output)

    def test_list_one_category(self):
        code, output, _ = self.invoke('roles', '--category', 'Taxation & Payroll')
        self.assertEqual(code, 0)
        self.assertEqual(output.splitlines()[0], "Taxation & Payroll (7 topics)")
        self.assertEqual(len(output.splitlines()), 8)

    def test_unknown_category(self):
        code, _, err = self.invoke('roles', '--category', 'Astrology')
        self.assertEqual(code, cli.EXIT_DEPENDENCY)
        self.assertIn("RegistryError", err)


class TestIndexAndAsk(CLITestCase):

    def test_index_reports_passages(self):
        output = self.build_index()
        self.assertIn("Indexed 5 documents", output)
        self.assertIn("provider hash-64", output)
        self.assertTrue(os.path.exists(self.index_path))

    def test_ask_full_mode_writes_trace(self):
        self.build_index()
        trace_path = os.path.join(self.temp_dir, 'fcff.trace.json')
        code, output, _ = self.invoke('ask', '--id', 'fcff-001', '--mode', 'M3', '--script', SCRIPT,
                                      '--index', self.index_path, '--trace-out', trace_path)
        self.assertEqual(code, 0)
        self.assertIn("Final answer: B (correct)", output)
        with open(trace_path, 'r', encoding='utf-8') as f:
            trace = json.load(f)
        self.assertEqual([c['agent'] for c in trace['calls']], ['ER', 'BG', 'XR', 'BG'])
        self.assertEqual(trace['initial']['answer_letter'], 'A')

    def test_ask_baseline(self):
        trace_path = os.path.join(self.temp_dir, 'm0.trace.json')
        code, output, _ = self.invoke('ask', '--id', 'fcff-001', '--script', SCRIPT, '--trace-out', trace_path)
        self.assertEqual(code, 0)
        self.assertIn("mode M0 (1 calls)", output)
        self.assertIn("Final answer: A (expected B)", output)

    def test_ask_evidence_mode_without_index(self):
        code, _, err = self.invoke('ask', '--id', 'fcff-001', '--mode', 'M1', '--script', SCRIPT,
                                   '--trace-out', os.path.join(self.temp_dir, 't.json'))
        self.assertEqual(code, cli.EXIT_DEPENDENCY)
        self.assertIn("MissingDependency", err)

    def test_ask_unknown_id(self):
        code, _, _ = self.invoke('ask', '--id', 'nope', '--script', SCRIPT)
        self.assertEqual(code, cli.EXIT_USAGE)


class TestEvalAndReport(CLITestCase):

    def test_eval_sample_set(self):
        self.build_index()
        results = os.path.join(self.temp_dir, 'results', 'run.jsonl')
        code, output, _ = self.invoke('eval', '--script', SCRIPT, '--index', self.index_path, '--out', results)
        self.assertEqual(code, 0)
        self.assertIn("Evaluating 20 questions x 4 modes", output)
        self.assertIn("| M-0 (Baseline) |", output.splitlines()[2])
        with open(results, 'r', encoding='utf-8') as f:
            lines = f.read().splitlines()
        self.assertEqual(len(lines), 1 + 80)
        self.assertEqual(json.loads(lines[0])['backend'], 'scripted')

        code, output, _ = self.invoke('report', results, '--format', 'csv')
        self.assertEqual(code, 0)
        self.assertTrue(output.startswith("category,M0,M1,M2,M3"))

    def test_eval_subset_of_modes(self):
        results = os.path.join(self.temp_dir, 'm02.jsonl')
        code, output, _ = self.invoke('eval', '--script', SCRIPT, '--modes', 'M0,M2', '--out', results)
        self.assertEqual(code, 0)
        self.assertIn("n/a (incomplete)", output)

    def test_report_published_row(self):
        results = os.path.join(self.temp_dir, 'gpt.jsonl')
        calls = {'M0': 1, 'M1': 2, 'M2': 3, 'M3': 4}
        with open(results, 'w', encoding='utf-8') as f:
            f.write(json.dumps({'type': 'header', 'backend': 'gpt-4o-mini'}) + '\n')
            for mode, correct in (('M0', 6334), ('M1', 6487), ('M2', 6711), ('M3', 6993)):
                for i in range(10000):
                    f.write(json.dumps({'type': 'result', 'question_id': f"q{i}", 'mode': mode,
                                        'status': 'ok', 'correct': i < correct, 'calls': calls[mode]}) + '\n')
        code, output, _ = self.invoke('report', results)
        self.assertEqual(code, 0)
        self.assertIn("| gpt-4o-mini | 63.34 | 64.87 | 67.11 | 69.93 | +6.59 |", output)

    def test_report_svg_to_file(self):
        results = os.path.join(self.temp_dir, 'small.jsonl')
        with open(results, 'w', encoding='utf-8') as f:
            f.write(json.dumps({'type': 'result', 'question_id': 'q', 'mode': 'M0', 'status': 'ok',
                                'correct': True, 'calls': 1, 'category': 'Taxation & Payroll'}) + '\n')
        chart = os.path.join(self.temp_dir, 'chart.svg')
        code, output, _ = self.invoke('report', results, '--format', 'svg', '--out', chart)
        self.assertEqual(code, 0)
        self.assertIn("Wrote svg report", output)
        self.assertTrue(os.path.getsize(chart) > 0)

    def test_report_bad_format_and_missing_file(self):
        results = os.path.join(self.temp_dir, 'absent.jsonl')
        self.assertEqual(self.invoke('report', results)[0], cli.EXIT_DEPENDENCY)
        with open(results, 'w', encoding='utf-8') as f:
            f.write(json.dumps({'type': 'result', 'question_id': 'q', 'mode': 'M0', 'status': 'ok',
                                'correct': True, 'calls': 1}) + '\n')
        self.assertEqual(self.invoke('report', results, '--format', 'pdf')[0], cli.EXIT_USAGE)


class TestConvertCommand(CLITestCase):

    def test_convert_sample(self):
        out = os.path.join(self.temp_dir, 'mcq.json')
        code, output, _ = self.invoke('convert', '--input', os.path.join(DATA_DIR, 'free_response_sample.json'),
                                      '--out', out, '--script', SCRIPT, '--seed', '7')
        self.assertEqual(code, 0)
        self.assertIn("Converted 3 questions", output)
        self.assertTrue(os.path.exists(os.path.join(self.temp_dir, 'mcq.report.json')))


class TestExitCodes(CLITestCase):
    """Test usage, dependency and runtime error mapping."""

    def test_usage_errors(self):
        cases = [
            ('roles', '--bogus'),
            ('eval', '--script', SCRIPT),
            ('eval', '--script', SCRIPT, '--out', 'x.jsonl', '--modes', 'M0,M7'),
            ('ask', '--mode', 'M9', '--script', SCRIPT, '--id', 'fcff-001'),
        ]
        for argv in cases:
            with self.subTest(argv=argv):
                self.assertEqual(self.invoke(*argv)[0], cli.EXIT_USAGE)

    def test_invalid_numeric_options_are_usage_errors(self):
        out = os.path.join(self.temp_dir, 'r.jsonl')
        cases = [
            ('eval', '--script', SCRIPT, '--out', out, '--modes', 'M0', '--concurrency', '0'),
            ('index', '--corpus', CORPUS, '--out', self.index_path, '--dims', '0'),
            ('index', '--corpus', CORPUS, '--out', self.index_path, '--chunk-size', '10', '--overlap', '20'),
        ]
        for argv in cases:
            with self.subTest(argv=argv):
                self.assertEqual(self.invoke(*argv)[0], cli.EXIT_USAGE)
        self.assertFalse(os.path.exists(out))
        self.assertFalse(os.path.exists(self.index_path))

    def test_no_command_prints_help(self):
        code, output, _ = self.invoke()
        self.assertEqual(code, cli.EXIT_USAGE)
        self.assertIn("COMMAND", output)

    def test_missing_script_is_config_error(self):
        code, _, err = self.invoke('ask', '--id', 'fcff-001')
        self.assertEqual(code, cli.EXIT_DEPENDENCY)
        self.assertIn("--script", err)

    def test_unknown_backend(self):
        code, _, _ = self.invoke('ask', '--id', 'fcff-001', '--backend', 'nonexistent')
        self.assertEqual(code, cli.EXIT_DEPENDENCY)

    def test_json_errors(self):
        code, _, err = self.invoke('--json-errors', 'ask', '--id', 'fcff-001')
        payload = json.loads(err.strip().splitlines()[-1])
        self.assertEqual(payload['error'], 'ConfigError')
        self.assertEqual(payload['exit_code'], code)
        self.assertEqual(code, cli.EXIT_DEPENDENCY)

    def test_schema_error_locator_in_json(self):
        path = os.path.join(self.temp_dir, 'bad.json')
        with open(path, 'w', encoding='utf-8') as f:
            json.dump([{'id': 'x', 'topic': 'Dividend', 'stem': 's', 'options': {'A': '1'}, 'ground_truth': 'A'}], f)
        code, _, err = self.invoke('--json-errors', 'eval', '--questions', path, '--script', SCRIPT,
                                   '--out', os.path.join(self.temp_dir, 'r.jsonl'), '--modes', 'M0')
        self.assertEqual(code, cli.EXIT_DEPENDENCY)
        self.assertEqual(json.loads(err.strip().splitlines()[-1])['locator'], '/0/options')

    def test_exit_code_mapping(self):
        auth_failure = PipelineError("BG call failed")
        auth_failure.__cause__ = AuthError("missing key")
        self.assertEqual(cli.exit_code_for(auth_failure), cli.EXIT_DEPENDENCY)
        self.assertEqual(cli.exit_code_for(PipelineError("timeout")), cli.EXIT_RUNTIME)
        self.assertEqual(cli.exit_code_for(RuntimeError("boom")), cli.EXIT_RUNTIME)
        self.assertEqual(cli.exit_code_for(ValueError("bad value deep in a run")), cli.EXIT_RUNTIME)
        self.assertEqual(cli.exit_code_for(cli.UsageError("bad flag")), cli.EXIT_USAGE)

    def test_help_lists_commands_and_flags(self):
        text = cli.build_parser().format_help()
        for command in ('index', 'ask', 'eval', 'report', 'convert', 'roles'):
            self.assertIn(command, text)
        for flag in ('--config', '--json-errors', '--trace-io'):
            self.assertIn(flag, text)


if __name__ == '__main__':
    unittest.main()
