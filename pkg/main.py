#!/usr/bin/env python3
"""
Financial QA Agent Framework - Command-Line Interface

Single entry point for:
1. index    - chunk and embed a text corpus into a vector index
2. ask      - run one question through a mode (M0-M3) and write its trace
3. eval     - run a question set through several modes and report accuracy
4. report   - re-aggregate results files into text, CSV or SVG reports
5. convert  - turn free-response questions into multiple-choice questions
6. roles    - inspect the topic -> category -> expert role registry

Exit codes: 0 success, 1 usage, 2 dependency/config, 3 runtime.
"""

import argparse
import json
import logging
import os
import sys

# Load environment variables from .env file
try:
    from dotenv import load_dotenv
    load_dotenv()
except ImportError:
    # python-dotenv not installed, environment variables must be set manually
    pass

# Add src directory to path for imports
sys.path.insert(0, os.path.join(os.path.dirname(__file__), 'src'))

from config import AppConfig, ConfigError, load_config, setup_logging
from corpus_index import (
    CorpusError, HashEmbeddingProvider, OpenAIEmbeddingProvider, RetrievalConfig,
    build_index, load_corpus, load_index, save_index,
)
from eval_harness import (
    DepError, RunConfig, SchemaError as ResultsSchemaError, UnsupportedFormat,
    aggregate, evaluate, render_report,
)
from llm_gateway import AuthError, LLMGateway, RetryPolicy, create_backend
from pipeline import MissingDependency, Mode, PipelineDeps, PipelineError, run
from question_bank import (
    QuestionBankError, QuestionSet, SchemaError, convert_file, load_question_set, question_from_dict,
)
from role_registry import FinanceCategory, RegistryError, RoleRegistry

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DEPENDENCY = 2
EXIT_RUNTIME = 3

DATA_DIR = os.path.join(os.path.dirname(__file__), 'data')
DEFAULT_QUESTIONS = os.path.join(DATA_DIR, 'sample_questions.json')


class UsageError(Exception):
    """Bad command-line usage."""


class CliArgumentParser(argparse.ArgumentParser):
    """ArgumentParser that raises instead of exiting, so errors go through the exit-code mapping."""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> CliArgumentParser:
    parser = CliArgumentParser(
        prog='main.py',
        description='Financial QA Agent Framework - role-aware multi-agent question answering',
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  python main.py index --corpus data/sample_corpus --out corpus.idx --provider hash
  python main.py ask --question data/sample_questions.json --id fcff-001 --mode M3 \\
      --backend scripted --script data/sample_script.json --index corpus.idx
  python main.py eval --out results/run.jsonl --backend scripted --script data/sample_script.json \\
      --index corpus.idx
  python main.py report results/run.jsonl --format csv
  python main.py roles --topic Bonds
        """
    )
    parser.add_argument('--config', help='TOML or JSON config file (backends, embedding, retrieval, eval)')
    parser.add_argument('--json-errors', action='store_true', help='Print errors as JSON on stderr')
    parser.add_argument('--trace-io', action='store_true',
                        help='Log request/response bodies (auth redacted) and keep them in traces')
    parser.add_argument('--log-level', default='WARNING', help='Logging level (default: WARNING)')
    sub = parser.add_subparsers(dest='command', metavar='COMMAND', parser_class=CliArgumentParser)

    p = sub.add_parser('index', help='Build a vector index from a directory of .txt files')
    p.add_argument('--corpus', required=True, help='Directory of plain-text documents (filename = doc_id)')
    p.add_argument('--out', required=True, help='Index file to write')
    p.add_argument('--chunk-size', type=int, help='Words per passage (default: 400)')
    p.add_argument('--overlap', type=int, help='Words shared by consecutive passages (default: 50)')
    p.add_argument('--provider', choices=['hash', 'remote'],
                   help='Embedding provider: deterministic hash or the configured remote endpoint')
    p.add_argument('--dims', type=int, default=64, help='Vector size of the hash provider (default: 64)')

    def add_backend_flags(p):
        p.add_argument('--backend', default='scripted', help='Backend profile name (default: scripted)')
        p.add_argument('--script', help='JSON map of call tag -> reply for the scripted backend')

    p = sub.add_parser('ask', help='Run one question through one mode')
    p.add_argument('--question', default=DEFAULT_QUESTIONS,
                   help='Question set file, or a file holding a single question object')
    p.add_argument('--id', help='Question id to pick from the set')
    p.add_argument('--mode', default='M0', help='M0, M1, M2 or M3 (default: M0)')
    add_backend_flags(p)
    p.add_argument('--index', help='Vector index file (required for M1 and M3)')
    p.add_argument('--k', type=int, help='Passages to retrieve (default: 3)')
    p.add_argument('--trace-out', help='Trace file to write (default: <id>.<mode>.trace.json)')

    p = sub.add_parser('eval', help='Evaluate a question set across modes')
    p.add_argument('--questions', default=DEFAULT_QUESTIONS, help='Question set file')
    p.add_argument('--modes', default='M0,M1,M2,M3', help='Comma-separated modes (default: all four)')
    add_backend_flags(p)
    p.add_argument('--index', help='Vector index file (required for M1 and M3)')
    p.add_argument('--k', type=int, help='Passages to retrieve (default: 3)')
    p.add_argument('--out', required=True, help='Results JSONL file (resumed if it exists)')
    p.add_argument('--concurrency', type=int, help='Parallel workers (default: 4)')
    p.add_argument('--seed', type=int, help='Run seed recorded in the results header (default: 0)')

    p = sub.add_parser('report', help='Aggregate results files into a report')
    p.add_argument('results', nargs='+', help='Results JSONL file(s); several files render a comparison')
    p.add_argument('--format', default='text', help='text, csv or svg (default: text)')
    p.add_argument('--out', help='Write the report to this file instead of stdout')

    p = sub.add_parser('convert', help='Convert free-response questions into multiple choice')
    p.add_argument('--input', required=True, help='Free-response JSON file')
    p.add_argument('--out', required=True, help='MCQ question set to write')
    p.add_argument('--report', help='Conversion report JSON (default: <out>.report.json)')
    p.add_argument('--seed', type=int, default=0, help='Option shuffle seed (default: 0)')
    add_backend_flags(p)

    p = sub.add_parser('roles', help='Inspect the role registry')
    p.add_argument('action', nargs='?', choices=['list'], default='list', help='list (default)')
    p.add_argument('--topic', help='Print the expert role prompt for one topic')
    p.add_argument('--category', help='Only list topics of this category')
    return parser


class FinQACLI:
    """Main command-line interface for the Financial QA Agent Framework."""

    def __init__(self, args: argparse.Namespace, out=None):
        """
        Initialize the CLI.

        Args:
            args: Parsed arguments
            out: Output stream (defaults to stdout)
        """
        self.args = args
        self.out = out or sys.stdout
        self.config: AppConfig = load_config(args.config)
        self._registry = None

    def echo(self, text: str = ""):
        print(text, file=self.out)

    @property
    def registry(self) -> RoleRegistry:
        if self._registry is None:
            self._registry = RoleRegistry.load()
        return self._registry

    def retrieval_config(self) -> RetrievalConfig:
        settings = self.config.retrieval
        try:
            return RetrievalConfig(
                k=getattr(self.args, 'k', None) or settings.k,
                chunk_size_words=getattr(self.args, 'chunk_size', None) or settings.chunk_size_words,
                overlap_words=settings.overlap_words if getattr(self.args, 'overlap', None) is None
                else self.args.overlap,
            )
        except ValueError as e:
            raise UsageError(str(e)) from e

    def make_gateway(self) -> LLMGateway:
        profile = self.config.backend(self.args.backend)
        script = None
        if profile.endpoint.startswith('scripted://'):
            if not self.args.script:
                raise ConfigError(f"Backend '{profile.name}' is scripted; pass --script FILE")
            try:
                with open(self.args.script, 'r', encoding='utf-8') as f:
                    script = json.load(f)
            except (OSError, ValueError) as e:
                raise ConfigError(f"Cannot read script {self.args.script}: {e}") from e
        return LLMGateway(
            create_backend(profile, script),
            retry_policy=RetryPolicy(max_retries=self.config.eval.max_retries),
            trace_io=self.args.trace_io,
        )

    def provider_for(self, provider_id: str):
        """Embedding provider matching an index's provider id."""
        if provider_id.startswith('hash-'):
            return HashEmbeddingProvider(int(provider_id.split('-', 1)[1]))
        settings = self.config.embedding
        if not settings.endpoint:
            raise ConfigError(f"Index was built with '{provider_id}' but no [embedding] endpoint is configured")
        return OpenAIEmbeddingProvider(settings.endpoint, provider_id, settings.auth_env_var, settings.batch_size)

    def pipeline_deps(self, gateway: LLMGateway) -> PipelineDeps:
        index = provider = None
        if self.args.index:
            index = load_index(self.args.index)
            provider = self.provider_for(index.provider_id)
        return PipelineDeps(
            backend=gateway,
            registry=self.registry,
            index=index,
            provider=provider,
            cfg=self.retrieval_config(),
            include_bodies=self.args.trace_io,
        )

    def cmd_index(self) -> int:
        cfg = self.retrieval_config()
        provider_name = self.args.provider or ('remote' if self.config.embedding.endpoint else 'hash')
        if provider_name == 'remote':
            settings = self.config.embedding
            if not settings.endpoint:
                raise ConfigError("--provider remote needs an [embedding] endpoint in the config file")
            provider = OpenAIEmbeddingProvider(settings.endpoint, settings.model, settings.auth_env_var,
                                               settings.batch_size)
        else:
            try:
                provider = HashEmbeddingProvider(self.args.dims)
            except ValueError as e:
                raise UsageError(str(e)) from e

        docs = load_corpus(self.args.corpus)
        index = build_index(docs, provider, cfg)
        save_index(index, self.args.out)
        self.echo(f"✅ Indexed {len(docs)} documents: {len(index)} passages, {index.dims} dims "
                  f"(provider {index.provider_id}) -> {self.args.out}")
        return EXIT_OK

    def _load_question(self):
        path = self.args.question
        try:
            with open(path, 'r', encoding='utf-8') as f:
                raw = json.load(f)
        except (OSError, ValueError) as e:
            raise SchemaError(f"cannot read question file {path}: {e}") from e
        if isinstance(raw, dict) and 'questions' not in raw:
            question = question_from_dict(raw, registry=self.registry)
            if self.args.id and self.args.id != question.id:
                raise UsageError(f"{path} holds question {question.id!r}, not {self.args.id!r}")
            return question
        question_set = load_question_set(path, self.registry)
        if not self.args.id:
            if len(question_set) != 1:
                raise UsageError(f"{path} holds {len(question_set)} questions; pick one with --id")
            return question_set.questions[0]
        try:
            return question_set.get(self.args.id)
        except KeyError as e:
            raise UsageError(str(e.args[0])) from e

    def cmd_ask(self) -> int:
        try:
            mode = Mode.parse(self.args.mode)
        except ValueError as e:
            raise UsageError(str(e)) from e
        question = self._load_question()
        gateway = self.make_gateway()
        deps = self.pipeline_deps(gateway)

        try:
            trace = run(question, mode, deps)
        except PipelineError as e:
            if e.trace is not None:
                self._write_trace(e.trace, question.id, mode)
            raise

        path = self._write_trace(trace, question.id, mode)
        letter = trace.predicted or 'invalid'
        verdict = "correct" if letter == question.ground_truth else f"expected {question.ground_truth}"
        self.echo(f"❓ {question.id} [{question.topic}] mode {mode.value} ({len(trace.calls)} calls)")
        self.echo(f"Final answer: {letter} ({verdict})")
        self.echo(f"📄 Trace written to {path}")
        return EXIT_OK

    def _write_trace(self, trace, question_id: str, mode: Mode) -> str:
        path = self.args.trace_out or f"{question_id}.{mode.value}.trace.json"
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(trace.to_dict(), f, indent=2, ensure_ascii=False)
            f.write('\n')
        return path

    def cmd_eval(self) -> int:
        try:
            modes = [Mode.parse(m) for m in self.args.modes.split(',') if m.strip()]
        except ValueError as e:
            raise UsageError(str(e)) from e
        question_set: QuestionSet = load_question_set(self.args.questions, self.registry)
        gateway = self.make_gateway()
        deps = self.pipeline_deps(gateway)
        settings = self.config.eval
        try:
            run_config = RunConfig(
                modes=modes,
                backend_name=self.args.backend,
                output_path=self.args.out,
                concurrency=settings.concurrency if self.args.concurrency is None else self.args.concurrency,
                seed=settings.seed if self.args.seed is None else self.args.seed,
            )
        except ValueError as e:
            raise UsageError(str(e)) from e

        self.echo(f"📊 Evaluating {len(question_set)} questions x {len(modes)} modes on '{self.args.backend}'")
        report = evaluate(question_set, run_config, deps)
        self.echo(render_report(report, 'text'))
        stats = gateway.get_usage_statistics()
        self.echo(f"🤖 Backend calls this run: {stats['successful_requests']} ok, {stats['failed_requests']} failed, "
                  f"{stats['prompt_tokens'] + stats['completion_tokens']:,} tokens, "
                  f"est. ${stats['estimated_cost']:.4f}")
        self.echo(f"📄 Results: {self.args.out}")
        return EXIT_OK

    def cmd_report(self) -> int:
        reports = [aggregate(path) for path in self.args.results]
        output = render_report(reports if len(reports) > 1 else reports[0], self.args.format, self.args.out)
        if self.args.out:
            self.echo(f"📄 Wrote {self.args.format} report to {self.args.out}")
        else:
            self.echo(output.rstrip('\n'))
        return EXIT_OK

    def cmd_convert(self) -> int:
        gateway = self.make_gateway()
        report_path = self.args.report or f"{os.path.splitext(self.args.out)[0]}.report.json"
        question_set, report = convert_file(
            gateway, self.args.input, self.args.out, seed=self.args.seed,
            registry=self.registry, report_path=report_path,
        )
        self.echo(f"✅ Converted {len(report['converted'])} questions -> {self.args.out}")
        if report['failed']:
            self.echo(f"⚠️ {len(report['failed'])} failed (see {report_path})")
        return EXIT_OK if question_set.questions or not report['failed'] else EXIT_RUNTIME

    def cmd_roles(self) -> int:
        registry = self.registry
        if self.args.topic:
            role = registry.resolve_role(self.args.topic)
            if role.fallback:
                self.echo(f"⚠️ '{self.args.topic}' is not registered; fallback role:")
            else:
                self.echo(f"{role.topic} [{registry.category_of(role.topic).value}]")
            self.echo(role.text)
            return EXIT_OK

        categories = list(FinanceCategory)
        if self.args.category:
            categories = [FinanceCategory.from_label(self.args.category)]
        grouped = registry.topics_by_category()
        for category in categories:
            self.echo(f"{category.value} ({len(grouped[category])} topics)")
            for topic in grouped[category]:
                self.echo(f"  {topic}: {registry.resolve_role(topic).text}")
        return EXIT_OK

    def dispatch(self) -> int:
        handlers = {
            'index': self.cmd_index,
            'ask': self.cmd_ask,
            'eval': self.cmd_eval,
            'report': self.cmd_report,
            'convert': self.cmd_convert,
            'roles': self.cmd_roles,
        }
        return handlers[self.args.command]()


USAGE_ERRORS = (UsageError, UnsupportedFormat)
DEPENDENCY_ERRORS = (
    ConfigError, MissingDependency, DepError, RegistryError, AuthError, CorpusError,
    SchemaError, ResultsSchemaError, QuestionBankError,
)


def exit_code_for(error: Exception) -> int:
    # MissingDependency and AuthError subclass runtime errors, so dependency errors are checked first.
    if isinstance(error, DEPENDENCY_ERRORS):
        return EXIT_DEPENDENCY
    if isinstance(error, PipelineError) and isinstance(error.__cause__, AuthError):
        return EXIT_DEPENDENCY
    if isinstance(error, USAGE_ERRORS):
        return EXIT_USAGE
    return EXIT_RUNTIME


def report_error(error: Exception, json_errors: bool) -> int:
    code = exit_code_for(error)
    if json_errors:
        payload = {
            'error': type(error).__name__,
            'message': str(error),
            'locator': getattr(error, 'locator', None) or None,
            'exit_code': code,
        }
        print(json.dumps(payload), file=sys.stderr)
    else:
        print(f"❌ {type(error).__name__}: {error}", file=sys.stderr)
    return code


def main(argv=None, out=None) -> int:
    """Main function with argument parsing."""
    parser = build_parser()
    json_errors = '--json-errors' in (argv if argv is not None else sys.argv[1:])
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        return report_error(e, json_errors)
    if not args.command:
        parser.print_help(out or sys.stdout)
        return EXIT_USAGE

    setup_logging(args.log_level, args.trace_io)
    try:
        return FinQACLI(args, out=out).dispatch()
    except KeyboardInterrupt:
        print("\n👋 Interrupted; re-run the same command to resume.", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as e:
        logger.debug("Command failed", exc_info=True)
        return report_error(e, args.json_errors)


if __name__ == "__main__":
    sys.exit(main())
