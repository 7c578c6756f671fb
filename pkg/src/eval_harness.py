"""
Evaluation Harness for the Financial QA Agent Framework.
Runs a question set through one or more modes on a bounded worker pool,
streams results to JSONL, and aggregates them into accuracy tables with
per-category breakdowns and call/token accounting.

Results file layout:
    line 1      {"type": "header", ...}   run metadata, the only line with a timestamp
    line 2..n   {"type": "result", ...}   one QuestionResult per (question, mode)
Full traces go to a sibling "<results>.traces.jsonl" file.
"""

import io
import json
import logging
import os
import re
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Any, Dict, List, Optional, Sequence, Set, Tuple, Union

import pandas as pd

from pipeline import MissingDependency, Mode, PipelineDeps, PipelineError, PipelineTrace, expected_calls, run
from question_bank import Question, QuestionSet
from role_registry import FinanceCategory

logger = logging.getLogger(__name__)

RESULTS_SCHEMA_VERSION = 1
UNCATEGORIZED = "Uncategorized"
INVALID = "invalid"
REPORT_FORMATS = ('text', 'csv', 'svg')
RESULT_FIELDS = ('question_id', 'mode', 'status', 'correct')


class EvalError(Exception):
    """Base class for evaluation failures."""


class DepError(EvalError):
    """Dependencies do not satisfy a requested mode; raised before any question runs."""


class SchemaError(EvalError):
    """Results file is empty or malformed."""


class UnsupportedFormat(EvalError):
    """Unknown report format."""


@dataclass
class RunConfig:
    modes: List[Mode]
    backend_name: str
    output_path: str
    concurrency: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.concurrency < 1:
            raise ValueError(f"concurrency must be at least 1, got {self.concurrency}")
        if not self.modes:
            raise ValueError("at least one mode is required")

    @property
    def traces_path(self) -> str:
        return traces_path_for(self.output_path)


def traces_path_for(results_path: str) -> str:
    root, _ = os.path.splitext(results_path)
    return f"{root}.traces.jsonl"


@dataclass(frozen=True)
class QuestionResult:
    """Scored outcome of one (question, mode) run. `predicted` is "invalid" for unparseable answers."""
    question_id: str
    mode: Mode
    category: str
    topic: str
    ground_truth: str
    predicted: Optional[str]
    correct: bool
    status: str = 'ok'
    calls: int = 0
    prompt_tokens: int = 0
    completion_tokens: int = 0
    trace_ref: Optional[str] = None
    error: Optional[str] = None

    @classmethod
    def from_trace(cls, question: Question, trace: PipelineTrace, trace_ref: str) -> 'QuestionResult':
        if trace.ok:
            predicted = trace.predicted or INVALID
            correct = predicted == question.ground_truth
        else:
            predicted, correct = None, False
        return cls(
            question_id=question.id,
            mode=trace.mode,
            category=question.category or UNCATEGORIZED,
            topic=question.topic,
            ground_truth=question.ground_truth,
            predicted=predicted,
            correct=correct,
            status='ok' if trace.ok else 'error',
            calls=len(trace.calls),
            prompt_tokens=trace.prompt_tokens,
            completion_tokens=trace.completion_tokens,
            trace_ref=trace_ref,
            error=trace.error,
        )

    def to_dict(self) -> Dict[str, Any]:
        record = {
            'type': 'result',
            'question_id': self.question_id,
            'mode': self.mode.value,
            'category': self.category,
            'topic': self.topic,
            'ground_truth': self.ground_truth,
            'predicted': self.predicted,
            'correct': self.correct,
            'status': self.status,
            'calls': self.calls,
            'prompt_tokens': self.prompt_tokens,
            'completion_tokens': self.completion_tokens,
            'trace_ref': self.trace_ref,
        }
        if self.error:
            record['error'] = self.error
        return record


@dataclass
class ModeSummary:
    mode: Mode
    answered: int = 0
    correct: int = 0
    invalid: int = 0
    errored: int = 0
    calls: int = 0
    prompt_tokens: int = 0
    completion_tokens: int = 0
    estimated_cost: float = 0.0

    @property
    def accuracy(self) -> Optional[float]:
        return self.correct / self.answered if self.answered else None


@dataclass
class EvalReport:
    """
    Aggregated accuracy and accounting for one results file.

    Errored runs are excluded from accuracy denominators and counted in
    `errored`; invalid (unparseable) predictions count as incorrect.
    """
    label: str
    modes: List[Mode]
    summaries: Dict[Mode, ModeSummary]
    category_accuracy: Dict[str, Dict[Mode, Optional[float]]]
    category_counts: Dict[str, Dict[Mode, int]]
    source: str = ""
    header: Dict[str, Any] = field(default_factory=dict)

    def accuracy(self, mode: Mode) -> Optional[float]:
        summary = self.summaries.get(mode)
        return summary.accuracy if summary else None

    @property
    def incomplete(self) -> bool:
        return Mode.M0 not in self.summaries or Mode.M3 not in self.summaries

    @property
    def gain(self) -> Optional[float]:
        """M3 accuracy minus M0 accuracy, None when either is missing."""
        if self.incomplete:
            return None
        full, base = self.accuracy(Mode.M3), self.accuracy(Mode.M0)
        if full is None or base is None:
            return None
        return full - base

    @property
    def stage_deltas(self) -> Dict[Mode, float]:
        base = self.accuracy(Mode.M0)
        if base is None:
            return {}
        return {
            mode: self.accuracy(mode) - base
            for mode in self.modes
            if mode != Mode.M0 and self.accuracy(mode) is not None
        }

    @property
    def categories(self) -> List[str]:
        return list(self.category_accuracy)

    def to_frame(self) -> pd.DataFrame:
        """Category x mode accuracy matrix (fractions) with a trailing Overall row."""
        rows = {
            category: [by_mode.get(mode) for mode in self.modes]
            for category, by_mode in self.category_accuracy.items()
        }
        rows['Overall'] = [self.accuracy(mode) for mode in self.modes]
        frame = pd.DataFrame.from_dict(rows, orient='index', columns=[m.value for m in self.modes])
        frame.index.name = 'category'
        return frame


def _write_line(handle, record: Dict[str, Any]):
    handle.write(json.dumps(record, ensure_ascii=False, sort_keys=False) + '\n')
    handle.flush()


def _truncate_partial_tail(path: str):
    """Drop a trailing line left half-written by an interrupted run."""
    with open(path, 'rb') as f:
        data = f.read()
    if not data or data.endswith(b'\n'):
        return
    keep = data.rfind(b'\n') + 1
    logger.warning(f"Truncating partial last line of {path}")
    with open(path, 'r+b') as f:
        f.truncate(keep)


def _completed_pairs(path: str) -> Tuple[bool, Set[Tuple[str, str]]]:
    """Return (has_header, successfully completed (question_id, mode) pairs) of an existing results file."""
    if not os.path.exists(path):
        return False, set()
    _truncate_partial_tail(path)
    has_header, done = False, set()
    with open(path, 'r', encoding='utf-8') as f:
        for line_no, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except ValueError as e:
                raise SchemaError(f"{path}:{line_no}: not valid JSON ({e})") from e
            if not isinstance(record, dict):
                raise SchemaError(f"{path}:{line_no}: expected a JSON object")
            if record.get('type') == 'header':
                has_header = True
                continue
            try:
                pair = (record['question_id'], record['mode'])
            except KeyError as e:
                raise SchemaError(f"{path}:{line_no}: result is missing {e}") from e
            if record.get('status') == 'ok':
                done.add(pair)
            else:
                done.discard(pair)
    return has_header, done


def _prune_traces(path: str, done: Set[Tuple[str, str]]):
    """
    Rewrite a traces file so it holds exactly one trace per completed pair.

    Traces of pairs that will be rerun, and older traces superseded by a later
    one for the same pair, are dropped. Each trace_ref then names one line.
    """
    if not os.path.exists(path):
        return
    _truncate_partial_tail(path)
    kept: Dict[Tuple[str, str], str] = {}
    with open(path, 'r', encoding='utf-8') as f:
        for line_no, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                trace = json.loads(line)
                pair = (trace['question_id'], trace['mode'])
            except (ValueError, KeyError, TypeError) as e:
                raise SchemaError(f"{path}:{line_no}: unreadable trace ({e})") from e
            kept.pop(pair, None)
            if pair in done and trace.get('status') == 'ok':
                kept[pair] = line if line.endswith('\n') else line + '\n'

    tmp_path = f"{path}.tmp"
    with open(tmp_path, 'w', encoding='utf-8') as f:
        f.writelines(kept.values())
    os.replace(tmp_path, path)
    logger.debug(f"Kept {len(kept)} trace(s) of completed pairs in {path}")


def _run_one(question: Question, mode: Mode, deps: PipelineDeps) -> PipelineTrace:
    try:
        return run(question, mode, deps)
    except PipelineError as e:
        if e.trace is not None:
            return e.trace
        return PipelineTrace(question_id=question.id, mode=mode, calls=(), error=str(e))
    except Exception as e:
        logger.exception(f"Unexpected failure on {question.id}/{mode.value}")
        return PipelineTrace(question_id=question.id, mode=mode, calls=(), error=f"{type(e).__name__}: {e}")


def evaluate(question_set: QuestionSet, config: RunConfig, deps: PipelineDeps) -> EvalReport:
    """
    Run every question once per mode and aggregate the persisted results.

    An existing results file is resumed: (question, mode) pairs already
    completed are skipped, a partial last line is dropped and the traces file
    is cut back to one trace per completed pair. Results are
    written in work order (mode-major, then question order) as soon as every
    earlier item is done, so a resumed run produces the same file as an
    uninterrupted one.

    Args:
        question_set: Questions to run
        config: Modes, concurrency, seed and output path
        deps: Pipeline dependencies (backend, registry, index, provider)

    Returns:
        EvalReport computed from the results file

    Raises:
        DepError: The dependencies cannot serve a requested mode
        SchemaError: An existing results or traces file is unreadable
    """
    for mode in config.modes:
        try:
            deps.check(mode)
        except MissingDependency as e:
            raise DepError(str(e)) from e

    directory = os.path.dirname(os.path.abspath(config.output_path))
    os.makedirs(directory, exist_ok=True)
    has_header, done = _completed_pairs(config.output_path)
    _prune_traces(config.traces_path, done)

    work = [
        (mode, question)
        for mode in config.modes
        for question in question_set
        if (question.id, mode.value) not in done
    ]
    logger.info(f"Evaluating {len(work)} (question, mode) pairs; {len(done)} already completed")

    profile = deps.backend.profile
    traces_name = os.path.basename(config.traces_path)
    with open(config.output_path, 'a', encoding='utf-8') as results, \
            open(config.traces_path, 'a', encoding='utf-8') as traces:
        if not has_header:
            _write_line(results, {
                'type': 'header',
                'schema_version': RESULTS_SCHEMA_VERSION,
                'created_at': datetime.now(timezone.utc).isoformat(),
                'question_set': question_set.name,
                'backend': config.backend_name,
                'model': profile.model,
                'seed': config.seed,
                'modes': [m.value for m in config.modes],
                'price_per_1k_prompt': profile.price_per_1k_prompt,
                'price_per_1k_completion': profile.price_per_1k_completion,
            })

        with ThreadPoolExecutor(max_workers=config.concurrency) as pool:
            futures = {pool.submit(_run_one, question, mode, deps): i for i, (mode, question) in enumerate(work)}
            pending: Dict[int, PipelineTrace] = {}
            next_index = 0
            for future in as_completed(futures):
                pending[futures[future]] = future.result()
                # Single writer: flush the contiguous prefix of finished items.
                while next_index in pending:
                    trace = pending.pop(next_index)
                    mode, question = work[next_index]
                    trace_ref = f"{traces_name}#{question.id}:{mode.value}"
                    result = QuestionResult.from_trace(question, trace, trace_ref)
                    _write_line(traces, dict(trace.to_dict(), trace_ref=trace_ref))
                    _write_line(results, result.to_dict())
                    next_index += 1
                    if next_index % 50 == 0:
                        logger.info(f"Progress: {next_index}/{len(work)}")

    return aggregate(config.output_path)


def _read_results(path: str) -> Tuple[Dict[str, Any], List[Dict[str, Any]]]:
    if not os.path.exists(path):
        raise SchemaError(f"Results file not found: {path}")
    header: Dict[str, Any] = {}
    records: List[Dict[str, Any]] = []
    with open(path, 'r', encoding='utf-8') as f:
        for line_no, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except ValueError as e:
                raise SchemaError(f"{path}:{line_no}: not valid JSON ({e})") from e
            if not isinstance(record, dict):
                raise SchemaError(f"{path}:{line_no}: expected a JSON object")
            if record.get('type') == 'header':
                header = record
                continue
            missing = [k for k in RESULT_FIELDS if k not in record]
            if missing:
                raise SchemaError(f"{path}:{line_no}: result is missing {missing}")
            try:
                Mode.parse(str(record['mode']))
            except ValueError as e:
                raise SchemaError(f"{path}:{line_no}: {e}") from e
            records.append(record)
    if not records:
        raise SchemaError(f"{path}: no result records")
    return header, records


def aggregate(path: str) -> EvalReport:
    """
    Aggregate a results file into an EvalReport.

    Duplicate (question, mode) records keep the last one, so resumed runs
    aggregate like uninterrupted ones. Aggregation does not depend on line order
    beyond that rule.

    Args:
        path: Results JSONL file

    Returns:
        EvalReport

    Raises:
        SchemaError: Missing, empty or malformed file
    """
    header, records = _read_results(path)
    frame = pd.DataFrame.from_records(records)
    frame['mode'] = frame['mode'].map(lambda m: Mode.parse(str(m)).value)
    frame = frame.drop_duplicates(subset=['question_id', 'mode'], keep='last')
    for column, default in (('category', UNCATEGORIZED), ('predicted', None), ('calls', 0),
                            ('prompt_tokens', 0), ('completion_tokens', 0)):
        if column not in frame.columns:
            frame[column] = default
    frame['category'] = frame['category'].fillna(UNCATEGORIZED)
    for column in ('calls', 'prompt_tokens', 'completion_tokens'):
        frame[column] = frame[column].fillna(0).astype(int)

    price_prompt = float(header.get('price_per_1k_prompt') or 0.0)
    price_completion = float(header.get('price_per_1k_completion') or 0.0)

    modes = [m for m in Mode if m.value in set(frame['mode'])]
    answered = frame[frame['status'] == 'ok']
    summaries: Dict[Mode, ModeSummary] = {}
    for mode in modes:
        rows = frame[frame['mode'] == mode.value]
        ok = rows[rows['status'] == 'ok']
        prompt_tokens = int(ok['prompt_tokens'].sum())
        completion_tokens = int(ok['completion_tokens'].sum())
        summaries[mode] = ModeSummary(
            mode=mode,
            answered=len(ok),
            correct=int(ok['correct'].astype(bool).sum()),
            invalid=int((ok['predicted'] == INVALID).sum()),
            errored=len(rows) - len(ok),
            calls=int(ok['calls'].sum()),
            prompt_tokens=prompt_tokens,
            completion_tokens=completion_tokens,
            estimated_cost=(prompt_tokens * price_prompt + completion_tokens * price_completion) / 1000,
        )
        if summaries[mode].calls != expected_calls(mode) * len(ok):
            logger.warning(f"{path}: {mode.value} call total {summaries[mode].calls} does not match "
                           f"{expected_calls(mode)} x {len(ok)} answered")

    categories = [c.value for c in FinanceCategory]
    extra = sorted(set(answered['category']) - set(categories))
    category_accuracy: Dict[str, Dict[Mode, Optional[float]]] = {}
    category_counts: Dict[str, Dict[Mode, int]] = {}
    grouped = answered.groupby(['category', 'mode'])['correct'].agg(['size', 'sum'])
    for category in categories + extra:
        category_accuracy[category] = {}
        category_counts[category] = {}
        for mode in modes:
            key = (category, mode.value)
            if key in grouped.index:
                size, correct = grouped.loc[key, 'size'], grouped.loc[key, 'sum']
                category_counts[category][mode] = int(size)
                category_accuracy[category][mode] = float(correct) / float(size)
            else:
                category_counts[category][mode] = 0
                category_accuracy[category][mode] = None

    label = header.get('label') or '/'.join(str(header[k]) for k in ('backend', 'model') if header.get(k)) \
        or os.path.splitext(os.path.basename(path))[0]
    return EvalReport(
        label=label,
        modes=modes,
        summaries=summaries,
        category_accuracy=category_accuracy,
        category_counts=category_counts,
        source=path,
        header=header,
    )


def format_pct(value: Optional[float]) -> str:
    return "-" if value is None else f"{value * 100:.2f}"


def format_gain(value: Optional[float]) -> str:
    return "n/a (incomplete)" if value is None else f"{value * 100:+.2f}"


def _markdown_table(headers: Sequence[str], rows: Sequence[Sequence[str]]) -> List[str]:
    lines = ["| " + " | ".join(headers) + " |", "|:--|" + "--:|" * (len(headers) - 1)]
    lines.extend("| " + " | ".join(row) + " |" for row in rows)
    return lines


def render_comparison(reports: Sequence[EvalReport]) -> str:
    """One accuracy row per run, with the M-0 to M-3 gain."""
    modes = list(Mode)
    headers = ["Model"] + [m.label for m in modes] + ["Gain"]
    rows = [
        [report.label] + [format_pct(report.accuracy(m)) for m in modes] + [format_gain(report.gain)]
        for report in reports
    ]
    return "\n".join(_markdown_table(headers, rows))


def _render_text(report: EvalReport) -> str:
    lines = ["Accuracy (%)", ""]
    lines.append(render_comparison([report]))

    deltas = report.stage_deltas
    if deltas:
        lines.append("")
        lines.append("Stage deltas vs M-0: " + ", ".join(f"{m.value} {v * 100:+.2f}" for m, v in deltas.items()))
    if report.incomplete:
        lines.append("")
        lines.append("Gain omitted: results do not cover both M0 and M3 (incomplete)")

    lines += ["", "Accuracy by category (%)", ""]
    first = report.modes[0]
    rows = [
        [category, str(report.category_counts[category].get(first, 0))]
        + [format_pct(by_mode.get(m)) for m in report.modes]
        for category, by_mode in report.category_accuracy.items()
    ]
    rows.append(["Overall", str(report.summaries[first].answered)]
                + [format_pct(report.accuracy(m)) for m in report.modes])
    lines += _markdown_table(["Category", "N"] + [m.label for m in report.modes], rows)

    lines += ["", "Calls and tokens", ""]
    rows = [
        [m.value, str(s.answered), str(s.correct), str(s.invalid), str(s.errored), str(s.calls),
         str(s.prompt_tokens), str(s.completion_tokens), f"{s.estimated_cost:.4f}"]
        for m, s in report.summaries.items()
    ]
    lines += _markdown_table(
        ["Mode", "Answered", "Correct", "Invalid", "Errored", "Calls", "Prompt tokens", "Completion tokens",
         "Est. cost ($)"],
        rows,
    )
    return "\n".join(lines) + "\n"


def _render_csv(report: EvalReport) -> str:
    frame = (report.to_frame().astype(float) * 100).round(2)
    return frame.to_csv(float_format='%.2f', lineterminator='\n')


def _slug(text: str) -> str:
    return re.sub(r'[^a-z0-9]+', '-', text.lower()).strip('-')


def _render_svg(report: EvalReport) -> str:
    import matplotlib
    matplotlib.use('Agg')
    import matplotlib.pyplot as plt
    import numpy as np

    categories = report.categories
    modes = report.modes
    width = 0.8 / len(modes)
    positions = np.arange(len(categories))

    with matplotlib.rc_context({'svg.hashsalt': 'finqa-report', 'svg.fonttype': 'none'}):
        fig, ax = plt.subplots(figsize=(12, 5))
        for j, mode in enumerate(modes):
            heights = [(report.category_accuracy[c].get(mode) or 0.0) * 100 for c in categories]
            bars = ax.bar(positions + (j - (len(modes) - 1) / 2) * width, heights, width, label=mode.label)
            for category, bar in zip(categories, bars):
                bar.set_gid(f"bar-{_slug(category)}-{mode.value}")
        ax.set_xticks(positions)
        ax.set_xticklabels(categories, rotation=20, ha='right', fontsize=8)
        ax.set_ylabel('Accuracy (%)')
        ax.set_ylim(0, 100)
        ax.set_title(f'Accuracy by category and mode: {report.label}')
        ax.legend(fontsize=8)
        fig.tight_layout()

        buffer = io.StringIO()
        fig.savefig(buffer, format='svg', metadata={'Date': None})
        plt.close(fig)
    return buffer.getvalue()


def render_report(report: Union[EvalReport, Sequence[EvalReport]], fmt: str = 'text',
                  path: Optional[str] = None) -> str:
    """
    Render a report as a text table, CSV or SVG grouped-bar chart.

    Several reports render as a comparison table (text format only).

    Args:
        report: EvalReport, or a list of them for a comparison
        fmt: "text", "csv" or "svg"
        path: When given, the output is also written there

    Returns:
        Rendered output

    Raises:
        UnsupportedFormat: Unknown format, or a comparison requested as CSV/SVG
    """
    if fmt not in REPORT_FORMATS:
        raise UnsupportedFormat(f"Unsupported report format '{fmt}' (choose from {', '.join(REPORT_FORMATS)})")

    if isinstance(report, EvalReport):
        renderers = {'text': _render_text, 'csv': _render_csv, 'svg': _render_svg}
        output = renderers[fmt](report)
    elif len(report) == 1:
        return render_report(report[0], fmt, path)
    elif fmt != 'text':
        raise UnsupportedFormat("Comparing several runs is only available as a text table")
    else:
        output = render_comparison(report) + "\n"

    if path:
        with open(path, 'w', encoding='utf-8') as f:
            f.write(output)
        logger.info(f"Wrote {fmt} report to {path}")
    return output
