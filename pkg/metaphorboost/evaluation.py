import math
import re
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import structlog
from scipy import stats

from .backends import BackendError, ChatRequest, ModelBackend, complete_with_retries
from .errors import InputError
from .misc import bounded_map, read_jsonl
from .taxonomy import DeficiencyCategory, MetaphorType, TaxonomyError
from .templates import PromptTemplates


logger = structlog.get_logger(__name__)

PathLike = Union[str, Path]


class EvaluationError(InputError):
    pass


class UndefinedCorrelationError(EvaluationError):
    pass


@dataclass(frozen=True)
class BenchmarkRecord:
    item_id: str
    title: str
    metaphor_type: MetaphorType
    golden_interpretation: str
    duration_s: float = 0.0
    frame_paths: Tuple[str, ...] = ()

    def __post_init__(self):
        if not self.golden_interpretation.strip():
            raise EvaluationError(f'record {self.item_id!r} has an empty golden interpretation')


_RECORD_FIELDS = ('item_id', 'title', 'metaphor_type', 'golden_interpretation', 'duration_s', 'frame_paths')


def load_records(path: PathLike, field_map: Optional[Mapping[str, str]] = None) -> List[BenchmarkRecord]:
    '''
    Loads benchmark records from JSON Lines; `field_map` maps record fields to the file's
    own key names where they differ (e.g. `{'golden_interpretation': 'answer'}`)
    '''
    keys = {f: (field_map or {}).get(f, f) for f in _RECORD_FIELDS}
    records = []
    seen = set()
    for obj in read_jsonl(path):
        try:
            record = BenchmarkRecord(
                item_id=str(obj[keys['item_id']]),
                title=str(obj.get(keys['title'], '')),
                metaphor_type=MetaphorType.parse(obj[keys['metaphor_type']]),
                golden_interpretation=str(obj[keys['golden_interpretation']]),
                duration_s=float(obj.get(keys['duration_s'], 0.0)),
                frame_paths=tuple(obj.get(keys['frame_paths'], ())),
            )
        except KeyError as e:
            raise EvaluationError(f'{path}: record lacks field {e}') from None
        except TaxonomyError as e:
            raise EvaluationError(f'{path}: {e}') from e
        if record.item_id in seen:
            raise EvaluationError(f'{path}: duplicate item_id {record.item_id!r}')
        seen.add(record.item_id)
        records.append(record)
    return records


#####
# judging
#####

@dataclass
class JudgeVerdict:
    item_id: str
    raw_score: int
    rationale: str
    judge_backend: str
    scaled: int = field(init=False)

    def __post_init__(self):
        if not isinstance(self.raw_score, int) or not 0 <= self.raw_score <= 10:
            raise EvaluationError(f'judge score must be an integer in [0, 10], got {self.raw_score!r}')
        self.scaled = 10 * self.raw_score

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class JudgeFailure:
    item_id: str
    error: str
    raw_reply: str
    judge_backend: str

    def to_dict(self) -> Dict[str, Any]:
        return {**asdict(self), 'failed': True}


_SCORE_RE = re.compile(r'score\s*[:=]\s*(-?\d+(?:\.\d+)?)', re.IGNORECASE)
_BARE_RE = re.compile(r'^\s*(-?\d+(?:\.\d+)?)\s*$')


def parse_score(text: str) -> Optional[Tuple[int, str]]:
    '''
    Extracts `(score, rationale)` from a judge reply ending in `Score: N`, or consisting of
    a single integer. Returns None for anything else, including non-integers and scores
    outside 0..10.

    Examples:
        >>> parse_score('Good grounding.\\nScore: 7')
        (7, 'Good grounding.')
        >>> parse_score('11') is None
        True
    '''
    matches = list(_SCORE_RE.finditer(text))
    if matches:
        m = matches[-1]
        value, rationale = m.group(1), (text[:m.start()] + text[m.end():]).strip()
    else:
        m = _BARE_RE.match(text)
        if m is None:
            return None
        value, rationale = m.group(1), ''
    if '.' in value:
        return None
    score = int(value)
    if not 0 <= score <= 10:
        return None
    return score, rationale


def judge(
    record: BenchmarkRecord,
    candidate: str,
    backend: ModelBackend,
    templates: Optional[PromptTemplates] = None,
    temperature: float = 0.0,
    attempts: int = 3,
    base_delay: float = 0.5,
) -> Union[JudgeVerdict, JudgeFailure]:
    '''
    Scores a candidate interpretation against the golden one on the 0..10 scale.

    An unreadable reply gets one repair request; if that fails too (or the backend fails
    after retries) a :class:`JudgeFailure` is returned instead of a verdict.
    '''
    if not candidate.strip():
        raise EvaluationError(f'{record.item_id}: empty candidate interpretation')
    templates = templates or PromptTemplates()

    raw = ''
    for repair in (False, True):
        system, user = templates.render(
            'judge', title=record.title, golden=record.golden_interpretation, candidate=candidate, repair=repair
        )
        try:
            reply = complete_with_retries(backend, ChatRequest('judge', system, user, temperature=temperature), attempts, base_delay)
        except BackendError as e:
            logger.warning('judge_failed', item_id=record.item_id, error=str(e))
            return JudgeFailure(record.item_id, str(e), raw, backend.name)
        raw = reply.text
        parsed = parse_score(raw)
        if parsed is not None:
            return JudgeVerdict(record.item_id, parsed[0], parsed[1], backend.name)
        logger.warning('judge_reply_unreadable', item_id=record.item_id, repair=repair)

    return JudgeFailure(record.item_id, 'no integer score in 0..10 after repair', raw, backend.name)


@dataclass
class JudgeRun:
    verdicts: List[JudgeVerdict]
    failures: List[JudgeFailure]
    missing: List[str] = field(default_factory=list)


def judge_all(
    records: Sequence[BenchmarkRecord],
    candidates: Mapping[str, str],
    backend: ModelBackend,
    templates: Optional[PromptTemplates] = None,
    temperature: float = 0.0,
    max_parallel: int = 1,
) -> JudgeRun:
    '''
    Judges the candidate of every record that has one; records without a candidate are
    reported as missing
    '''
    templates = templates or PromptTemplates()
    todo = [r for r in records if candidates.get(r.item_id, '').strip()]
    missing = [r.item_id for r in records if not candidates.get(r.item_id, '').strip()]
    results = bounded_map(
        lambda r: judge(r, candidates[r.item_id], backend, templates, temperature), todo, max_parallel
    )
    verdicts = [r for r in results if isinstance(r, JudgeVerdict)]
    failures = [r for r in results if isinstance(r, JudgeFailure)]
    logger.info('judging_done', judged=len(verdicts), failed=len(failures), missing=len(missing))
    return JudgeRun(verdicts, failures, missing)


#####
# aggregation
#####

@dataclass
class TypeScore:
    n: int
    mean: float
    avg_duration_s: float


@dataclass
class ScoreReport:
    per_type: Dict[MetaphorType, TypeScore]
    micro_mean: float
    macro_mean: float
    n: int
    n_failed: int = 0
    mode: str = ''
    backend: str = ''
    judge_backend: str = ''

    def to_dict(self) -> Dict[str, Any]:
        return {
            'per_type': {t.value: asdict(s) for t, s in self.per_type.items()},
            'micro_mean': self.micro_mean,
            'macro_mean': self.macro_mean,
            'n': self.n,
            'n_failed': self.n_failed,
            'mode': self.mode,
            'backend': self.backend,
            'judge_backend': self.judge_backend,
        }


def aggregate(
    verdicts: Iterable[JudgeVerdict],
    records: Iterable[BenchmarkRecord],
    n_failed: int = 0,
    mode: str = '',
    backend: str = '',
    judge_backend: str = '',
) -> ScoreReport:
    '''
    Per-type means of the scaled scores plus the sample-weighted (micro) and the
    per-type (macro) overall mean. Types without verdicts are left out.
    '''
    by_id = {r.item_id: r for r in records}
    scores: Dict[MetaphorType, List[int]] = defaultdict(list)
    durations: Dict[MetaphorType, List[float]] = defaultdict(list)
    for v in verdicts:
        record = by_id.get(v.item_id)
        if record is None:
            raise EvaluationError(f'verdict for unknown item {v.item_id!r}')
        scores[record.metaphor_type].append(v.scaled)
        durations[record.metaphor_type].append(record.duration_s)

    per_type = {
        t: TypeScore(len(scores[t]), math.fsum(scores[t]) / len(scores[t]), math.fsum(durations[t]) / len(durations[t]))
        for t in MetaphorType if scores[t]
    }
    n = sum(s.n for s in per_type.values())
    micro = math.fsum(math.fsum(v) for v in scores.values()) / n if n else 0.0
    macro = math.fsum(s.mean for s in per_type.values()) / len(per_type) if per_type else 0.0
    return ScoreReport(per_type, micro, macro, n, n_failed, mode, backend, judge_backend)


#####
# correlation
#####

def pearson(xs: Sequence[float], ys: Sequence[float]) -> float:
    '''
    Sample Pearson correlation, clamped to [-1, 1]

    Examples:
        >>> pearson([1, 2, 3], [10, 20, 30])
        1.0
    '''
    if len(xs) != len(ys):
        raise EvaluationError(f'pearson needs equally long inputs ({len(xs)} != {len(ys)})')
    if len(xs) < 2:
        raise EvaluationError('pearson needs at least 2 pairs')
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    dx = x - math.fsum(x) / len(x)
    dy = y - math.fsum(y) / len(y)
    sxx = math.fsum(dx * dx)
    syy = math.fsum(dy * dy)
    if sxx == 0 or syy == 0:
        raise UndefinedCorrelationError('undefined correlation (zero variance)')
    r = math.fsum(dx * dy) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


@dataclass
class ConsistencyReport:
    n: int
    r: float
    p_value: float

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def judge_consistency(xs: Sequence[float], ys: Sequence[float]) -> ConsistencyReport:
    '''
    Agreement between two score series (e.g. judge vs. human), with a two-sided p-value
    '''
    r = pearson(xs, ys)
    if len(xs) > 2:
        p_value = float(stats.pearsonr(np.asarray(xs, dtype=np.float64), np.asarray(ys, dtype=np.float64))[1])
    else:
        p_value = 1.0
    return ConsistencyReport(len(xs), r, p_value)


def load_paired_scores(path: PathLike, verdicts: Sequence[JudgeVerdict]) -> Tuple[List[float], List[float]]:
    '''
    Pairs human scores `{item_id, score}` (on the same 0..100 scale) with judge verdicts;
    items missing on either side are ignored
    '''
    human = {str(obj['item_id']): float(obj['score']) for obj in read_jsonl(path)}
    pairs = [(v.scaled, human[v.item_id]) for v in verdicts if v.item_id in human]
    return [p[0] for p in pairs], [p[1] for p in pairs]


#####
# deficiency analysis
#####

def tally_deficiencies(annotations: Iterable[Tuple[str, Union[str, DeficiencyCategory]]]) -> Dict[str, float]:
    '''
    Proportion of each deficiency category over the annotated items
    '''
    counts: Counter = Counter()
    for item_id, category in annotations:
        try:
            cat = category if isinstance(category, DeficiencyCategory) else DeficiencyCategory.parse(category)
        except TaxonomyError as e:
            raise EvaluationError(f'{item_id}: {e}') from e
        counts[cat] += 1
    total = sum(counts.values())
    return {c.value: counts[c] / total for c in DeficiencyCategory if counts[c]}


def load_deficiencies(path: PathLike) -> List[Tuple[str, str]]:
    try:
        return [(str(obj['item_id']), str(obj['category'])) for obj in read_jsonl(path)]
    except KeyError as e:
        raise EvaluationError(f'{path}: annotation lacks field {e}') from None


def render_deficiency_table(proportions: Mapping[str, float]) -> str:
    cats = list(DeficiencyCategory)
    header = [c.title for c in cats]
    cells = [f'{100 * proportions.get(c.value, 0.0):.1f}%' for c in cats]
    widths = [max(len(h), len(c)) for h, c in zip(header, cells)]
    return '\n'.join([
        '  '.join(h.rjust(w) for h, w in zip(header, widths)),
        '  '.join(c.rjust(w) for c, w in zip(cells, widths)),
    ])


#####
# tables
#####

AVERAGE_FOOTER = (
    'Micro = sample-weighted mean over judged items; Macro = unweighted mean of the per-type means.\n'
    "Note: the benchmark's published \"Average\" column is neither of these (its human row reads 83.4 "
    'while the macro mean of the same per-type scores is 82.2), so both averages are reported.'
)


def render_table(rows: Sequence[Tuple[str, ScoreReport]]) -> str:
    '''
    Aligned text table: one score row and one count row per report, 8 type columns
    plus Micro and Macro, followed by a footer explaining the two averages
    '''
    types = list(MetaphorType)
    header = ['Model'] + [t.short for t in types] + ['Micro', 'Macro']
    body = []
    for name, report in rows:
        scores = [f'{report.per_type[t].mean:.1f}' if t in report.per_type else '-' for t in types]
        body.append([name] + scores + [f'{report.micro_mean:.1f}', f'{report.macro_mean:.1f}'])
        counts = [str(report.per_type[t].n) if t in report.per_type else '0' for t in types]
        body.append(['  # judged'] + counts + [str(report.n), ''])

    widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
    lines = []
    for row in [header] + body:
        cells = [row[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(row[1:], widths[1:])]
        lines.append('  '.join(cells).rstrip())
    lines.insert(1, '-' * len(lines[0]))
    return '\n'.join(lines + ['', AVERAGE_FOOTER])
