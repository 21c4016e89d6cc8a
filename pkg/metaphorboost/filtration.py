import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import structlog

from .backends import BackendError, ChatRequest, ModelBackend, complete_with_retries
from .errors import InputError, InvariantError
from .frames import select_evenly
from .imageinfo import encode_frame
from .misc import bounded_map, read_jsonl, write_jsonl
from .templates import PromptTemplates


logger = structlog.get_logger(__name__)

PathLike = Union[str, Path]

KEPT = 'kept'
REJECTED = 'rejected'
NEEDS_REVIEW = 'needs_review'

COMMENTS = 'comments'
LLM = 'llm'
MLLM = 'mllm'
HUMAN = 'human'
STAGE_NAMES = (COMMENTS, LLM, MLLM, HUMAN)


class FiltrationError(InputError):
    pass


class FiltrationInvariantError(InvariantError):
    pass


@dataclass(frozen=True)
class TraceEntry:
    stage: str
    verdict: str
    rationale: str = ''


@dataclass
class Candidate:
    '''
    A video under consideration; `stage_trace` records one verdict per stage it went through
    '''

    item_id: str
    comment_count: int
    intro: str = ''
    asr: str = ''
    comments: List[str] = field(default_factory=list)
    frame_paths: List[str] = field(default_factory=list)
    metaphor_type: Optional[str] = None
    stage_trace: List[TraceEntry] = field(default_factory=list)

    def __post_init__(self):
        if not isinstance(self.comment_count, int) or self.comment_count < 0:
            raise FiltrationError(f'candidate {self.item_id!r}: comment_count must be a non-negative integer')

    @property
    def status(self) -> str:
        return self.stage_trace[-1].verdict if self.stage_trace else KEPT

    def record(self, stage: str, verdict: str, rationale: str = '') -> None:
        if self.status != KEPT:
            raise FiltrationInvariantError(
                f'candidate {self.item_id!r} was already {self.status} at stage {self.stage_trace[-1].stage!r}'
            )
        self.stage_trace.append(TraceEntry(stage, verdict, rationale))

    def rationale_of(self, stage: str) -> str:
        for entry in reversed(self.stage_trace):
            if entry.stage == stage:
                return entry.rationale
        return ''

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj: Mapping[str, Any]) -> 'Candidate':
        try:
            return cls(
                item_id=str(obj['item_id']),
                comment_count=obj['comment_count'],
                intro=str(obj.get('intro', '')),
                asr=str(obj.get('asr', '')),
                comments=[str(c) for c in obj.get('comments', [])],
                frame_paths=[str(p) for p in obj.get('frame_paths', [])],
                metaphor_type=obj.get('metaphor_type'),
                stage_trace=[TraceEntry(**t) for t in obj.get('stage_trace', [])],
            )
        except KeyError as e:
            raise FiltrationError(f'candidate record lacks field {e}') from None


def load_candidates(path: PathLike) -> List[Candidate]:
    cands = [Candidate.from_dict(obj) for obj in read_jsonl(path)]
    ids = [c.item_id for c in cands]
    if len(set(ids)) != len(ids):
        raise FiltrationError(f'{path}: duplicate candidate ids')
    return cands


def save_candidates(path: PathLike, cands: Sequence[Candidate]) -> None:
    write_jsonl(path, (c.to_dict() for c in cands))


def load_votes(path: PathLike) -> Dict[str, List[bool]]:
    '''
    Reads annotator votes from JSON Lines `{item_id, votes: [bool, bool, bool]}`
    '''
    votes = {}
    for obj in read_jsonl(path):
        try:
            item_id, raw = str(obj['item_id']), obj['votes']
        except KeyError as e:
            raise FiltrationError(f'{path}: vote record lacks field {e}') from None
        if not isinstance(raw, list) or len(raw) != 3 or not all(isinstance(v, bool) for v in raw):
            raise FiltrationError(f'{path}: item {item_id!r} needs exactly 3 boolean votes, got {raw!r}')
        votes[item_id] = raw
    return votes


@dataclass
class StageResult:
    kept: List[Candidate] = field(default_factory=list)
    rejected: List[Candidate] = field(default_factory=list)
    needs_review: List[Candidate] = field(default_factory=list)

    def add(self, cand: Candidate, stage: str, verdict: str, rationale: str = '') -> None:
        cand.record(stage, verdict, rationale)
        {KEPT: self.kept, REJECTED: self.rejected, NEEDS_REVIEW: self.needs_review}[verdict].append(cand)


#####
# stages
#####

def stage_comment_filter(cands: Sequence[Candidate], threshold: int = 150) -> StageResult:
    '''
    Keeps candidates with strictly more than `threshold` comments
    '''
    if threshold < 0:
        raise FiltrationError(f'comment threshold must be >= 0, got {threshold}')
    result = StageResult()
    for c in cands:
        if c.comment_count > threshold:
            result.add(c, COMMENTS, KEPT, f'{c.comment_count} comments')
        else:
            result.add(c, COMMENTS, REJECTED, f'{c.comment_count} comments (need more than {threshold})')
    return result


_ANSWER_RE = re.compile(r'^[\W_]*(yes|no)\b', re.IGNORECASE)


def parse_yes_no(text: str) -> Optional[Tuple[bool, str]]:
    '''
    Reads a `yes`/`no` answer from the first non-empty line; the remaining text is the rationale

    Examples:
        >>> parse_yes_no('**Yes**, the pig stands for greed.')
        (True, 'the pig stands for greed.')
    '''
    lines = [l for l in text.strip().splitlines()]
    if not lines:
        return None
    m = _ANSWER_RE.match(lines[0].strip())
    if m is None:
        return None
    first_rest = lines[0].strip()[m.end():].lstrip('*_ ,.:;-')
    rationale = '\n'.join([first_rest] + lines[1:]).strip()
    return m.group(1).lower() == 'yes', rationale


class _Classifier:
    def __init__(self, backend: ModelBackend, stage: str, template: str, templates: Optional[PromptTemplates],
                 temperature: float, attempts: int = 3, base_delay: float = 0.5):
        self.backend = backend
        self.stage = stage
        self.template = template
        self.templates = templates or PromptTemplates()
        self.temperature = temperature
        self.attempts = attempts
        self.base_delay = base_delay

    def classify(self, variables: Dict[str, Any], images=()) -> Tuple[Optional[bool], str]:
        '''
        Returns `(verdict, rationale)`; `verdict` is None if the reply stays unreadable
        after one repair request or the backend fails
        '''
        raw = ''
        for repair in (False, True):
            system, user = self.templates.render(self.template, repair=repair, **variables)
            try:
                reply = complete_with_retries(
                    self.backend, ChatRequest(self.stage, system, user, tuple(images), self.temperature),
                    self.attempts, self.base_delay,
                )
            except BackendError as e:
                return None, f'backend error: {e}'
            raw = reply.text
            parsed = parse_yes_no(raw)
            if parsed is not None:
                return parsed
        return None, f'unreadable reply: {raw[:200]}'


def _run_classifier(cands: Sequence[Candidate], stage: str, classify: Callable[[Candidate], Tuple[Optional[bool], str]],
                    max_parallel: int) -> StageResult:
    verdicts = bounded_map(classify, list(cands), max_parallel)
    result = StageResult()
    for c, (verdict, rationale) in zip(cands, verdicts):
        if verdict is None:
            logger.warning('candidate_needs_review', item_id=c.item_id, stage=stage, reason=rationale)
            result.add(c, stage, NEEDS_REVIEW, rationale)
        else:
            result.add(c, stage, KEPT if verdict else REJECTED, rationale)
    return result


def stage_llm_filter(
    cands: Sequence[Candidate],
    classifier: ModelBackend,
    templates: Optional[PromptTemplates] = None,
    max_comments: int = 50,
    max_parallel: int = 1,
    temperature: float = 0.0,
) -> StageResult:
    '''
    Text-only check whether each video contains metaphorical logic (intro, ASR, comments)
    '''
    clf = _Classifier(classifier, LLM, 'filter_llm', templates, temperature)

    def classify(c: Candidate):
        return clf.classify({'intro': c.intro, 'asr': c.asr, 'comments': c.comments[:max_comments]})

    return _run_classifier(cands, LLM, classify, max_parallel)


def stage_mllm_verify(
    cands: Sequence[Candidate],
    verifier: ModelBackend,
    templates: Optional[PromptTemplates] = None,
    max_frames: int = 16,
    max_parallel: int = 1,
    temperature: float = 0.0,
) -> StageResult:
    '''
    Checks the text-stage analysis against the video frames; a rejection here is final
    '''
    clf = _Classifier(verifier, MLLM, 'verify_mllm', templates, temperature)

    def classify(c: Candidate):
        if not c.frame_paths:
            return None, 'frames unavailable: candidate has no frames'
        try:
            images = [encode_frame(p) for p in select_evenly(c.frame_paths, max_frames)]
        except InputError as e:
            return None, f'frames unavailable: {e}'
        return clf.classify({'intro': c.intro, 'prior_rationale': c.rationale_of(LLM)}, images)

    return _run_classifier(cands, MLLM, classify, max_parallel)


def stage_human_veto(cands: Sequence[Candidate], votes: Mapping[str, Sequence[bool]]) -> StageResult:
    '''
    Keeps a candidate only if all three annotators accept it
    '''
    for c in cands:
        v = votes.get(c.item_id)
        if v is None or len(v) != 3:
            raise FiltrationError(f'candidate {c.item_id!r} needs exactly 3 votes, got {v!r}')
    result = StageResult()
    for c in cands:
        v = votes[c.item_id]
        if all(v):
            result.add(c, HUMAN, KEPT, 'unanimous accept')
        else:
            result.add(c, HUMAN, REJECTED, f'{sum(1 for x in v if not x)} of 3 annotators dissent')
    return result


#####
# funnel
#####

Stage = Tuple[str, Callable[[List[Candidate]], StageResult]]


@dataclass
class StageReport:
    stage: str
    in_count: int
    kept: int
    rejected: int
    needs_review: int

    def to_dict(self) -> Dict[str, Any]:
        return {'stage': self.stage, 'in': self.in_count, 'kept': self.kept, 'rejected': self.rejected, 'needs_review': self.needs_review}


@dataclass
class FunnelResult:
    survivors: List[Candidate]
    rejected: Dict[str, List[Candidate]]
    needs_review: List[Candidate]
    reports: List[StageReport]


def _check_stage(name: str, cands: Sequence[Candidate], result: StageResult) -> None:
    ids_in = [c.item_id for c in cands]
    buckets = [c.item_id for c in result.kept + result.rejected + result.needs_review]
    if sorted(buckets) != sorted(ids_in):
        raise FiltrationInvariantError(f'stage {name!r} lost or duplicated candidates')
    for bucket, verdict in ((result.kept, KEPT), (result.rejected, REJECTED), (result.needs_review, NEEDS_REVIEW)):
        for c in bucket:
            if not c.stage_trace or c.stage_trace[-1].stage != name or c.stage_trace[-1].verdict != verdict:
                raise FiltrationInvariantError(f'candidate {c.item_id!r} has no {verdict} trace entry for stage {name!r}')


def run_funnel(candidates: Sequence[Candidate], stages: Sequence[Stage]) -> FunnelResult:
    '''
    Runs the stages in order, each one on the previous stage's survivors.

    Every stage must partition its input into kept/rejected/needs-review; this is checked
    on every run, as is the final partition of the whole input.
    '''
    ids = [c.item_id for c in candidates]
    if len(set(ids)) != len(ids):
        raise FiltrationError('duplicate candidate ids')
    for c in candidates:
        if c.status != KEPT:
            raise FiltrationError(f'candidate {c.item_id!r} enters the funnel already {c.status}')

    current = list(candidates)
    rejected: Dict[str, List[Candidate]] = {}
    needs_review: List[Candidate] = []
    reports = []
    for name, stage in stages:
        result = stage(current)
        _check_stage(name, current, result)
        reports.append(StageReport(name, len(current), len(result.kept), len(result.rejected), len(result.needs_review)))
        logger.info('stage_done', **reports[-1].to_dict())
        rejected.setdefault(name, []).extend(result.rejected)
        needs_review.extend(result.needs_review)
        current = result.kept

    accounted = [c.item_id for c in current] + [c.item_id for b in rejected.values() for c in b] + [c.item_id for c in needs_review]
    if sorted(accounted) != sorted(ids):
        raise FiltrationInvariantError('funnel output does not partition its input')
    return FunnelResult(current, rejected, needs_review, reports)


def check_type_balance(counts: Mapping[str, int]) -> List[str]:
    '''
    Warns about metaphor types whose sample count is more than twice or less than half
    the median count; nothing is dropped
    '''
    if not counts:
        return []
    median = float(np.median(list(counts.values())))
    warnings = []
    for name, n in sorted(counts.items()):
        if n > 2 * median or n < median / 2:
            warnings.append(f'type {name!r} has {n} samples (median {median:g})')
    for w in warnings:
        logger.warning('type_imbalance', detail=w)
    return warnings
