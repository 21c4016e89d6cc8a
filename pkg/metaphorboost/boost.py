import ast
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import structlog

from .backends import ChatRequest, ModelBackend, ReplyParseError, complete_with_retries
from .corpus import CorpusTextIndex
from .errors import InputError, InvariantError, MetaphorBoostError
from .frames import FrameSampler, prepare_frames, select_evenly
from .graph import MetaphorGraph, normalize_label
from .imageinfo import ImagePart, encode_frame
from .misc import bounded_map, read_jsonl
from .query import QueryMode, RetrievalResult, query_common_connection, result_from_dict
from .taxonomy import MetaphorType
from .templates import PromptTemplates


logger = structlog.get_logger(__name__)

BASELINE = 'baseline'
BOOST = 'boost'
BOOST_SELF = 'boost_self'
BOOST_TEXT = 'boost_text'

# augmentation setting -> output mode
AUGMENTATION_MODES = {'graph': BOOST, 'self': BOOST_SELF, 'text': BOOST_TEXT}

NO_KEYWORDS_NOTE = 'no keywords identified'


class MediaItemError(InputError):
    pass


class BoostInvariantError(InvariantError):
    pass


@dataclass(frozen=True)
class MediaItem:
    item_id: str
    frame_paths: Tuple[str, ...]
    title: str
    metaphor_type: Optional[MetaphorType] = None

    def __post_init__(self):
        if not self.frame_paths:
            raise MediaItemError(f'item {self.item_id!r} has no frames')

    def check_frames(self) -> None:
        missing = [p for p in self.frame_paths if not Path(p).is_file()]
        if missing:
            raise MediaItemError(f'item {self.item_id!r}: missing frame(s) {", ".join(missing)}')


@dataclass(frozen=True)
class ItemSource:
    '''
    A media item as listed in the items file, before any frames are sampled
    '''

    item_id: str
    title: str
    metaphor_type: Optional[MetaphorType] = None
    frame_paths: Tuple[str, ...] = ()
    video_ref: Optional[str] = None

    @property
    def needs_sampling(self) -> bool:
        return self.video_ref is not None and not Path(self.video_ref).is_dir()

    def prepare(self, sampler: Optional[FrameSampler] = None) -> MediaItem:
        frames = self.frame_paths
        if self.video_ref is not None:
            sampler = sampler or FrameSampler(None, Path(self.video_ref).parent)
            frames = tuple(str(p) for p in prepare_frames(self.video_ref, sampler))
        return MediaItem(self.item_id, frames, self.title, self.metaphor_type)

    def check(self, sampler: FrameSampler) -> None:
        '''
        Validates the item without running the frame sampler
        '''
        if self.needs_sampling:
            sampler.check(self.video_ref)
        else:
            self.prepare(sampler).check_frames()


def read_item_sources(path: Union[str, Path]) -> List[ItemSource]:
    '''
    Reads media items from JSON Lines: `{item_id, title, frame_paths | frames_dir | video,
    metaphor_type?}`; relative paths are resolved against the file's directory
    '''
    base = Path(path).resolve().parent
    sources = []
    seen = set()
    for obj in read_jsonl(path):
        try:
            item_id = str(obj['item_id'])
        except KeyError:
            raise MediaItemError(f'{path}: item without item_id') from None
        if item_id in seen:
            raise MediaItemError(f'{path}: duplicate item_id {item_id!r}')
        seen.add(item_id)

        title = str(obj.get('title', ''))
        mtype = MetaphorType.parse_optional(obj.get('metaphor_type'))
        if 'frame_paths' in obj:
            frames = tuple(str(base / p) for p in obj['frame_paths'])
            if not frames:
                raise MediaItemError(f'item {item_id!r} has no frames')
            sources.append(ItemSource(item_id, title, mtype, frame_paths=frames))
        elif 'frames_dir' in obj or 'video' in obj:
            ref = str(base / (obj.get('frames_dir') or obj['video']))
            sources.append(ItemSource(item_id, title, mtype, video_ref=ref))
        else:
            raise MediaItemError(f'{path}: item {item_id!r} has neither frame_paths, frames_dir nor video')
    return sources


def load_items(path: Union[str, Path], sampler: Optional[FrameSampler] = None) -> List[MediaItem]:
    return [s.prepare(sampler) for s in read_item_sources(path)]


@dataclass
class BoostConfig:
    '''
    Inference settings; the defaults retrieve 10 concepts within 2 hops and sample at 0.7
    '''

    h: int = 2
    z: int = 10
    temperature: float = 0.7
    max_frames: int = 16
    mode: QueryMode = field(default_factory=QueryMode.ranked)
    fallback: bool = False
    augmentation: str = 'graph'
    attempts: int = 3
    base_delay: float = 0.5

    def __post_init__(self):
        if not isinstance(self.h, int) or self.h < 1:
            raise InputError(f'h must be an integer >= 1, got {self.h!r}')
        if not isinstance(self.z, int) or self.z < 0:
            raise InputError(f'z must be an integer >= 0, got {self.z!r}')
        if not 0 <= self.temperature <= 2:
            raise InputError(f'temperature must be in [0, 2], got {self.temperature!r}')
        if self.augmentation not in AUGMENTATION_MODES:
            raise InputError(f'unknown augmentation {self.augmentation!r}')

    def params(self) -> Dict[str, Any]:
        return {'h': self.h, 'z': self.z, 'temperature': self.temperature, 'fallback': self.fallback}


@dataclass
class BoostOutput:
    '''
    Every artifact of one inference run, enough to audit and replay it

    Attributes:
        references (list of str): exactly what was injected into the generate prompt
        notes (list of str): remarks such as an empty keyword list
    '''

    item_id: str
    mode: str
    backend: str
    params: Dict[str, Any]
    interpretation: str
    thinking: str = ''
    keywords: List[str] = field(default_factory=list)
    retrieval: Optional[RetrievalResult] = None
    references: List[str] = field(default_factory=list)
    notes: List[str] = field(default_factory=list)

    def __post_init__(self):
        if self.mode == BASELINE:
            if self.retrieval is not None or self.keywords or self.references:
                raise BoostInvariantError(f'{self.item_id}: baseline output carries retrieval artifacts')
        elif self.mode == BOOST:
            if self.retrieval is None:
                raise BoostInvariantError(f'{self.item_id}: boost output without retrieval')
            if not self.keywords and NO_KEYWORDS_NOTE not in self.notes:
                raise BoostInvariantError(f'{self.item_id}: boost output without keywords or an empty-match note')
        elif self.mode in (BOOST_SELF, BOOST_TEXT):
            if self.retrieval is not None:
                raise BoostInvariantError(f'{self.item_id}: {self.mode} output must not carry a graph retrieval')
        else:
            raise BoostInvariantError(f'unknown output mode {self.mode!r}')

    def to_dict(self) -> Dict[str, Any]:
        return {
            'status': 'ok',
            'item_id': self.item_id,
            'mode': self.mode,
            'backend': self.backend,
            'params': dict(self.params),
            'keywords': list(self.keywords),
            'retrieval': self.retrieval.to_dict() if self.retrieval is not None else None,
            'references': list(self.references),
            'thinking': self.thinking,
            'interpretation': self.interpretation,
            'notes': list(self.notes),
        }

    @classmethod
    def from_dict(cls, obj: Dict[str, Any]) -> 'BoostOutput':
        retrieval = obj.get('retrieval')
        return cls(
            item_id=obj['item_id'], mode=obj['mode'], backend=obj.get('backend', ''),
            params=dict(obj.get('params') or {}), interpretation=obj.get('interpretation', ''),
            thinking=obj.get('thinking', ''), keywords=list(obj.get('keywords') or []),
            retrieval=result_from_dict(retrieval) if retrieval else None,
            references=list(obj.get('references') or []), notes=list(obj.get('notes') or []),
        )


@dataclass
class BoostFailure:
    item_id: str
    stage: str
    error: str
    raw_reply: str = ''

    def to_dict(self) -> Dict[str, Any]:
        return {'status': 'failed', 'item_id': self.item_id, 'stage': self.stage, 'error': self.error, 'raw_reply': self.raw_reply}


BoostResult = Union[BoostOutput, BoostFailure]


def result_record_from_dict(obj: Dict[str, Any]) -> BoostResult:
    if obj.get('status') == 'failed':
        return BoostFailure(str(obj['item_id']), obj.get('stage', ''), obj.get('error', ''), obj.get('raw_reply', ''))
    return BoostOutput.from_dict(obj)


def load_results(path: Union[str, Path]) -> List[BoostResult]:
    return [result_record_from_dict(obj) for obj in read_jsonl(path)]


#####
# keyword parsing
#####

_BRACKET_RE = re.compile(r'\[.*?\]', re.DOTALL)
_BULLET_RE = re.compile(r'^(?:[-*•]|\d+[.)])\s*')


def _as_str_list(value: Any) -> Optional[List[str]]:
    if isinstance(value, (list, tuple)) and all(isinstance(v, str) for v in value):
        return list(value)
    return None


def _parse_bracketed(text: str) -> Optional[List[str]]:
    for candidate in [text.strip()] + _BRACKET_RE.findall(text):
        for loads in (json.loads, ast.literal_eval):
            try:
                found = _as_str_list(loads(candidate))
            except (ValueError, SyntaxError, TypeError, MemoryError, RecursionError):
                continue
            if found is not None:
                return found
    return None


def _parse_lines(text: str) -> Optional[List[str]]:
    items = [_BULLET_RE.sub('', line.strip()).strip() for line in text.splitlines()]
    items = [i for i in items if i]
    if not items:
        return None
    # prose is not a keyword list
    if any(len(i.split()) > 6 or i[-1] in '.?!:' for i in items):
        return None
    return items


def parse_keyword_list(text: str) -> List[str]:
    '''
    Parses a keyword list reply: a JSON/Python style list (anywhere in the reply), otherwise
    one item per line. Returns normalized keywords without duplicates, in reply order.

    Examples:
        >>> parse_keyword_list('["pig", "banquet", "Cat", "cat"]')
        ['pig', 'banquet', 'cat']
    '''
    if not text.strip():
        return []
    items = _parse_bracketed(text)
    if items is None:
        items = _parse_lines(text)
    if items is None:
        raise ReplyParseError('reply is neither a bracketed list nor newline-separated keywords', raw_reply=text)

    out: List[str] = []
    for item in items:
        label = normalize_label(item)
        if label and label not in out:
            out.append(label)
    return out


#####
# stages
#####

class StageError(MetaphorBoostError):
    def __init__(self, stage: str, error: Exception):
        super().__init__(f'[{stage}] {error}')
        self.stage = stage
        self.error = error
        self.raw_reply = getattr(error, 'raw_reply', '')


def _encode_frames(item: MediaItem, max_frames: int) -> Tuple[ImagePart, ...]:
    item.check_frames()
    return tuple(encode_frame(p) for p in select_evenly(list(item.frame_paths), max_frames))


def _ask(backend: ModelBackend, stage: str, prompt: Tuple[str, str], images: Sequence[ImagePart], cfg: BoostConfig):
    system, user = prompt
    return complete_with_retries(backend, ChatRequest(stage, system, user, tuple(images), cfg.temperature), cfg.attempts, cfg.base_delay)


def identify_elements(
    item: MediaItem,
    backend: ModelBackend,
    templates: Optional[PromptTemplates] = None,
    cfg: Optional[BoostConfig] = None,
    images: Optional[Sequence[ImagePart]] = None,
) -> List[str]:
    '''
    Asks the backend for the visual elements of the item and returns them as keywords
    '''
    cfg = cfg or BoostConfig()
    templates = templates or PromptTemplates()
    if images is None:
        images = _encode_frames(item, cfg.max_frames)
    reply = _ask(backend, 'identify', templates.render('identify', title=item.title), images, cfg)
    keywords = parse_keyword_list(reply.text)
    logger.debug('elements_identified', item_id=item.item_id, keywords=keywords)
    return keywords


class BoostRunner:
    '''
    Runs the identify -> augment -> generate pipeline (or the plain baseline) for single items.

    Any stage error is turned into a :class:`BoostFailure` naming the stage.
    '''

    def __init__(
        self,
        backend: ModelBackend,
        cfg: Optional[BoostConfig] = None,
        graph: Optional[MetaphorGraph] = None,
        templates: Optional[PromptTemplates] = None,
        text_index: Optional[CorpusTextIndex] = None,
    ):
        self.backend = backend
        self.cfg = cfg or BoostConfig()
        self.graph = graph
        self.templates = templates or PromptTemplates()
        self.text_index = text_index

    def check_augmentation(self) -> None:
        if self.cfg.augmentation == 'graph' and self.graph is None:
            raise InputError('graph augmentation needs a loaded graph')
        if self.cfg.augmentation == 'text' and self.text_index is None:
            raise InputError('text augmentation needs a corpus text index')

    def _stage(self, name: str, fn: Callable[[], Any]) -> Any:
        try:
            return fn()
        except MetaphorBoostError as e:
            raise StageError(name, e) from e

    def _generate(self, item: MediaItem, images, template: str, **variables):
        reply = _ask(self.backend, 'generate', self.templates.render(template, title=item.title, **variables), images, self.cfg)
        if not reply.text.strip():
            raise ReplyParseError('empty interpretation', raw_reply=reply.text)
        return reply

    def _augment(self, keywords: List[str], images) -> Tuple[Optional[RetrievalResult], List[str]]:
        cfg = self.cfg
        if cfg.augmentation == 'graph':
            retrieval = query_common_connection(self.graph, keywords, cfg.h, cfg.z, cfg.mode, cfg.fallback)
            return retrieval, retrieval.labels
        if cfg.augmentation == 'text':
            return None, self.text_index.search(keywords, cfg.z)
        if not keywords or cfg.z == 0:
            return None, []
        reply = _ask(self.backend, 'augment', self.templates.render('self_augment', keywords=keywords, z=cfg.z), (), cfg)
        return None, parse_keyword_list(reply.text)[:cfg.z]

    def run(self, item: MediaItem) -> BoostResult:
        cfg = self.cfg
        mode = AUGMENTATION_MODES[cfg.augmentation]
        self.check_augmentation()
        try:
            images = self._stage('frames', lambda: _encode_frames(item, cfg.max_frames))
            keywords = self._stage('identify', lambda: identify_elements(item, self.backend, self.templates, cfg, images))
            retrieval, references = self._stage('augment' if mode != BOOST else 'query', lambda: self._augment(keywords, images))
            reply = self._stage('generate', lambda: self._generate(item, images, 'generate', references=references))
        except StageError as e:
            logger.warning('item_failed', item_id=item.item_id, stage=e.stage, error=str(e.error))
            return BoostFailure(item.item_id, e.stage, str(e.error), e.raw_reply)

        notes = [] if keywords else [NO_KEYWORDS_NOTE]
        if not references:
            notes.append('no references')
        return BoostOutput(
            item.item_id, mode, self.backend.name, cfg.params(), reply.text, reply.thinking,
            keywords, retrieval, list(references), notes,
        )

    def run_baseline(self, item: MediaItem) -> BoostResult:
        cfg = self.cfg
        try:
            images = self._stage('frames', lambda: _encode_frames(item, cfg.max_frames))
            reply = self._stage('generate', lambda: self._generate(item, images, 'baseline'))
        except StageError as e:
            logger.warning('item_failed', item_id=item.item_id, stage=e.stage, error=str(e.error))
            return BoostFailure(item.item_id, e.stage, str(e.error), e.raw_reply)
        return BoostOutput(item.item_id, BASELINE, self.backend.name, cfg.params(), reply.text, reply.thinking)


def run_boost(
    item: MediaItem,
    graph: MetaphorGraph,
    backend: ModelBackend,
    cfg: Optional[BoostConfig] = None,
    templates: Optional[PromptTemplates] = None,
) -> BoostResult:
    return BoostRunner(backend, cfg, graph, templates).run(item)


def run_baseline(
    item: MediaItem,
    backend: ModelBackend,
    cfg: Optional[BoostConfig] = None,
    templates: Optional[PromptTemplates] = None,
) -> BoostResult:
    return BoostRunner(backend, cfg, None, templates).run_baseline(item)


def run_batch(items: Sequence[MediaItem], runner: Callable[[MediaItem], BoostResult], max_parallel: int = 1) -> List[BoostResult]:
    '''
    Runs every item, at most `max_parallel` at a time; results keep the input order
    '''
    results = bounded_map(runner, list(items), max_parallel)
    failed = sum(1 for r in results if isinstance(r, BoostFailure))
    logger.info('batch_done', ok=len(results) - failed, failed=failed)
    return results


#####
# audit
#####

def replay_retrieval(output: BoostOutput, graph: MetaphorGraph) -> RetrievalResult:
    '''
    Re-runs the query stage on the recorded keywords and parameters
    '''
    if output.mode != BOOST or output.retrieval is None:
        raise InputError(f'{output.item_id}: only graph-boosted outputs can be replayed (mode {output.mode!r})')
    params = output.retrieval.params
    return query_common_connection(
        graph, output.keywords, params.h, params.z, params.mode, bool(output.params.get('fallback', False))
    )


def verify_replay(output: BoostOutput, graph: MetaphorGraph) -> bool:
    replayed = replay_retrieval(output, graph)
    ok = replayed.to_dict() == output.retrieval.to_dict()
    if not ok:
        logger.warning('replay_mismatch', item_id=output.item_id)
    return ok
