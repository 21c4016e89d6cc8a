import csv
import json
import re
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Set, Tuple, Union

import yaml
import structlog

from .backends import BackendError, ChatRequest, ModelBackend, ReplyParseError, complete_with_retries
from .errors import InputError, InvariantError
from .graph import BuildOptions, EdgeKind, MetaphorGraph, build_graph, label_tokens, normalize_label
from .misc import JsonLinesError, bounded_map, iter_jsonl, read_jsonl, write_jsonl
from .templates import PromptTemplates


logger = structlog.get_logger(__name__)

PathLike = Union[str, Path]


class CorpusError(InputError):
    pass


class ExtractionInvariantError(InvariantError):
    pass


#####
# manifest / loading
#####

@dataclass(frozen=True)
class DatasetEntry:
    '''
    One corpus file: where it lives, which JSON field holds the text,
    and whether its texts need translating to English before extraction
    '''

    name: str
    path: Path
    text_field: str = 'text'
    translate: bool = False


@dataclass
class DatasetManifest:
    datasets: Dict[str, DatasetEntry]

    @classmethod
    def load(cls, path: PathLike) -> 'DatasetManifest':
        '''
        Loads a YAML manifest `{datasets: {name: {path, text_field, translate}}}`;
        relative paths are resolved against the manifest's directory
        '''
        path = Path(path)
        try:
            raw = yaml.safe_load(path.read_text(encoding='utf-8'))
        except OSError as e:
            raise CorpusError(f'cannot read manifest {path}: {e}') from e
        except yaml.YAMLError as e:
            raise CorpusError(f'invalid manifest {path}: {e}') from e
        return cls.from_dict(raw, base=path.parent)

    @classmethod
    def from_dict(cls, raw: Any, base: Optional[Path] = None) -> 'DatasetManifest':
        if not isinstance(raw, dict) or not isinstance(raw.get('datasets'), dict):
            raise CorpusError('manifest must contain a `datasets` mapping')
        datasets = {}
        for name, spec in raw['datasets'].items():
            if not isinstance(spec, dict) or 'path' not in spec:
                raise CorpusError(f'dataset {name!r}: missing `path`')
            p = Path(spec['path'])
            if base is not None and not p.is_absolute():
                p = base / p
            datasets[str(name)] = DatasetEntry(
                str(name), p, str(spec.get('text_field', 'text')), bool(spec.get('translate', False))
            )
        return cls(datasets)

    def paths(self) -> List[Path]:
        return [d.path for d in self.datasets.values()]

    def entry_for(self, path: PathLike) -> DatasetEntry:
        resolved = Path(path).resolve()
        for entry in self.datasets.values():
            if entry.path.resolve() == resolved:
                return entry
        raise CorpusError(f'{path} is not listed in the manifest')


@dataclass(frozen=True)
class CorpusDoc:
    doc_id: str
    text: str
    lang: str
    dataset: str


@dataclass
class CorpusLoad:
    docs: List[CorpusDoc]
    counts: Dict[str, int]
    skipped: Dict[str, int]
    errors: List[str] = field(default_factory=list)


def load_corpus(paths: Sequence[PathLike], manifest: DatasetManifest) -> CorpusLoad:
    '''
    Loads JSON Lines corpus files using the manifest's per-dataset field mapping.

    Document ids are `<dataset>#<line number>`. Lines that are not JSON objects, or whose text
    is empty, are skipped and counted; an object lacking the dataset's text field is a hard error.
    '''
    docs: List[CorpusDoc] = []
    counts: Dict[str, int] = {}
    skipped: Dict[str, int] = {}
    errors: List[str] = []

    for path in paths:
        entry = manifest.entry_for(path)
        if not Path(path).is_file():
            raise CorpusError(f'dataset {entry.name!r}: file {path} does not exist')
        lang = 'other' if entry.translate else 'en'
        n = n_skipped = 0
        for lineno, obj in iter_jsonl(path):
            if isinstance(obj, JsonLinesError):
                n_skipped += 1
                errors.append(str(obj))
                continue
            if entry.text_field not in obj:
                raise CorpusError(f'dataset {entry.name!r}: {path}:{lineno} lacks required field {entry.text_field!r}')
            text = obj[entry.text_field]
            if not isinstance(text, str) or not text.strip():
                n_skipped += 1
                errors.append(f'{path}:{lineno}: empty or non-string text')
                continue
            docs.append(CorpusDoc(f'{entry.name}#{lineno}', text, lang, entry.name))
            n += 1
        counts[entry.name] = counts.get(entry.name, 0) + n
        skipped[entry.name] = skipped.get(entry.name, 0) + n_skipped
        if n_skipped:
            logger.warning('corpus_lines_skipped', dataset=entry.name, skipped=n_skipped)
        logger.info('corpus_loaded', dataset=entry.name, docs=n)

    return CorpusLoad(docs, counts, skipped, errors)


#####
# extraction
#####

@dataclass(frozen=True)
class ExtractedPair:
    doc_id: str
    source: str
    target: str
    extractor: str
    confidence: Optional[float] = None


@dataclass(frozen=True)
class PairRejection:
    doc_id: str
    source: str
    target: str
    reason: str


@dataclass
class ExtractionReport:
    docs_total: int = 0
    ok: int = 0
    failed: int = 0
    skipped: int = 0
    pairs: int = 0
    rejections: List[PairRejection] = field(default_factory=list)
    failures: Dict[str, str] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def check(self) -> None:
        '''
        Document counts must add up to `docs_total`
        '''
        if self.ok + self.failed + self.skipped != self.docs_total:
            raise ExtractionInvariantError(
                f'document count conservation violated: {self.ok} ok + {self.failed} failed + '
                f'{self.skipped} skipped != {self.docs_total} total')
        if self.failed != len(self.failures):
            raise ExtractionInvariantError(f'{self.failed} failed documents but {len(self.failures)} failure reasons')


@dataclass
class ExtractionResult:
    pairs: List[ExtractedPair]
    report: ExtractionReport


_LIST_RE = re.compile(r'\[.*\]', re.DOTALL)


def parse_json_list(text: str) -> List[Any]:
    '''
    Parses a JSON list reply; if the whole reply isn't one, retries on the outermost
    bracketed span (models like to wrap lists in prose or code fences)
    '''
    for candidate in (text.strip(), *(m.group(0) for m in [_LIST_RE.search(text)] if m)):
        try:
            value = json.loads(candidate)
        except json.JSONDecodeError:
            continue
        if isinstance(value, list):
            return value
    raise ReplyParseError('reply does not contain a JSON list', raw_reply=text)


class ExtractorClient:
    '''
    Extracts `(source, target)` concept pairs from a batch of texts with one backend call
    '''

    def __init__(self, backend: ModelBackend, templates: Optional[PromptTemplates] = None,
                 template_id: str = 'extract', temperature: float = 0.0,
                 attempts: int = 3, base_delay: float = 0.5):
        self.backend = backend
        self.templates = templates or PromptTemplates()
        self.template_id = template_id
        self.temperature = temperature
        self.attempts = attempts
        self.base_delay = base_delay

    @property
    def name(self) -> str:
        return self.backend.name

    def extract(self, texts: Sequence[str]) -> List[List[Tuple[str, str, Optional[float]]]]:
        system, user = self.templates.render(self.template_id, docs=list(texts))
        reply = complete_with_retries(
            self.backend, ChatRequest('extract', system, user, temperature=self.temperature),
            self.attempts, self.base_delay,
        )
        items = parse_json_list(reply.text)

        out: List[List[Tuple[str, str, Optional[float]]]] = [[] for _ in texts]
        for item in items:
            if not isinstance(item, dict) or not isinstance(item.get('source'), str) or not isinstance(item.get('target'), str):
                raise ReplyParseError(f'invalid pair item {item!r}', raw_reply=reply.text)
            doc = item.get('doc', 1 if len(texts) == 1 else None)
            if not isinstance(doc, int) or not 1 <= doc <= len(texts):
                raise ReplyParseError(f'pair item references unknown doc {doc!r}', raw_reply=reply.text)
            conf = item.get('confidence')
            if conf is not None and not (isinstance(conf, (int, float)) and 0 <= conf <= 1):
                conf = None
            out[doc - 1].append((item['source'].strip(), item['target'].strip(), conf))
        return out


class TranslationClient:
    def __init__(self, backend: ModelBackend, templates: Optional[PromptTemplates] = None,
                 attempts: int = 3, base_delay: float = 0.5):
        self.backend = backend
        self.templates = templates or PromptTemplates()
        self.attempts = attempts
        self.base_delay = base_delay

    def translate(self, text: str) -> str:
        system, user = self.templates.render('translate', text=text)
        reply = complete_with_retries(
            self.backend, ChatRequest('translate', system, user, temperature=0.0), self.attempts, self.base_delay
        )
        if not reply.text.strip():
            raise ReplyParseError('empty translation', raw_reply=reply.text)
        return reply.text.strip()


def _validate_pair(doc_id: str, source: str, target: str) -> Optional[str]:
    s, t = normalize_label(source), normalize_label(target)
    if not s or not t:
        return 'empty label after normalization'
    if s == t:
        return 'source equals target'
    return None


def extract_pairs(
    docs: Sequence[CorpusDoc],
    extractor: ExtractorClient,
    batch: int = 8,
    max_parallel: int = 1,
    translator: Optional[TranslationClient] = None,
    max_docs: Optional[int] = None,
) -> ExtractionResult:
    '''
    Runs the extractor over the documents, one call per batch of `batch` docs.

    Failed batches (transport errors after retries, unparseable replies) mark their docs as
    failed; invalid pairs are rejected and reported. Pairs are ordered by document position,
    then by position in the reply.
    '''
    if batch < 1:
        raise InputError(f'batch must be >= 1, got {batch}')
    report = ExtractionReport(docs_total=len(docs))
    todo = list(docs if max_docs is None else docs[:max_docs])
    report.skipped = len(docs) - len(todo)

    needs_translation = [d for d in todo if d.lang != 'en']
    if needs_translation and translator is None:
        raise InputError(f'{len(needs_translation)} documents need translation but no translator is configured')

    failures: Dict[str, str] = {}

    def _prepare(doc: CorpusDoc) -> Optional[CorpusDoc]:
        if doc.lang == 'en':
            return doc
        try:
            return CorpusDoc(doc.doc_id, translator.translate(doc.text), 'en', doc.dataset)
        except BackendError as e:
            failures[doc.doc_id] = f'translate: {e}'
            return None

    prepared = [d for d in bounded_map(_prepare, todo, max_parallel) if d is not None]
    batches = [prepared[i:i + batch] for i in range(0, len(prepared), batch)]

    def _run(chunk: List[CorpusDoc]):
        try:
            return chunk, extractor.extract([d.text for d in chunk]), None
        except BackendError as e:
            return chunk, None, e

    pairs: List[ExtractedPair] = []
    for chunk, results, error in bounded_map(_run, batches, max_parallel):
        if error is not None:
            for d in chunk:
                failures[d.doc_id] = f'extract: {error}'
            logger.warning('extraction_failed', docs=[d.doc_id for d in chunk], error=str(error))
            continue
        for doc, doc_pairs in zip(chunk, results):
            for source, target, conf in doc_pairs:
                reason = _validate_pair(doc.doc_id, source, target)
                if reason is not None:
                    report.rejections.append(PairRejection(doc.doc_id, source, target, reason))
                    continue
                pairs.append(ExtractedPair(doc.doc_id, source, target, extractor.name, conf))

    report.failures = {d.doc_id: failures[d.doc_id] for d in todo if d.doc_id in failures}
    report.failed = len(report.failures)
    report.ok = sum(1 for d in todo if d.doc_id not in failures)
    report.pairs = len(pairs)
    report.check()
    for r in report.rejections:
        logger.warning('pair_rejected', doc_id=r.doc_id, source=r.source, target=r.target, reason=r.reason)
    logger.info('extraction_done', ok=report.ok, failed=report.failed, skipped=report.skipped, pairs=report.pairs)
    return ExtractionResult(pairs, report)


def save_pairs(path: PathLike, pairs: Sequence[ExtractedPair]) -> None:
    write_jsonl(path, (asdict(p) for p in pairs))


def load_pairs(path: PathLike) -> List[ExtractedPair]:
    out = []
    for obj in read_jsonl(path):
        try:
            out.append(ExtractedPair(
                str(obj['doc_id']), str(obj['source']), str(obj['target']),
                str(obj.get('extractor', '')), obj.get('confidence'),
            ))
        except KeyError as e:
            raise CorpusError(f'{path}: pair record lacks field {e}') from e
    return out


#####
# graph ingestion
#####

@dataclass
class BuildReport:
    nodes: int
    edges: int
    edges_by_kind: Dict[str, int]
    top_concepts: List[Tuple[str, int]]
    rejected: int
    digest: str

    def to_dict(self) -> Dict[str, Any]:
        d = asdict(self)
        d['top_concepts'] = [{'label': l, 'degree': n} for l, n in self.top_concepts]
        return d


def build_report(graph: MetaphorGraph, top: int = 10) -> BuildReport:
    by_kind = Counter(e.kind for e in graph.edges)
    ranked = sorted(graph.nodes, key=lambda n: (-len(graph.adjacency[n.id]), n.label))[:top]
    return BuildReport(
        nodes=len(graph.nodes),
        edges=len(graph.edges),
        edges_by_kind={k.name.lower(): by_kind.get(k, 0) for k in EdgeKind},
        top_concepts=[(n.label, len(graph.adjacency[n.id])) for n in ranked],
        rejected=len(graph.meta.rejected),
        digest=graph.meta.digest,
    )


def ingest_to_graph(pairs: Sequence[ExtractedPair], options: Optional[BuildOptions] = None) -> MetaphorGraph:
    '''
    Builds the graph from validated pairs and logs the build report
    '''
    graph = build_graph(((p.source, p.target, p.doc_id) for p in pairs), options)
    report = build_report(graph)
    logger.info('graph_ingested', nodes=report.nodes, edges=report.edges, **{f'edges_{k}': v for k, v in report.edges_by_kind.items()})
    return graph


#####
# plain-text retrieval (ablation without graph structure)
#####

class CorpusTextIndex:
    '''
    Keyword lookup over raw corpus texts: a document scores one point per distinct keyword
    whose tokens all occur in it; ties keep corpus order
    '''

    def __init__(self, docs: Sequence[CorpusDoc], snippet_chars: int = 300):
        self.docs = list(docs)
        self.snippet_chars = snippet_chars
        self._tokens: List[Set[str]] = [
            {normalize_label(t) for t in doc.text.split()} - {''}
            for doc in self.docs
        ]

    def search(self, keywords: Sequence[str], z: int) -> List[str]:
        wanted = []
        for kw in keywords:
            toks = set(label_tokens(normalize_label(kw)))
            if toks and toks not in wanted:
                wanted.append(toks)
        if z <= 0 or not wanted:
            return []
        scored = []
        for i, toks in enumerate(self._tokens):
            score = sum(1 for w in wanted if w <= toks)
            if score:
                scored.append((-score, i))
        scored.sort()
        return [' '.join(self.docs[i].text.split())[:self.snippet_chars] for _, i in scored[:z]]


#####
# commonsense graph import
#####

COMMONSENSE_EXTRACTOR = 'conceptnet'


def _concept_label(uri: str, lang: str) -> Optional[str]:
    # /c/<lang>/<term>[/<pos>/...]
    parts = uri.split('/')
    if len(parts) < 4 or parts[1] != 'c' or parts[2] != lang:
        return None
    return parts[3].replace('_', ' ')


def _edge_weight(row: Sequence[str]) -> Optional[float]:
    if len(row) < 5:
        return None
    try:
        weight = json.loads(row[4]).get('weight')
    except (json.JSONDecodeError, AttributeError):
        return None
    return float(weight) if isinstance(weight, (int, float)) else None


def load_commonsense_pairs(
    path: PathLike,
    relations: Optional[Sequence[str]] = None,
    lang: str = 'en',
    limit: Optional[int] = None,
) -> List[ExtractedPair]:
    '''
    Reads a ConceptNet assertions dump (tab-separated `uri, relation, start, end, info`) as
    concept pairs, so a general commonsense graph can stand in for the metaphor graph.

    The start concept becomes the source and the end concept the target. Only edges with
    both ends in `lang` are kept; `relations` (e.g. `['/r/IsA']`) narrows the relation
    types. Each edge is its own document.
    '''
    wanted = set(relations) if relations else None
    pairs: List[ExtractedPair] = []
    skipped: Counter = Counter()
    try:
        f = open(path, encoding='utf-8', newline='')
    except OSError as e:
        raise CorpusError(f'cannot read commonsense edges {path}: {e}') from e
    with f:
        for lineno, row in enumerate(csv.reader(f, delimiter='\t', quoting=csv.QUOTE_NONE), 1):
            if not row:
                continue
            if len(row) < 4:
                raise CorpusError(f'{path}:{lineno}: expected at least 4 tab-separated columns, got {len(row)}')
            uri, rel, start, end = row[:4]
            if wanted is not None and rel not in wanted:
                skipped['relation'] += 1
                continue
            source, target = _concept_label(start, lang), _concept_label(end, lang)
            if source is None or target is None:
                skipped['language'] += 1
                continue
            doc_id = uri or f'{Path(path).name}#{lineno}'
            reason = _validate_pair(doc_id, source, target)
            if reason is not None:
                skipped[reason] += 1
                continue
            pairs.append(ExtractedPair(doc_id, source, target, COMMONSENSE_EXTRACTOR, _edge_weight(row)))
            if limit is not None and len(pairs) >= limit:
                break
    logger.info('commonsense_loaded', path=str(path), pairs=len(pairs), skipped=dict(skipped))
    return pairs
