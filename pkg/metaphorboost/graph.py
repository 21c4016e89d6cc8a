import itertools
import unicodedata
from collections import Counter, defaultdict, deque
from dataclasses import dataclass, field
from enum import Enum, IntFlag
from typing import Any, Dict, FrozenSet, Iterable, List, Mapping, Optional, Sequence, Set, Tuple

import numpy as np
import structlog

from .errors import InputError, InvariantError


logger = structlog.get_logger(__name__)


class GraphBuildError(InputError):
    pass


class GraphInvariantError(InvariantError):
    pass


#####
# labels
#####

def _is_edge_junk(ch: str) -> bool:
    return ch.isspace() or unicodedata.category(ch).startswith('P')


def normalize_label(raw: str) -> str:
    '''
    Lexical concept normalization: NFC, lowercase, whitespace collapsed,
    leading/trailing punctuation stripped. Idempotent.

    Returns an empty string if nothing is left; callers must reject that.

    Examples:
        >>> normalize_label('  The River  ')
        'the river'
        >>> normalize_label('“Storm!”')
        'storm'
    '''
    s = unicodedata.normalize('NFC', raw)
    s = unicodedata.normalize('NFC', s.lower())
    s = ' '.join(s.split())

    start, end = 0, len(s)
    while start < end and _is_edge_junk(s[start]):
        start += 1
    while end > start and _is_edge_junk(s[end - 1]):
        end -= 1
    return s[start:end]


def label_tokens(label: str) -> List[str]:
    return label.split(' ') if label else []


#####
# types
#####

class Role(IntFlag):
    SOURCE = 1
    TARGET = 2


class EdgeKind(Enum):
    MAPPING = 'm'
    COOCCUR = 'c'
    SIMILAR = 's'

    @property
    def char(self) -> str:
        return self.value


@dataclass(frozen=True)
class ConceptNode:
    id: int
    label: str
    raw_labels: FrozenSet[str]
    roles: Role
    freq: int

    @property
    def role_names(self) -> List[str]:
        return [r.name.lower() for r in (Role.SOURCE, Role.TARGET) if r in self.roles]


@dataclass(frozen=True)
class Edge:
    '''
    Undirected edge with `u < v`; `weight` is the number of supporting observations
    '''

    u: int
    v: int
    kind: EdgeKind
    weight: int

    @property
    def sort_key(self) -> Tuple[int, int, str]:
        return (self.u, self.v, self.kind.char)


@dataclass(frozen=True)
class Rejection:
    source: str
    target: str
    doc_id: str
    reason: str


@dataclass(frozen=True)
class GraphMeta:
    node_count: int
    edge_count: int
    digest: str
    params: Mapping[str, Any] = field(default_factory=dict)
    rejected: Tuple[Rejection, ...] = ()


class MetaphorGraph:
    '''
    Immutable concept graph; derives the label index, symmetric adjacency and token index
    from the node/edge lists and validates all structural invariants on construction.

    Safe to share between threads once constructed.
    '''

    def __init__(self, nodes: Sequence[ConceptNode], edges: Sequence[Edge], meta: Optional[GraphMeta] = None):
        self.nodes: Tuple[ConceptNode, ...] = tuple(nodes)
        self.edges: Tuple[Edge, ...] = tuple(sorted(edges, key=lambda e: e.sort_key))

        self.label_index: Dict[str, int] = {}
        for i, node in enumerate(self.nodes):
            if node.id != i:
                raise GraphInvariantError(f'node ids must be contiguous, found id {node.id} at position {i}')
            if not node.label or normalize_label(node.label) != node.label:
                raise GraphInvariantError(f'node {i} has non-normalized label {node.label!r}')
            if node.freq < 1 or not node.roles:
                raise GraphInvariantError(f'node {i} ({node.label!r}) needs freq >= 1 and at least one role')
            if node.label in self.label_index:
                raise GraphInvariantError(f'duplicate label {node.label!r}')
            self.label_index[node.label] = i

        adjacency: List[List[Tuple[int, EdgeKind]]] = [[] for _ in self.nodes]
        seen: Set[Tuple[int, int, str]] = set()
        for e in self.edges:
            if not (0 <= e.u < e.v < len(self.nodes)):
                raise GraphInvariantError(f'invalid edge endpoints ({e.u}, {e.v})')
            if e.weight < 1:
                raise GraphInvariantError(f'edge ({e.u}, {e.v}) has non-positive weight {e.weight}')
            if e.sort_key in seen:
                raise GraphInvariantError(f'duplicate {e.kind.name.lower()} edge ({e.u}, {e.v})')
            seen.add(e.sort_key)
            adjacency[e.u].append((e.v, e.kind))
            adjacency[e.v].append((e.u, e.kind))
        self.adjacency: Tuple[Tuple[Tuple[int, EdgeKind], ...], ...] = tuple(
            tuple(sorted(a, key=lambda x: (x[0], x[1].char))) for a in adjacency
        )

        token_index: Dict[str, List[int]] = defaultdict(list)
        for node in self.nodes:
            for tok in set(label_tokens(node.label)):
                token_index[tok].append(node.id)
        self.token_index: Dict[str, Tuple[int, ...]] = {k: tuple(sorted(v)) for k, v in token_index.items()}

        if meta is None:
            from .graphfile import graph_digest
            meta = GraphMeta(len(self.nodes), len(self.edges), graph_digest(self))
        if meta.node_count != len(self.nodes) or meta.edge_count != len(self.edges):
            raise GraphInvariantError(
                f'meta counts ({meta.node_count}, {meta.edge_count}) do not match graph ({len(self.nodes)}, {len(self.edges)})'
            )
        self.meta = meta

    def __len__(self):
        return len(self.nodes)

    def __repr__(self):
        return f'<MetaphorGraph nodes={len(self.nodes)} edges={len(self.edges)} digest={self.meta.digest[:12]}>'

    def node_id(self, label: str) -> Optional[int]:
        return self.label_index.get(normalize_label(label))

    def neighbors(self, node_id: int) -> Tuple[Tuple[int, EdgeKind], ...]:
        self.check_node_id(node_id)
        return self.adjacency[node_id]

    def degree(self, node_id: int) -> int:
        return len(self.neighbors(node_id))

    def check_node_id(self, node_id: int) -> None:
        if not isinstance(node_id, (int, np.integer)) or not (0 <= node_id < len(self.nodes)):
            raise GraphInvariantError(f'invalid node id {node_id!r} (graph has {len(self.nodes)} nodes)')


#####
# building
#####

@dataclass
class BuildOptions:
    '''
    Link predicate toggles; mapping edges are always built

    Attributes:
        cooccur (bool): connect every pair of concepts extracted from the same document
            that is not already linked by a mapping edge
        similar (bool): connect concepts whose embedding cosine similarity reaches `similarity_threshold`
        embedder (EmbeddingClient, optional): required if `similar` is enabled
    '''

    cooccur: bool = True
    similar: bool = False
    similarity_threshold: float = 0.85
    embedder: Optional[Any] = None
    similarity_block: int = 1024

    def as_params(self) -> Dict[str, Any]:
        params: Dict[str, Any] = {'cooccur': self.cooccur, 'similar': self.similar}
        if self.similar:
            params['similarity_threshold'] = self.similarity_threshold
        return params


PairInput = Tuple[str, str, str]


def build_graph(pairs: Iterable[PairInput], options: Optional[BuildOptions] = None) -> MetaphorGraph:
    '''
    Builds the concept graph from `(source, target, doc_id)` triples.

    Node ids follow the lexicographic order of normalized labels, so the result is a pure
    function of the input multiset. Pairs with an empty side or `source == target` after
    normalization are skipped and recorded in `meta.rejected`.
    '''
    options = options or BuildOptions()
    if options.similar and options.embedder is None:
        raise GraphBuildError('similar edges are enabled but no embedding client was provided')

    rejected: List[Rejection] = []
    raw_labels: Dict[str, Set[str]] = defaultdict(set)
    roles: Dict[str, Role] = defaultdict(lambda: Role(0))
    freq: Counter = Counter()
    mapping: Counter = Counter()
    doc_concepts: Dict[str, Set[str]] = defaultdict(set)

    for source_raw, target_raw, doc_id in pairs:
        source, target = normalize_label(source_raw), normalize_label(target_raw)
        if not source or not target:
            rejected.append(Rejection(source_raw, target_raw, doc_id, 'empty label after normalization'))
            continue
        if source == target:
            rejected.append(Rejection(source_raw, target_raw, doc_id, 'source equals target'))
            continue

        raw_labels[source].add(source_raw)
        raw_labels[target].add(target_raw)
        roles[source] |= Role.SOURCE
        roles[target] |= Role.TARGET
        freq[source] += 1
        freq[target] += 1
        mapping[tuple(sorted((source, target)))] += 1
        doc_concepts[doc_id].update((source, target))

    for r in rejected:
        logger.warning('pair_rejected', doc_id=r.doc_id, source=r.source, target=r.target, reason=r.reason)

    labels = sorted(freq)
    ids = {label: i for i, label in enumerate(labels)}
    nodes = [
        ConceptNode(ids[label], label, frozenset(raw_labels[label]), roles[label], freq[label])
        for label in labels
    ]

    edges = [Edge(ids[a], ids[b], EdgeKind.MAPPING, w) for (a, b), w in mapping.items()]

    if options.cooccur:
        # a mapping edge already links its own pair
        mapped = {(ids[a], ids[b]) for a, b in mapping}
        cooccur: Counter = Counter()
        for concepts in doc_concepts.values():
            for a, b in itertools.combinations(sorted(ids[c] for c in concepts), 2):
                if (a, b) not in mapped:
                    cooccur[(a, b)] += 1
        edges.extend(Edge(a, b, EdgeKind.COOCCUR, w) for (a, b), w in cooccur.items())

    if options.similar and labels:
        edges.extend(_similar_edges(labels, options))

    graph = MetaphorGraph(nodes, edges, meta=None)
    graph.meta = GraphMeta(
        graph.meta.node_count, graph.meta.edge_count, graph.meta.digest,
        params=options.as_params(), rejected=tuple(rejected)
    )
    logger.info('graph_built', nodes=len(graph.nodes), edges=len(graph.edges), rejected=len(rejected))
    return graph


def _similar_edges(labels: Sequence[str], options: BuildOptions) -> List[Edge]:
    vectors = np.asarray(options.embedder.embed(list(labels)), dtype=np.float64)
    if vectors.shape[0] != len(labels):
        raise GraphBuildError(f'embedder returned {vectors.shape[0]} vectors for {len(labels)} labels')
    norms = np.linalg.norm(vectors, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    unit = vectors / norms

    edges = []
    block = max(1, options.similarity_block)
    for start in range(0, len(labels), block):
        sims = unit[start:start + block] @ unit.T
        rows, cols = np.nonzero(sims >= options.similarity_threshold)
        for r, c in zip(rows.tolist(), cols.tolist()):
            u = start + r
            if u < c:
                edges.append(Edge(u, c, EdgeKind.SIMILAR, 1))
    return edges


#####
# querying primitives
#####

def match_keywords(graph: MetaphorGraph, keywords: Iterable[str], fallback: bool = False) -> Dict[str, Set[int]]:
    '''
    Maps each keyword to the ids of the nodes it refers to: exact match on the normalized
    label, otherwise (with `fallback`) every node sharing at least one full token with it.
    Unmatched keywords map to an empty set.
    '''
    matched: Dict[str, Set[int]] = {}
    for keyword in keywords:
        label = normalize_label(keyword)
        hits: Set[int] = set()
        if label:
            exact = graph.label_index.get(label)
            if exact is not None:
                hits.add(exact)
            elif fallback:
                for tok in set(label_tokens(label)):
                    hits.update(graph.token_index.get(tok, ()))
        if not hits:
            logger.info('keyword_unmatched', keyword=keyword)
        matched[keyword] = hits
    return matched


def hop_ball(graph: MetaphorGraph, seeds: Iterable[int], h: int) -> Dict[int, int]:
    '''
    Multi-source breadth-first search over all edge kinds; returns
    `{node id: hop distance}` for nodes at distance 1..h (seeds excluded)
    '''
    if h < 1:
        raise GraphInvariantError(f'h must be >= 1, got {h}')
    seed_set = set(seeds)
    if not seed_set:
        raise GraphInvariantError('hop_ball needs at least one seed')
    for s in seed_set:
        graph.check_node_id(s)

    dist = {s: 0 for s in seed_set}
    queue = deque(sorted(seed_set))
    while queue:
        node = queue.popleft()
        d = dist[node]
        if d == h:
            continue
        for nb, _ in graph.adjacency[node]:
            if nb not in dist:
                dist[nb] = d + 1
                queue.append(nb)
    return {n: d for n, d in dist.items() if d >= 1}
