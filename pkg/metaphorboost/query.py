import random
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, List, Optional, Set, Tuple

import structlog

from .errors import InputError
from .graph import MetaphorGraph, hop_ball, match_keywords, normalize_label


logger = structlog.get_logger(__name__)

RANKED = 'ranked'
RANDOM = 'random'


class QueryError(InputError):
    pass


@dataclass(frozen=True)
class QueryMode:
    '''
    `ranked` (common-connection order) or `random` (seeded uniform sample of the candidates)
    '''

    kind: str = RANKED
    seed: Optional[int] = None

    def __post_init__(self):
        if self.kind not in (RANKED, RANDOM):
            raise QueryError(f'unknown query mode {self.kind!r} (expected {RANKED!r} or {RANDOM!r})')
        if self.kind == RANDOM and not isinstance(self.seed, int):
            raise QueryError('random mode needs an integer seed')
        if self.kind == RANKED and self.seed is not None:
            raise QueryError('ranked mode does not take a seed')

    @classmethod
    def ranked(cls) -> 'QueryMode':
        return cls(RANKED)

    @classmethod
    def random(cls, seed: int) -> 'QueryMode':
        return cls(RANDOM, seed)

    def to_dict(self) -> Dict[str, Any]:
        return {'kind': self.kind, 'seed': self.seed}

    @classmethod
    def from_dict(cls, obj: Dict[str, Any]) -> 'QueryMode':
        return cls(obj.get('kind', RANKED), obj.get('seed'))


@dataclass(frozen=True)
class RetrievalEntry:
    node_id: int
    label: str
    coverage: int
    direct_links: int
    min_hops: int

    def to_dict(self) -> Dict[str, Any]:
        return {
            'node_id': self.node_id, 'label': self.label, 'coverage': self.coverage,
            'direct_links': self.direct_links, 'min_hops': self.min_hops,
        }


@dataclass(frozen=True)
class QueryParams:
    h: int
    z: int
    mode: QueryMode = QueryMode()

    def to_dict(self) -> Dict[str, Any]:
        return {'h': self.h, 'z': self.z, 'mode': self.mode.to_dict()}


@dataclass(frozen=True)
class RetrievalResult:
    entries: Tuple[RetrievalEntry, ...]
    params: QueryParams
    matched: Dict[str, Tuple[int, ...]] = field(default_factory=dict)
    unmatched: Tuple[str, ...] = ()

    @property
    def labels(self) -> List[str]:
        return [e.label for e in self.entries]

    def to_dict(self) -> Dict[str, Any]:
        return {
            'entries': [e.to_dict() for e in self.entries],
            'params': self.params.to_dict(),
            'matched': {k: list(v) for k, v in sorted(self.matched.items())},
            'unmatched': list(self.unmatched),
        }


def rank_key(graph: MetaphorGraph, entry: RetrievalEntry) -> Tuple[int, int, int, int, str]:
    '''
    Total order of the common-connection ranking: coverage desc, direct links desc,
    min hops asc, node frequency desc, label asc
    '''
    return (-entry.coverage, -entry.direct_links, entry.min_hops, -graph.nodes[entry.node_id].freq, entry.label)


def score_candidates(
    graph: MetaphorGraph, matched: Dict[str, Set[int]], h: int
) -> List[RetrievalEntry]:
    '''
    Scores the union of the keywords' h-hop balls (minus every keyword-matched node);
    `matched` must map distinct keywords to their non-empty node sets
    '''
    all_matched: Set[int] = set().union(*matched.values()) if matched else set()
    coverage: Dict[int, int] = {}
    min_hops: Dict[int, int] = {}
    for seeds in matched.values():
        for node, d in hop_ball(graph, seeds, h).items():
            if node in all_matched:
                continue
            coverage[node] = coverage.get(node, 0) + 1
            min_hops[node] = min(d, min_hops.get(node, d))

    entries = []
    for node in coverage:
        direct = sum(1 for nb, _ in graph.adjacency[node] if nb in all_matched)
        entries.append(RetrievalEntry(node, graph.nodes[node].label, coverage[node], direct, min_hops[node]))
    return entries


def query_common_connection(
    graph: MetaphorGraph,
    keywords: Iterable[str],
    h: int = 2,
    z: int = 10,
    mode: Optional[QueryMode] = None,
    fallback: bool = False,
) -> RetrievalResult:
    '''
    Retrieves up to `z` concepts that link to the most keywords within `h` hops.

    Keywords are deduplicated by normalized form; a keyword's matches come from
    :func:`match_keywords`. In ranked mode the candidates are sorted by :func:`rank_key`,
    in random mode `min(z, |candidates|)` are sampled without replacement using `mode.seed`
    (and then presented in ranked order).
    '''
    mode = mode or QueryMode.ranked()
    if not isinstance(h, int) or h < 1:
        raise QueryError(f'h must be an integer >= 1, got {h!r}')
    if not isinstance(z, int) or z < 0:
        raise QueryError(f'z must be an integer >= 0, got {z!r}')
    params = QueryParams(h, z, mode)

    distinct: Dict[str, str] = {}
    for kw in keywords:
        label = normalize_label(kw)
        if label and label not in distinct:
            distinct[label] = kw
    found = match_keywords(graph, list(distinct), fallback=fallback)
    matched = {k: v for k, v in found.items() if v}
    unmatched = tuple(k for k, v in found.items() if not v)

    recorded = {k: tuple(sorted(v)) for k, v in matched.items()}
    if z == 0 or not matched:
        return RetrievalResult((), params, recorded, unmatched)

    candidates = score_candidates(graph, matched, h)
    if mode.kind == RANKED:
        candidates.sort(key=lambda e: rank_key(graph, e))
        chosen = candidates[:z]
    else:
        pool = sorted(candidates, key=lambda e: e.node_id)
        chosen = random.Random(mode.seed).sample(pool, min(z, len(pool)))
        chosen.sort(key=lambda e: rank_key(graph, e))

    logger.debug('graph_queried', keywords=len(distinct), matched=len(matched), candidates=len(candidates), returned=len(chosen))
    return RetrievalResult(tuple(chosen), params, recorded, unmatched)


def result_from_dict(obj: Dict[str, Any]) -> RetrievalResult:
    params = obj['params']
    return RetrievalResult(
        tuple(RetrievalEntry(**e) for e in obj['entries']),
        QueryParams(params['h'], params['z'], QueryMode.from_dict(params.get('mode') or {})),
        {k: tuple(v) for k, v in obj.get('matched', {}).items()},
        tuple(obj.get('unmatched', ())),
    )

