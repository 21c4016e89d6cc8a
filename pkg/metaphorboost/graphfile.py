import hashlib
from pathlib import Path
from typing import Any, List, Tuple, Union

import structlog

from .errors import InputError
from .graph import ConceptNode, Edge, EdgeKind, GraphInvariantError, GraphMeta, MetaphorGraph, Role


logger = structlog.get_logger(__name__)

MAGIC = 'MKG1'

_ESCAPES = {'\\': '\\\\', '\n': '\\n', ' ': '\\s'}
_UNESCAPES = {'\\': '\\', 'n': '\n', 's': ' '}
_KINDS = {k.char: k for k in EdgeKind}


class GraphFileError(InputError):
    '''
    Error raised on malformed graph files
    '''


class GraphChecksumError(GraphFileError):
    '''
    Error containing :attr:`expected` and :attr:`actual` digests,
    raised when the body of a graph file does not match its header digest
    '''

    expected: str
    actual: str

    def __init__(self, message: str, expected: str, actual: str, *args: Any):
        super().__init__(message, expected, actual, *args)
        self.expected = expected
        self.actual = actual

    def __str__(self):
        return f'{self.args[0]}\n  expected: {self.expected}\n  got:      {self.actual}'


#####
# label escaping
#####

def escape_label(label: str) -> str:
    return ''.join(_ESCAPES.get(ch, ch) for ch in label)


def unescape_label(text: str) -> str:
    out = []
    it = iter(text)
    for ch in it:
        if ch != '\\':
            out.append(ch)
            continue
        nxt = next(it, None)
        if nxt not in _UNESCAPES:
            raise GraphFileError(f'invalid escape sequence in label {text!r}')
        out.append(_UNESCAPES[nxt])
    return ''.join(out)


#####
# encoding
#####

def _body_lines(nodes, edges) -> List[str]:
    lines = [
        f'N {n.id} {n.freq} {int(n.roles)} {escape_label(n.label)}'
        for n in nodes
    ]
    lines.extend(
        f'E {e.u} {e.v} {e.kind.char} {e.weight}'
        for e in sorted(edges, key=lambda e: e.sort_key)
    )
    return lines


def _digest(lines: List[str]) -> str:
    return hashlib.sha256('\n'.join(lines).encode('utf-8')).hexdigest()


def graph_digest(graph: MetaphorGraph) -> str:
    '''
    sha256 hex digest over the serialized node and edge lines
    '''
    return _digest(_body_lines(graph.nodes, graph.edges))


def dumps_graph(graph: MetaphorGraph) -> str:
    body = _body_lines(graph.nodes, graph.edges)
    header = f'{MAGIC} {len(graph.nodes)} {len(graph.edges)} {_digest(body)}'
    return '\n'.join([header, *body]) + '\n'


def dump_graph(graph: MetaphorGraph, path: Union[str, Path]) -> None:
    # newline='' keeps the file byte-identical across platforms
    with open(path, 'w', encoding='utf-8', newline='') as f:
        f.write(dumps_graph(graph))
    logger.info('graph_written', path=str(path), nodes=len(graph.nodes), edges=len(graph.edges), digest=graph.meta.digest)


#####
# decoding
#####

def _int(field: str, lineno: int) -> int:
    try:
        return int(field)
    except ValueError:
        raise GraphFileError(f'line {lineno}: expected an integer, got {field!r}')


def _parse_node(fields: List[str], lineno: int) -> ConceptNode:
    if len(fields) != 5:
        raise GraphFileError(f'line {lineno}: node records have 5 fields, got {len(fields)}')
    node_id, freq, roles = (_int(f, lineno) for f in fields[1:4])
    if not 1 <= roles <= 3:
        raise GraphFileError(f'line {lineno}: invalid roles bitmask {roles}')
    label = unescape_label(fields[4])
    return ConceptNode(node_id, label, frozenset([label]), Role(roles), freq)


def _parse_edge(fields: List[str], lineno: int) -> Edge:
    if len(fields) != 5:
        raise GraphFileError(f'line {lineno}: edge records have 5 fields, got {len(fields)}')
    u, v = _int(fields[1], lineno), _int(fields[2], lineno)
    if fields[3] not in _KINDS:
        raise GraphFileError(f'line {lineno}: unknown edge kind {fields[3]!r}')
    if u >= v:
        raise GraphFileError(f'line {lineno}: edge endpoints must satisfy u < v, got ({u}, {v})')
    return Edge(u, v, _KINDS[fields[3]], _int(fields[4], lineno))


def _parse_header(line: str) -> Tuple[int, int, str]:
    fields = line.split(' ')
    if len(fields) != 4 or fields[0] != MAGIC:
        raise GraphFileError(f'invalid header {line!r}, expected `{MAGIC} <nodes> <edges> <digest>`')
    return _int(fields[1], 1), _int(fields[2], 1), fields[3]


def loads_graph(text: str, skip_verify_digest: bool = False) -> MetaphorGraph:
    '''
    Parses a graph file, verifying header counts and digest.

    Raises :class:`GraphFileError` on malformed input and :class:`GraphChecksumError`
    on digest mismatches (unless `skip_verify_digest` is set).
    '''
    lines = text.split('\n')
    if lines and lines[-1] == '':
        lines.pop()
    if not lines:
        raise GraphFileError('empty graph file')

    node_count, edge_count, expected = _parse_header(lines[0])
    body = lines[1:]

    nodes, edges = [], []
    for lineno, line in enumerate(body, start=2):
        fields = line.split(' ')
        if fields[0] == 'N':
            if edges:
                raise GraphFileError(f'line {lineno}: node record after edge records')
            nodes.append(_parse_node(fields, lineno))
        elif fields[0] == 'E':
            edges.append(_parse_edge(fields, lineno))
        else:
            raise GraphFileError(f'line {lineno}: unknown record type {fields[0]!r}')

    if (len(nodes), len(edges)) != (node_count, edge_count):
        raise GraphFileError(
            f'header declares {node_count} nodes / {edge_count} edges, file contains {len(nodes)} / {len(edges)}'
        )

    actual = _digest(body)
    if actual != expected and not skip_verify_digest:
        raise GraphChecksumError('graph file digest mismatch', expected, actual)

    try:
        return MetaphorGraph(nodes, edges, GraphMeta(len(nodes), len(edges), actual))
    except GraphInvariantError as e:
        raise GraphFileError(f'graph file violates graph invariants: {e}') from e


def load_graph(path: Union[str, Path], skip_verify_digest: bool = False) -> MetaphorGraph:
    try:
        with open(path, 'r', encoding='utf-8', newline='') as f:
            text = f.read()
    except OSError as e:
        raise GraphFileError(f'cannot read graph file {path}: {e}') from e
    graph = loads_graph(text, skip_verify_digest)
    logger.info('graph_loaded', path=str(path), nodes=len(graph.nodes), edges=len(graph.edges))
    return graph
