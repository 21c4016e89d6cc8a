import random

import pytest

from metaphorboost.graph import build_graph
from metaphorboost.graphfile import \
    GraphChecksumError, GraphFileError, \
    dump_graph, dumps_graph, escape_label, graph_digest, load_graph, loads_graph, unescape_label


test_graph = build_graph([('Time', 'river', 'd1'), ('life', 'a long road', 'd2'), ('back\\slash', 'river', 'd2')])


def test_format():
    text = dumps_graph(test_graph)
    lines = text.split('\n')
    assert lines[0] == f'MKG1 5 {len(test_graph.edges)} {graph_digest(test_graph)}'
    assert lines[1] == 'N 0 1 2 a\\slong\\sroad'
    assert lines[2] == 'N 1 1 1 back\\\\slash'
    assert lines[-1] == ''
    assert lines[5] == 'N 4 1 1 time'
    # 3 mapping edges plus the 4 unmapped pairs of d2
    assert len(test_graph.edges) == 7
    assert all(l.startswith('E ') for l in lines[6:-1])


def test_load_roundtrip(tmp_path):
    path = tmp_path / 'g.mkg'
    dump_graph(test_graph, path)
    loaded = load_graph(path)
    assert loaded.nodes == tuple(
        n.__class__(n.id, n.label, frozenset([n.label]), n.roles, n.freq) for n in test_graph.nodes
    )
    assert loaded.edges == test_graph.edges
    assert loaded.meta.digest == test_graph.meta.digest
    assert loaded.meta.params == {}
    assert path.read_bytes() == dumps_graph(loaded).encode('utf-8')


@pytest.mark.parametrize('label', ['plain', 'two words', 'new\nline', 'back\\s', '\\\\', ' \\n '])
def test_escape(label):
    escaped = escape_label(label)
    assert ' ' not in escaped and '\n' not in escaped
    assert unescape_label(escaped) == label


@pytest.mark.parametrize('text', ['bad\\x', 'trailing\\'])
def test_invalid_escape(text):
    with pytest.raises(GraphFileError):
        unescape_label(text)


def test_digest_mismatch():
    text = dumps_graph(test_graph)
    tampered = text.replace('N 4 1 1 time', 'N 4 9 1 time')
    assert tampered != text
    with pytest.raises(GraphChecksumError) as e:
        loads_graph(tampered)
    assert e.value.expected == test_graph.meta.digest
    assert e.value.actual != e.value.expected
    assert e.value.expected in str(e.value) and e.value.actual in str(e.value)

    assert loads_graph(tampered, skip_verify_digest=True).nodes[4].freq == 9


@pytest.mark.parametrize('mutate', [
    lambda lines: lines[:1],
    lambda lines: [lines[0].replace('MKG1', 'MKG2')] + lines[1:],
    lambda lines: lines[:2] + lines[3:],
    lambda lines: lines + ['X 1 2'],
    lambda lines: lines[:1] + lines[-1:] + lines[1:-1],
    lambda lines: [l.replace('E 0 ', 'E 0 q') if l.startswith('E 0 ') else l for l in lines],
])
def test_malformed(mutate):
    lines = dumps_graph(test_graph).rstrip('\n').split('\n')
    with pytest.raises(GraphFileError):
        loads_graph('\n'.join(mutate(lines)) + '\n', skip_verify_digest=True)


def test_invariants_checked_on_load():
    header = 'MKG1 2 1 x'
    body = ['N 0 1 1 b', 'N 1 1 2 b', 'E 0 1 m 1']
    with pytest.raises(GraphFileError):
        loads_graph('\n'.join([header] + body) + '\n', skip_verify_digest=True)


def test_empty_and_missing(tmp_path):
    with pytest.raises(GraphFileError):
        loads_graph('')
    with pytest.raises(GraphFileError):
        load_graph(tmp_path / 'nope.mkg')


def test_random_graphs_stable():
    rng = random.Random(0)
    for _ in range(20):
        pairs = [(f's{rng.randrange(40)}', f't{rng.randrange(40)}', f'd{rng.randrange(8)}') for _ in range(60)]
        g = build_graph(pairs)
        text = dumps_graph(g)
        assert dumps_graph(loads_graph(text)) == text
