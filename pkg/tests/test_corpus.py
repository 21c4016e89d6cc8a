import json

import pytest

from metaphorboost.backends import ReplyParseError, ScriptRule, ScriptedBackend
from metaphorboost.corpus import \
    CorpusError, ExtractionInvariantError, \
    CorpusDoc, CorpusTextIndex, DatasetManifest, ExtractedPair, ExtractionReport, ExtractorClient, TranslationClient, \
    build_report, extract_pairs, ingest_to_graph, load_commonsense_pairs, load_corpus, load_pairs, parse_json_list, save_pairs
from metaphorboost.errors import InputError, InvariantError
from metaphorboost.graph import BuildOptions


def write_lines(path, lines):
    path.write_text(''.join(line + '\n' for line in lines), encoding='utf-8')
    return path


def manifest_for(tmp_path, datasets):
    raw = {'datasets': {name: {'path': str(path), **extra} for name, (path, extra) in datasets.items()}}
    return DatasetManifest.from_dict(raw)


def test_manifest_relative_paths(tmp_path):
    (tmp_path / 'data').mkdir()
    path = tmp_path / 'corpus.yaml'
    path.write_text('datasets:\n  trope:\n    path: data/trope.jsonl\n    text_field: body\n  chinese:\n    path: data/zh.jsonl\n    translate: true\n')
    m = DatasetManifest.load(path)
    assert m.datasets['trope'].path == tmp_path / 'data' / 'trope.jsonl'
    assert m.datasets['trope'].text_field == 'body'
    assert m.datasets['chinese'].translate
    assert m.datasets['chinese'].text_field == 'text'


@pytest.mark.parametrize('raw', [
    None,
    {'datasets': []},
    {'datasets': {'a': {'text_field': 'x'}}},
])
def test_manifest_invalid(raw):
    with pytest.raises(CorpusError):
        DatasetManifest.from_dict(raw)


def test_manifest_missing(tmp_path):
    with pytest.raises(CorpusError):
        DatasetManifest.load(tmp_path / 'nope.yaml')


def test_load_skips_malformed(tmp_path):
    path = write_lines(tmp_path / 'a.jsonl', [
        '{"text": "time is a river"}',
        '{"text": "life is a journey"}',
        '{not json',
        '{"text": "love is war"}',
    ])
    load = load_corpus([path], manifest_for(tmp_path, {'a': (path, {})}))
    assert [d.doc_id for d in load.docs] == ['a#1', 'a#2', 'a#4']
    assert load.counts == {'a': 3}
    assert load.skipped == {'a': 1}
    assert len(load.errors) == 1
    assert all(d.lang == 'en' for d in load.docs)


def test_load_empty_file(tmp_path):
    path = write_lines(tmp_path / 'empty.jsonl', [])
    load = load_corpus([path], manifest_for(tmp_path, {'e': (path, {})}))
    assert load.docs == [] and load.counts == {'e': 0}


def test_load_missing_field(tmp_path):
    path = write_lines(tmp_path / 'a.jsonl', ['{"text": "x"}', '{"body": "y"}'])
    with pytest.raises(CorpusError, match='lacks required field'):
        load_corpus([path], manifest_for(tmp_path, {'a': (path, {})}))


def test_load_unlisted_or_missing(tmp_path):
    listed = tmp_path / 'listed.jsonl'
    other = write_lines(tmp_path / 'other.jsonl', ['{"text": "x"}'])
    m = manifest_for(tmp_path, {'l': (listed, {})})
    with pytest.raises(CorpusError):
        load_corpus([other], m)
    with pytest.raises(CorpusError, match='does not exist'):
        load_corpus([listed], m)


def test_load_four_datasets(tmp_path):
    sizes = {'trope': 718, 'vua': 200, 'chinese_metaphor': 28000, 'chinese_simile': 8030}
    datasets = {}
    for name, n in sizes.items():
        field = 'sentence' if name == 'vua' else 'text'
        path = write_lines(tmp_path / f'{name}.jsonl', (json.dumps({field: f'{name} doc {i}'}) for i in range(n)))
        datasets[name] = (path, {'text_field': field, 'translate': name.startswith('chinese')})
    m = manifest_for(tmp_path, datasets)

    load = load_corpus(m.paths(), m)
    assert load.counts == sizes
    assert len(load.docs) == 36948
    assert sum(1 for d in load.docs if d.lang == 'en') == 918
    assert len({d.doc_id for d in load.docs}) == 36948


#####
# extraction
#####

def docs(*texts, lang='en'):
    return [CorpusDoc(f'd#{i + 1}', t, lang, 'd') for i, t in enumerate(texts)]


@pytest.mark.parametrize('text, expected', [
    ('[]', []),
    ('[1, 2]', [1, 2]),
    ('Here you go:\n```json\n[{"a": 1}]\n```', [{'a': 1}]),
])
def test_parse_json_list(text, expected):
    assert parse_json_list(text) == expected


@pytest.mark.parametrize('text', ['', '{"a": 1}', 'no list here', '[unclosed'])
def test_parse_json_list_invalid(text):
    with pytest.raises(ReplyParseError):
        parse_json_list(text)


def test_extract_batches():
    backend = ScriptedBackend(stages={'extract': json.dumps([
        {'doc': 1, 'source': 'river', 'target': 'time', 'confidence': 0.9},
        {'doc': 2, 'source': 'journey', 'target': 'life'},
        {'doc': 2, 'source': 'road', 'target': 'life', 'confidence': 7},
    ])})
    result = extract_pairs(docs('time is a river', 'life is a journey'), ExtractorClient(backend), batch=2)
    assert result.pairs == [
        ExtractedPair('d#1', 'river', 'time', 'scripted', 0.9),
        ExtractedPair('d#2', 'journey', 'life', 'scripted', None),
        ExtractedPair('d#2', 'road', 'life', 'scripted', None),
    ]
    assert result.report.ok == 2 and result.report.failed == 0
    assert len(backend.calls('extract')) == 1
    assert '[1] time is a river' in backend.requests[0].user
    assert '[2] life is a journey' in backend.requests[0].user


def test_extract_single_doc_defaults_doc_index():
    backend = ScriptedBackend(default='[{"source": "sun", "target": "hope"}]')
    result = extract_pairs(docs('a', 'b'), ExtractorClient(backend), batch=1)
    assert [(p.doc_id, p.source) for p in result.pairs] == [('d#1', 'sun'), ('d#2', 'sun')]


def test_extract_rejections():
    backend = ScriptedBackend(default=json.dumps([
        {'source': 'Time', 'target': 'time!'},
        {'source': '...', 'target': 'x'},
        {'source': 'river', 'target': 'time'},
    ]))
    result = extract_pairs(docs('t'), ExtractorClient(backend))
    assert len(result.pairs) == 1
    assert [r.reason for r in result.report.rejections] == ['source equals target', 'empty label after normalization']


def test_extract_failures():
    backend = ScriptedBackend(rules=[
        ScriptRule({'transport_error': 'down'}, contains='bad'),
        ScriptRule('not json at all', contains='garbled'),
        ScriptRule('[{"doc": 5, "source": "a", "target": "b"}]', contains='stray'),
    ], default='[{"source": "a", "target": "b"}]')
    extractor = ExtractorClient(backend, attempts=2, base_delay=0)
    result = extract_pairs(docs('good', 'bad', 'garbled', 'stray', 'fine'), extractor, batch=1)

    assert [p.doc_id for p in result.pairs] == ['d#1', 'd#5']
    assert result.report.ok == 2
    assert result.report.failed == 3
    assert sorted(result.report.failures) == ['d#2', 'd#3', 'd#4']
    assert result.report.ok + result.report.failed + result.report.skipped == result.report.docs_total


@pytest.mark.parametrize('report', [
    ExtractionReport(docs_total=3, ok=1, failed=1, failures={'d#2': 'extract: down'}),
    ExtractionReport(docs_total=2, ok=1, failed=1),
])
def test_extraction_report_check(report):
    with pytest.raises(ExtractionInvariantError) as e:
        report.check()
    assert isinstance(e.value, InvariantError)
    assert e.value.exit_code == 4


def test_extract_parallel_keeps_order():
    backend = ScriptedBackend(default='[{"source": "a", "target": "b"}]')
    result = extract_pairs(docs(*(f't{i}' for i in range(12))), ExtractorClient(backend), batch=1, max_parallel=4)
    assert [p.doc_id for p in result.pairs] == [f'd#{i + 1}' for i in range(12)]


def test_extract_max_docs():
    backend = ScriptedBackend(default='[]')
    result = extract_pairs(docs('a', 'b', 'c'), ExtractorClient(backend), max_docs=1)
    assert (result.report.ok, result.report.skipped, result.report.docs_total) == (1, 2, 3)


def test_extract_translation():
    backend = ScriptedBackend(stages={
        'translate': 'time is a river',
        'extract': '[{"source": "river", "target": "time"}]',
    })
    zh = docs('时间是河流', lang='other')
    with pytest.raises(InputError):
        extract_pairs(zh, ExtractorClient(backend))

    result = extract_pairs(zh, ExtractorClient(backend), translator=TranslationClient(backend))
    assert len(result.pairs) == 1
    assert 'time is a river' in backend.calls('extract')[0].user


def test_translation_failure_marks_doc_failed():
    backend = ScriptedBackend(stages={'translate': '   ', 'extract': '[]'})
    result = extract_pairs(docs('x', lang='other'), ExtractorClient(backend), translator=TranslationClient(backend))
    assert result.report.failed == 1
    assert result.report.failures['d#1'].startswith('translate')


def test_pairs_file(tmp_path):
    pairs = [ExtractedPair('a#1', 'river', 'time', 'm', 0.5), ExtractedPair('a#2', 'road', 'life', 'm')]
    save_pairs(tmp_path / 'p.jsonl', pairs)
    assert load_pairs(tmp_path / 'p.jsonl') == pairs

    (tmp_path / 'bad.jsonl').write_text('{"doc_id": "x"}\n')
    with pytest.raises(CorpusError):
        load_pairs(tmp_path / 'bad.jsonl')


def test_ingest_and_report():
    pairs = [
        ExtractedPair('a#1', 'river', 'time', 'm'),
        ExtractedPair('a#2', 'journey', 'life', 'm'),
        ExtractedPair('a#2', 'road', 'life', 'm'),
    ]
    graph = ingest_to_graph(pairs, BuildOptions())
    report = build_report(graph, top=2)
    assert report.nodes == 5
    assert report.edges_by_kind == {'mapping': 3, 'cooccur': 1, 'similar': 0}
    assert report.edges == 4
    assert report.top_concepts[0][0] in {'journey', 'life', 'road'}
    assert report.to_dict()['top_concepts'][0].keys() == {'label', 'degree'}
    assert report.digest == graph.meta.digest


def test_text_index():
    index = CorpusTextIndex(docs(
        'The pig at the banquet shows greed.',
        'A  red   rose\nfor love.',
        'Pigs and roses.',
        'A rose and a pig at dinner',
    ), snippet_chars=12)
    assert index.search(['pig', 'rose'], 10) == ['A rose and a', 'The pig at t', 'A red rose f']
    assert index.search(['red rose'], 1) == ['A red rose f']
    assert index.search(['pig'], 0) == []
    assert index.search(['...'], 5) == []


def test_ingest_single_pair():
    graph = ingest_to_graph([ExtractedPair('a#1', 'river', 'time', 'm')], BuildOptions())
    report = build_report(graph)
    assert report.nodes == 2
    assert report.edges_by_kind == {'mapping': 1, 'cooccur': 0, 'similar': 0}


CONCEPTNET = [
    '/a/[/r/IsA/,/c/en/pig/n/,/c/en/animal/]\t/r/IsA\t/c/en/pig/n\t/c/en/animal\t{"dataset": "/d/conceptnet/4/en", "weight": 2.0}',
    '/a/[/r/RelatedTo/,/c/en/pig/,/c/en/greedy_person/]\t/r/RelatedTo\t/c/en/pig\t/c/en/greedy_person\t{"weight": 1}',
    '/a/[/r/IsA/,/c/fr/cochon/n/,/c/en/pig/]\t/r/IsA\t/c/fr/cochon/n\t/c/en/pig\t{"weight": 1.0}',
    '/a/[/r/Synonym/,/c/en/pig/,/c/en/Pig/]\t/r/Synonym\t/c/en/pig\t/c/en/Pig\t{}',
    '/a/[/r/AtLocation/,/c/en/banquet/,/c/en/hall/]\t/r/AtLocation\t/c/en/banquet\t/c/en/hall\tnot json',
]


def test_commonsense_pairs(tmp_path):
    path = write_lines(tmp_path / 'conceptnet.csv', CONCEPTNET)
    pairs = load_commonsense_pairs(path)
    assert [(p.source, p.target, p.confidence) for p in pairs] == [
        ('pig', 'animal', 2.0),
        ('pig', 'greedy person', 1.0),
        ('banquet', 'hall', None),
    ]
    assert pairs[0].doc_id == '/a/[/r/IsA/,/c/en/pig/n/,/c/en/animal/]'
    assert {p.extractor for p in pairs} == {'conceptnet'}

    assert [(p.source, p.target) for p in load_commonsense_pairs(path, ['/r/IsA'])] == [('pig', 'animal')]
    assert len(load_commonsense_pairs(path, limit=1)) == 1
    assert [p.source for p in load_commonsense_pairs(path, lang='fr')] == []


def test_commonsense_graph_swaps_in(tmp_path):
    graph = ingest_to_graph(load_commonsense_pairs(write_lines(tmp_path / 'cn.csv', CONCEPTNET)), BuildOptions())
    assert [n.label for n in graph.nodes] == ['animal', 'banquet', 'greedy person', 'hall', 'pig']
    # one document per edge, so nothing co-occurs
    assert build_report(graph).edges_by_kind == {'mapping': 3, 'cooccur': 0, 'similar': 0}


def test_commonsense_invalid(tmp_path):
    with pytest.raises(CorpusError):
        load_commonsense_pairs(tmp_path / 'missing.csv')
    with pytest.raises(CorpusError, match='4 tab-separated columns'):
        load_commonsense_pairs(write_lines(tmp_path / 'bad.csv', ['/a/x\t/r/IsA\t/c/en/pig']))
