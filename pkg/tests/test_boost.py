import json

import pytest

from metaphorboost.backends import ReplyParseError, ScriptedBackend
from metaphorboost.boost import \
    BoostInvariantError, MediaItemError, \
    BASELINE, BOOST, BOOST_SELF, BOOST_TEXT, NO_KEYWORDS_NOTE, \
    BoostConfig, BoostFailure, BoostOutput, BoostRunner, MediaItem, \
    identify_elements, load_items, load_results, parse_keyword_list, read_item_sources, replay_retrieval, \
    result_record_from_dict, run_baseline, run_batch, run_boost, verify_replay
from metaphorboost.corpus import CorpusDoc, CorpusTextIndex
from metaphorboost.errors import InputError
from metaphorboost.frames import FrameSampler, FrameSamplerError
from metaphorboost.graph import BuildOptions, build_graph
from metaphorboost.misc import write_jsonl
from metaphorboost.taxonomy import MetaphorType


GIF = b'GIF89a\x01\x00\x01\x00'

graph = build_graph(
    [('pig', 'greed', 'd1'), ('banquet', 'greed', 'd2'), ('cat', 'hunger', 'd3'), ('banquet', 'wealth', 'd4')],
    BuildOptions(cooccur=False),
)


@pytest.fixture
def item(tmp_path):
    paths = []
    for i in range(3):
        p = tmp_path / f'f{i}.gif'
        p.write_bytes(GIF)
        paths.append(str(p))
    return MediaItem('v1', tuple(paths), 'The Feast')


def backend(identify='["pig", "banquet", "cat"]', generate='<think>pig eats</think>The pig stands for greed.', **stages):
    return ScriptedBackend(stages={'identify': identify, 'generate': generate, **stages})


#####
# keyword parsing
#####

@pytest.mark.parametrize('text, expected', [
    ('["pig", "banquet"]', ['pig', 'banquet']),
    ("['Pig', 'pig ', 'Red Flag']", ['pig', 'red flag']),
    ('Elements: ["a", "b"] and that is all.', ['a', 'b']),
    ('```json\n["x", "y"]\n```', ['x', 'y']),
    ('- pig\n- banquet\n1. cat', ['pig', 'banquet', 'cat']),
    ('pig\nbanquet', ['pig', 'banquet']),
    ('[]', []),
    ('', []),
])
def test_parse_keyword_list(text, expected):
    assert parse_keyword_list(text) == expected


@pytest.mark.parametrize('text', [
    'The video shows a pig at a banquet.',
    'I cannot tell what is happening in these frames at all',
])
def test_parse_keyword_list_invalid(text):
    with pytest.raises(ReplyParseError):
        parse_keyword_list(text)


#####
# pipeline
#####

def test_boost_end_to_end(item):
    b = backend()
    out = run_boost(item, graph, b)

    assert isinstance(out, BoostOutput)
    assert out.mode == BOOST
    assert out.keywords == ['pig', 'banquet', 'cat']
    assert out.references == ['greed', 'hunger', 'wealth']
    assert out.retrieval.labels == out.references
    assert out.retrieval.entries[0].coverage == 2
    assert out.interpretation == 'The pig stands for greed.'
    assert out.thinking == 'pig eats'
    assert out.params == {'h': 2, 'z': 10, 'temperature': 0.7, 'fallback': False}
    assert out.notes == []

    identify, generate = b.requests
    assert (identify.stage, generate.stage) == ('identify', 'generate')
    assert len(identify.images) == 3 and len(generate.images) == 3
    assert identify.temperature == 0.7
    assert 'Possible underlying concepts: greed, hunger, wealth' in generate.user
    assert 'The Feast' in generate.user


def test_boost_respects_z_and_max_frames(item):
    b = backend()
    out = run_boost(item, graph, b, BoostConfig(z=1, max_frames=2))
    assert out.references == ['greed']
    assert all(len(r.images) == 2 for r in b.requests)


def test_no_keywords(item):
    b = backend(identify='[]')
    out = run_boost(item, graph, b)
    assert out.keywords == [] and out.references == []
    assert out.notes == [NO_KEYWORDS_NOTE, 'no references']
    assert 'none (no references)' in b.calls('generate')[0].user


def test_unmatched_keywords(item):
    out = run_boost(item, graph, backend(identify='["spaceship"]'))
    assert out.references == []
    assert out.retrieval.unmatched == ('spaceship',)
    assert out.notes == ['no references']


def test_identify_failure(item):
    out = run_boost(item, graph, backend(identify='I cannot tell what is happening in these frames at all'))
    assert isinstance(out, BoostFailure)
    assert out.stage == 'identify'
    assert out.raw_reply.startswith('I cannot tell')
    assert out.to_dict()['status'] == 'failed'


def test_generate_failure(item):
    out = run_boost(item, graph, backend(generate='   '))
    assert isinstance(out, BoostFailure) and out.stage == 'generate'


def test_transport_failure(item):
    cfg = BoostConfig(attempts=2, base_delay=0)
    b = backend(identify={'transport_error': 'connection reset'})
    out = run_boost(item, graph, b, cfg)
    assert out.stage == 'identify'
    assert len(b.calls('identify')) == 2


def test_missing_frame(tmp_path):
    missing = MediaItem('v2', (str(tmp_path / 'gone.png'),), 'x')
    out = run_boost(missing, graph, backend())
    assert isinstance(out, BoostFailure) and out.stage == 'frames'


def test_baseline(item):
    b = backend()
    out = run_baseline(item, b)
    assert out.mode == BASELINE
    assert out.keywords == [] and out.retrieval is None and out.references == []
    assert b.calls('identify') == []
    assert 'Possible underlying concepts' not in b.calls('generate')[0].user
    assert out.to_dict()['retrieval'] is None


def test_self_augmentation(item):
    b = backend(augment='["greed", "gluttony", "Greed", "excess"]')
    out = BoostRunner(b, BoostConfig(z=2, augmentation='self')).run(item)
    assert out.mode == BOOST_SELF
    assert out.references == ['greed', 'gluttony']
    assert out.retrieval is None
    assert b.calls('augment')[0].images == ()
    assert 'pig, banquet, cat' in b.calls('augment')[0].user


def test_text_augmentation(item):
    index = CorpusTextIndex([
        CorpusDoc('c#1', 'A pig at a banquet is a symbol of greed.', 'en', 'c'),
        CorpusDoc('c#2', 'The moon is a lantern.', 'en', 'c'),
    ])
    out = BoostRunner(backend(), BoostConfig(augmentation='text'), text_index=index).run(item)
    assert out.mode == BOOST_TEXT
    assert out.references == ['A pig at a banquet is a symbol of greed.']


def test_missing_augmentation_source(item):
    with pytest.raises(InputError):
        BoostRunner(backend(), BoostConfig(augmentation='text')).run(item)
    with pytest.raises(InputError):
        BoostRunner(backend()).run(item)


def test_identify_elements(item):
    b = backend(identify='["Pig", "pig"]')
    assert identify_elements(item, b) == ['pig']


def test_run_batch_order(tmp_path):
    (tmp_path / 'f.gif').write_bytes(GIF)
    items = [MediaItem(f'v{i}', (str(tmp_path / 'f.gif'),), f'title {i}') for i in range(6)]
    runner = BoostRunner(backend(), graph=graph)
    results = run_batch(items, runner.run, max_parallel=3)
    assert [r.item_id for r in results] == [f'v{i}' for i in range(6)]


@pytest.mark.parametrize('kwargs', [
    {'h': 0},
    {'z': -1},
    {'temperature': 2.5},
    {'augmentation': 'web'},
])
def test_invalid_boost_config(kwargs):
    with pytest.raises(InputError):
        BoostConfig(**kwargs)


@pytest.mark.parametrize('kwargs', [
    {'mode': BOOST},
    {'mode': BASELINE, 'references': ['greed']},
    {'mode': BASELINE, 'keywords': ['pig']},
    {'mode': 'sideways'},
])
def test_output_invariants(kwargs):
    with pytest.raises(BoostInvariantError):
        BoostOutput(item_id='x', backend='b', params={}, interpretation='i', **kwargs)


#####
# items / results files
#####

def test_load_items(tmp_path):
    (tmp_path / 'frames').mkdir()
    for i in range(20):
        (tmp_path / 'frames' / f'{i:03d}.gif').write_bytes(GIF)
    write_jsonl(tmp_path / 'items.jsonl', [
        {'item_id': 'a', 'title': 'A', 'frame_paths': ['frames/000.gif'], 'metaphor_type': 'Body Language'},
        {'item_id': 'b', 'title': 'B', 'frames_dir': 'frames'},
    ])
    a, b = load_items(tmp_path / 'items.jsonl')
    assert a.frame_paths == (str(tmp_path / 'frames' / '000.gif'),)
    assert a.metaphor_type is MetaphorType.BODY_LANGUAGE
    assert len(b.frame_paths) == 16
    assert b.metaphor_type is None


@pytest.mark.parametrize('records', [
    [{'title': 'no id', 'frame_paths': ['x.gif']}],
    [{'item_id': 'a', 'frame_paths': ['x.gif']}, {'item_id': 'a', 'frame_paths': ['y.gif']}],
    [{'item_id': 'a', 'title': 'no frames'}],
    [{'item_id': 'a', 'frame_paths': []}],
])
def test_load_items_invalid(tmp_path, records):
    write_jsonl(tmp_path / 'items.jsonl', records)
    with pytest.raises(MediaItemError):
        load_items(tmp_path / 'items.jsonl')


def test_item_sources_defer_sampling(tmp_path):
    (tmp_path / 'frames').mkdir()
    (tmp_path / 'frames' / '000.gif').write_bytes(GIF)
    (tmp_path / 'clip.mp4').write_bytes(b'')
    write_jsonl(tmp_path / 'items.jsonl', [
        {'item_id': 'a', 'frames_dir': 'frames'},
        {'item_id': 'b', 'video': 'clip.mp4'},
    ])
    a, b = read_item_sources(tmp_path / 'items.jsonl')
    assert not a.needs_sampling
    assert b.needs_sampling
    assert b.video_ref == str(tmp_path / 'clip.mp4')

    sampler = FrameSampler('definitely-not-a-real-sampler-binary {video} {out}', tmp_path / 'work')
    a.check(sampler)
    b.check(sampler)
    assert not (tmp_path / 'work').exists()
    with pytest.raises(FrameSamplerError, match='not found'):
        b.prepare(sampler)


def test_results_roundtrip_and_replay(item, tmp_path):
    out = run_boost(item, graph, backend())
    failure = BoostFailure('v9', 'identify', 'boom', 'raw')
    write_jsonl(tmp_path / 'results.jsonl', [out.to_dict(), failure.to_dict()])

    loaded, failed = load_results(tmp_path / 'results.jsonl')
    assert loaded == out
    assert failed == failure
    assert verify_replay(loaded, graph)
    assert replay_retrieval(loaded, graph) == out.retrieval


def test_replay_detects_changed_graph(item):
    out = run_boost(item, graph, backend())
    changed = build_graph(
        [('pig', 'greed', 'd1'), ('banquet', 'greed', 'd2'), ('cat', 'hunger', 'd3'), ('banquet', 'zeal', 'd4')],
        BuildOptions(cooccur=False),
    )
    assert not verify_replay(out, changed)


def test_replay_needs_boost_output(item):
    out = run_baseline(item, backend())
    with pytest.raises(InputError):
        replay_retrieval(out, graph)


def test_result_record_json_stable(item):
    out = run_boost(item, graph, backend())
    assert result_record_from_dict(json.loads(json.dumps(out.to_dict()))) == out
