import functools
import itertools
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, TypeVar

import structlog
import typer

from .boost import \
    BoostConfig, BoostFailure, BoostOutput, BoostRunner, ItemSource, MediaItem, \
    load_results, read_item_sources, run_batch, verify_replay
from .config import Config
from .corpus import (
    CorpusTextIndex, DatasetManifest, ExtractorClient, TranslationClient,
    build_report, extract_pairs, ingest_to_graph, load_commonsense_pairs, load_corpus, load_pairs, save_pairs,
)
from .errors import BackendError, InputError, MetaphorBoostError
from .evaluation import (
    aggregate, judge_all, judge_consistency, load_deficiencies, load_paired_scores, load_records,
    render_deficiency_table, render_table, tally_deficiencies,
)
from .filtration import (
    COMMENTS, HUMAN, LLM, MLLM, STAGE_NAMES, check_type_balance, load_candidates, load_votes, run_funnel,
    save_candidates, stage_comment_filter, stage_human_veto, stage_llm_filter, stage_mllm_verify,
)
from .frames import FrameSampler
from .graph import BuildOptions
from .graphfile import dump_graph, load_graph
from .log import configure_logging
from .misc import bounded_map, dumps_jsonl_line, write_jsonl
from .query import RANDOM, RANKED, QueryMode, query_common_connection


logger = structlog.get_logger(__name__)

app = typer.Typer(help='Metaphor knowledge graph retrieval and evaluation toolkit', add_completion=False)

_F = TypeVar('_F', bound=Callable[..., Any])


@dataclass
class _State:
    config_path: Optional[Path]
    overrides: List[str]
    _config: Optional[Config] = None

    @property
    def config(self) -> Config:
        if self._config is None:
            self._config = Config.load(self.config_path, self.overrides)
        return self._config


def _handle_errors(fn: _F) -> _F:
    '''
    Maps package errors to their exit codes (2 input, 3 backend, 4 invariant)
    '''
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except MetaphorBoostError as e:
            logger.error('command_failed', error=str(e), kind=type(e).__name__)
            typer.echo(f'error: {e}', err=True)
            raise typer.Exit(e.exit_code)
    return wrapper  # type: ignore


def _emit(obj: Any) -> None:
    typer.echo(dumps_jsonl_line(obj))


def _dry_run(stages: Sequence[str], **details: Any) -> None:
    _emit({'dry_run': True, 'stages': list(stages), **details})


def _output_dir(cfg: Config, out_dir: Optional[Path]) -> Path:
    path = Path(out_dir or cfg.paths.output_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _graph_path(cfg: Config, graph: Optional[Path]) -> Path:
    path = graph or (Path(cfg.paths.graph) if cfg.paths.graph else None)
    if path is None:
        raise InputError('no graph file given (use --graph or paths.graph)')
    return path


@app.callback()
def _main(
    ctx: typer.Context,
    config: Optional[Path] = typer.Option(None, '--config', '-c', help='YAML config file'),
    overrides: List[str] = typer.Option([], '--set', help='Config override `section.key=value` (repeatable)'),
    log_level: str = typer.Option('info', '--log-level', help='debug, info, warning or error'),
):
    configure_logging(log_level)
    ctx.obj = _State(config, list(overrides))


#####
# build-kg
#####

@app.command('build-kg')
@_handle_errors
def cmd_build_kg(
    ctx: typer.Context,
    manifest: Optional[Path] = typer.Option(None, help='Dataset manifest (YAML)'),
    out: Optional[Path] = typer.Option(None, help='Graph file to write (default: paths.graph)'),
    pairs: Optional[Path] = typer.Option(None, help='Build from previously extracted pairs instead of calling the extractor'),
    commonsense: Optional[Path] = typer.Option(None, help='Build from a ConceptNet assertions dump instead of the metaphor corpus'),
    relations: Optional[str] = typer.Option(None, help='Comma-separated ConceptNet relations to keep, e.g. /r/IsA,/r/UsedFor'),
    save_pairs_to: Optional[Path] = typer.Option(None, '--save-pairs', help='Also write the extracted pairs as JSON Lines'),
    dry_run: bool = typer.Option(False, '--dry-run', help='Validate inputs and print the planned stages'),
):
    '''Extract concept pairs from the corpus and write the metaphor graph'''
    cfg: Config = ctx.obj.config
    out = out or (Path(cfg.paths.graph) if cfg.paths.graph else None)
    if out is None:
        raise InputError('no output graph file given (use --out or paths.graph)')

    if commonsense is not None:
        if pairs is not None or manifest is not None:
            raise InputError('--commonsense cannot be combined with --pairs or --manifest')
        wanted = [r.strip() for r in relations.split(',') if r.strip()] if relations else None
        extracted = load_commonsense_pairs(commonsense, wanted)
        if dry_run:
            return _dry_run(['load_commonsense', 'build_graph', 'write_graph'], pairs=len(extracted))
        if save_pairs_to is not None:
            save_pairs(save_pairs_to, extracted)
    elif pairs is not None:
        extracted = load_pairs(pairs)
        if dry_run:
            return _dry_run(['load_pairs', 'build_graph', 'write_graph'], pairs=len(extracted))
    else:
        if manifest is None:
            raise InputError('one of --manifest, --pairs or --commonsense is required')
        if not manifest.is_file():
            raise InputError(f'manifest {manifest} does not exist')
        ds = DatasetManifest.load(manifest)
        loaded = load_corpus(ds.paths(), ds)
        if not loaded.docs:
            raise InputError('corpus is empty, nothing to extract')
        cfg.backend_spec(cfg.extract.backend, 'extract.backend')
        stages = ['load_corpus', 'extract', 'build_graph', 'write_graph']
        if any(d.lang != 'en' for d in loaded.docs):
            cfg.backend_spec(cfg.extract.translator, 'extract.translator')
            stages.insert(1, 'translate')
        if dry_run:
            return _dry_run(stages, docs=len(loaded.docs), datasets=loaded.counts)

        templates = cfg.templates()
        extractor = ExtractorClient(cfg.make_backend(cfg.extract.backend, 'extract.backend'), templates)
        translator = None
        if 'translate' in stages:
            translator = TranslationClient(cfg.make_backend(cfg.extract.translator, 'extract.translator'), templates)
        result = extract_pairs(
            loaded.docs, extractor, cfg.extract.batch, cfg.max_parallel(cfg.extract.backend),
            translator=translator, max_docs=cfg.extract.max_docs,
        )
        if result.report.ok == 0 and result.report.failed > 0:
            raise BackendError(f'extraction failed for all {result.report.failed} documents')
        extracted = result.pairs
        if save_pairs_to is not None:
            save_pairs(save_pairs_to, extracted)

    if not extracted:
        raise InputError('no concept pairs to build a graph from')

    options = BuildOptions(cooccur=cfg.kg.cooccur, similar=cfg.kg.similar, similarity_threshold=cfg.kg.similarity_threshold)
    if cfg.kg.similar:
        options.embedder = cfg.make_embedder()
    graph = ingest_to_graph(extracted, options)

    out.parent.mkdir(parents=True, exist_ok=True)
    dump_graph(graph, out)
    report = build_report(graph).to_dict()
    Path(f'{out}.report.json').write_text(json.dumps(report, indent=2, ensure_ascii=False) + '\n', encoding='utf-8')
    _emit({'graph': str(out), **report})


#####
# query
#####

@app.command('query')
@_handle_errors
def cmd_query(
    ctx: typer.Context,
    keywords: List[str] = typer.Argument(..., help='Query keywords'),
    graph: Optional[Path] = typer.Option(None, help='Graph file (default: paths.graph)'),
    h: Optional[int] = typer.Option(None, '--h', help='Hop radius (default: kg.h)'),
    z: Optional[int] = typer.Option(None, '--z', help='Number of concepts to return (default: kg.z)'),
    mode: Optional[str] = typer.Option(None, help=f'{RANKED} or {RANDOM} (default: kg.mode)'),
    seed: Optional[int] = typer.Option(None, help='Seed for random mode (default: kg.seed)'),
    fallback: Optional[bool] = typer.Option(None, '--fallback/--no-fallback', help='Token-overlap keyword matching'),
    dry_run: bool = typer.Option(False, '--dry-run', help='Validate inputs and print the planned stages'),
):
    '''Retrieve the concepts most connected to the keywords'''
    cfg: Config = ctx.obj.config
    path = _graph_path(cfg, graph)
    kind = mode or cfg.kg.mode
    qmode = QueryMode.random(cfg.kg.seed if seed is None else seed) if kind == RANDOM else QueryMode(kind)
    h = cfg.kg.h if h is None else h
    z = cfg.kg.z if z is None else z
    if not path.is_file():
        raise InputError(f'graph file {path} does not exist')
    if dry_run:
        return _dry_run(['load_graph', 'query'], graph=str(path), h=h, z=z, mode=qmode.to_dict())

    result = query_common_connection(
        load_graph(path), keywords, h, z, qmode, cfg.kg.token_fallback if fallback is None else fallback
    )
    _emit(result.to_dict())


#####
# boost
#####

def _boost_config(cfg: Config, augmentation: Optional[str] = None, h: Optional[int] = None,
                  z: Optional[int] = None, mode: Optional[QueryMode] = None) -> BoostConfig:
    return BoostConfig(
        h=cfg.kg.h if h is None else h,
        z=cfg.kg.z if z is None else z,
        temperature=cfg.boost.temperature,
        max_frames=cfg.boost.max_frames,
        mode=mode or cfg.kg.query_mode(),
        fallback=cfg.kg.token_fallback,
        augmentation=augmentation or cfg.boost.augmentation,
    )


def _sampler(cfg: Config, out_dir: Path) -> FrameSampler:
    return FrameSampler(cfg.boost.sampler_command, out_dir / 'frames', cfg.boost.max_frames)


def _prepare_items(sources: Sequence[ItemSource], sampler: FrameSampler) -> List[MediaItem]:
    loaded = [s.prepare(sampler) for s in sources]
    for item in loaded:
        item.check_frames()
    return loaded


@app.command('boost')
@_handle_errors
def cmd_boost(
    ctx: typer.Context,
    items: Path = typer.Option(..., help='Media items (JSON Lines)'),
    graph: Optional[Path] = typer.Option(None, help='Graph file (default: paths.graph)'),
    backend: Optional[str] = typer.Option(None, help='Backend name (default: boost.backend)'),
    baseline: bool = typer.Option(False, '--baseline', help='Plain generation without retrieval'),
    augmentation: Optional[str] = typer.Option(None, help='graph, self or text (default: boost.augmentation)'),
    manifest: Optional[Path] = typer.Option(None, help='Corpus manifest, needed for text augmentation'),
    out: Optional[Path] = typer.Option(None, help='Write results here instead of stdout'),
    out_dir: Optional[Path] = typer.Option(None, help='Working directory for sampled frames (default: paths.output_dir)'),
    dry_run: bool = typer.Option(False, '--dry-run', help='Validate inputs and print the planned stages'),
):
    '''Run the boost pipeline (or the baseline) over a batch of items'''
    cfg: Config = ctx.obj.config
    name = backend or cfg.boost.backend
    spec = cfg.backend_spec(name, 'boost.backend')
    bcfg = _boost_config(cfg, augmentation)
    sources = read_item_sources(items)
    sampler = _sampler(cfg, _output_dir(cfg, out_dir))

    graph_obj = text_index = None
    if baseline:
        stages = ['frames', 'generate']
    else:
        stages = ['frames', 'identify', 'query' if bcfg.augmentation == 'graph' else 'augment', 'generate']
        if bcfg.augmentation == 'graph':
            graph_path = _graph_path(cfg, graph)
            if not graph_path.is_file():
                raise InputError(f'graph file {graph_path} does not exist')
        if bcfg.augmentation == 'text' and manifest is None:
            raise InputError('text augmentation needs --manifest')
    if dry_run:
        # frames are only sampled for real runs
        for s in sources:
            s.check(sampler)
        return _dry_run(
            stages, items=len(sources), to_sample=sum(s.needs_sampling for s in sources),
            params=bcfg.params(), backend=name,
        )
    loaded = _prepare_items(sources, sampler)

    if not baseline:
        if bcfg.augmentation == 'graph':
            graph_obj = load_graph(_graph_path(cfg, graph))
        elif bcfg.augmentation == 'text':
            ds = DatasetManifest.load(manifest)
            text_index = CorpusTextIndex(load_corpus(ds.paths(), ds).docs)

    runner = BoostRunner(cfg.make_backend(name, 'boost.backend'), bcfg, graph_obj, cfg.templates(), text_index)
    run = runner.run_baseline if baseline else runner.run
    if not baseline:
        runner.check_augmentation()

    # one writer; results go out in input order, one chunk at a time
    ok = failed = 0
    sink = open(out, 'w', encoding='utf-8') if out is not None else None
    try:
        for chunk in _chunks(loaded, spec.max_parallel):
            for result in bounded_map(run, chunk, spec.max_parallel):
                line = dumps_jsonl_line(result.to_dict())
                if sink is not None:
                    sink.write(line + '\n')
                    sink.flush()
                else:
                    typer.echo(line)
                if isinstance(result, BoostFailure):
                    failed += 1
                else:
                    ok += 1
    finally:
        if sink is not None:
            sink.close()
    logger.info('boost_done', ok=ok, failed=failed)
    typer.echo(dumps_jsonl_line({'summary': {'ok': ok, 'failed': failed}}), err=True)


def _chunks(seq: Sequence[Any], n: int):
    it = iter(seq)
    while True:
        chunk = list(itertools.islice(it, max(1, n)))
        if not chunk:
            return
        yield chunk


@app.command('replay')
@_handle_errors
def cmd_replay(
    ctx: typer.Context,
    results: Path = typer.Option(..., help='Boost results (JSON Lines)'),
    graph: Optional[Path] = typer.Option(None, help='Graph file (default: paths.graph)'),
    dry_run: bool = typer.Option(False, '--dry-run', help='Validate inputs and print the planned stages'),
):
    '''Re-run the query stage on recorded keywords and compare with the recorded retrieval'''
    cfg: Config = ctx.obj.config
    recorded = [r for r in load_results(results) if isinstance(r, BoostOutput) and r.retrieval is not None]
    path = _graph_path(cfg, graph)
    if dry_run:
        return _dry_run(['load_graph', 'replay'], outputs=len(recorded))
    g = load_graph(path)
    mismatched = [r.item_id for r in recorded if not verify_replay(r, g)]
    _emit({'replayed': len(recorded), 'mismatched': mismatched})
    if mismatched:
        raise typer.Exit(4)


#####
# eval
#####

def _candidates(results: Path):
    outputs = [r for r in load_results(results) if isinstance(r, BoostOutput)]
    modes = sorted({o.mode for o in outputs})
    backends = sorted({o.backend for o in outputs})
    return {o.item_id: o.interpretation for o in outputs}, ','.join(modes), ','.join(backends)


def _write_json(path: Path, obj: Any) -> None:
    path.write_text(json.dumps(obj, indent=2, ensure_ascii=False) + '\n', encoding='utf-8')


@app.command('eval')
@_handle_errors
def cmd_eval(
    ctx: typer.Context,
    records: Optional[Path] = typer.Option(None, help='Benchmark records (JSON Lines)'),
    results: Optional[Path] = typer.Option(None, help='Boost results to score (JSON Lines)'),
    judge: Optional[str] = typer.Option(None, help='Judge backend name (default: judge.backend)'),
    human_scores: Optional[Path] = typer.Option(None, help='Human scores `{item_id, score}` for a consistency check'),
    deficiencies: Optional[Path] = typer.Option(None, help='Deficiency annotations `{item_id, category}`'),
    name: str = typer.Option('model', help='Row name in the score table'),
    out_dir: Optional[Path] = typer.Option(None, help='Report directory (default: paths.output_dir)'),
    dry_run: bool = typer.Option(False, '--dry-run', help='Validate inputs and print the planned stages'),
):
    '''Judge interpretations against golden references and write the score report'''
    cfg: Config = ctx.obj.config
    if results is None and deficiencies is None:
        raise InputError('nothing to evaluate (give --results and/or --deficiencies)')

    stages = []
    if results is not None:
        if records is None:
            raise InputError('--results needs --records')
        recs = load_records(records)
        candidates, mode, backend = _candidates(results)
        judge_name = judge or cfg.judge.backend
        cfg.backend_spec(judge_name, 'judge.backend')
        stages += ['judge', 'aggregate'] + (['consistency'] if human_scores else [])
    if deficiencies is not None:
        annotations = load_deficiencies(deficiencies)
        stages.append('deficiencies')
    if dry_run:
        return _dry_run(stages)

    out = _output_dir(cfg, out_dir)
    summary: Dict[str, Any] = {}
    if results is not None:
        run = judge_all(
            recs, candidates, cfg.make_backend(judge_name, 'judge.backend'), cfg.templates(),
            cfg.judge.temperature, cfg.max_parallel(judge_name),
        )
        report = aggregate(run.verdicts, recs, len(run.failures), mode, backend, judge_name)
        write_jsonl(out / f'{name}.verdicts.jsonl', [v.to_dict() for v in run.verdicts] + [f.to_dict() for f in run.failures])
        _write_json(out / f'{name}.report.json', report.to_dict())
        (out / f'{name}.table.txt').write_text(render_table([(name, report)]) + '\n', encoding='utf-8')
        summary['report'] = report.to_dict()
        summary['missing'] = run.missing
        if human_scores is not None:
            xs, ys = load_paired_scores(human_scores, run.verdicts)
            summary['consistency'] = judge_consistency(xs, ys).to_dict()
    if deficiencies is not None:
        proportions = tally_deficiencies(annotations)
        (out / f'{name}.deficiencies.txt').write_text(render_deficiency_table(proportions) + '\n', encoding='utf-8')
        summary['deficiencies'] = proportions
    _emit(summary)


#####
# filter
#####

@app.command('filter')
@_handle_errors
def cmd_filter(
    ctx: typer.Context,
    candidates: Path = typer.Option(..., help='Candidates (JSON Lines)'),
    stages: str = typer.Option(','.join(STAGE_NAMES), help='Comma-separated stages to run, in order'),
    votes: Optional[Path] = typer.Option(None, help='Annotator votes, needed for the human stage'),
    out_dir: Optional[Path] = typer.Option(None, help='Output directory (default: paths.output_dir)'),
    dry_run: bool = typer.Option(False, '--dry-run', help='Validate inputs and print the planned stages'),
):
    '''Run the candidate filtration funnel'''
    cfg: Config = ctx.obj.config
    names = [s.strip() for s in stages.split(',') if s.strip()]
    unknown = [s for s in names if s not in STAGE_NAMES]
    if unknown or not names:
        raise InputError(f'unknown stage(s) {unknown} (choose from {", ".join(STAGE_NAMES)})')
    cands = load_candidates(candidates)
    if LLM in names:
        cfg.backend_spec(cfg.filter.classifier, 'filter.classifier')
    if MLLM in names:
        cfg.backend_spec(cfg.filter.verifier, 'filter.verifier')
    vote_map = None
    if HUMAN in names:
        if votes is None:
            raise InputError('the human stage needs --votes')
        vote_map = load_votes(votes)
    if dry_run:
        return _dry_run(names, candidates=len(cands))

    templates = cfg.templates()
    fc = cfg.filter
    plan = []
    for s in names:
        if s == COMMENTS:
            plan.append((s, lambda cs: stage_comment_filter(cs, fc.comment_threshold)))
        elif s == LLM:
            clf = cfg.make_backend(fc.classifier, 'filter.classifier')
            plan.append((s, lambda cs, b=clf: stage_llm_filter(cs, b, templates, fc.max_comments, cfg.max_parallel(fc.classifier))))
        elif s == MLLM:
            ver = cfg.make_backend(fc.verifier, 'filter.verifier')
            plan.append((s, lambda cs, b=ver: stage_mllm_verify(cs, b, templates, cfg.boost.max_frames, cfg.max_parallel(fc.verifier))))
        else:
            plan.append((s, lambda cs: stage_human_veto(cs, vote_map)))

    result = run_funnel(cands, plan)
    out = _output_dir(cfg, out_dir)
    save_candidates(out / 'survivors.jsonl', result.survivors)
    save_candidates(out / 'rejected.jsonl', [c for bucket in result.rejected.values() for c in bucket])
    save_candidates(out / 'needs_review.jsonl', result.needs_review)
    _write_json(out / 'stage_report.json', [r.to_dict() for r in result.reports])

    typed = [c.metaphor_type for c in result.survivors if c.metaphor_type]
    balance = check_type_balance({t: typed.count(t) for t in set(typed)}) if typed else []
    for r in result.reports:
        _emit(r.to_dict())
    _emit({'survivors': len(result.survivors), 'needs_review': len(result.needs_review), 'balance_warnings': balance})


#####
# sweep
#####

@app.command('sweep')
@_handle_errors
def cmd_sweep(
    ctx: typer.Context,
    items: Path = typer.Option(..., help='Media items (JSON Lines)'),
    records: Path = typer.Option(..., help='Benchmark records (JSON Lines)'),
    graph: Optional[Path] = typer.Option(None, help='Graph file (default: paths.graph)'),
    backend: Optional[str] = typer.Option(None, help='Backend name (default: boost.backend)'),
    judge: Optional[str] = typer.Option(None, help='Judge backend name (default: judge.backend)'),
    out_dir: Optional[Path] = typer.Option(None, help='Report directory (default: paths.output_dir)'),
    dry_run: bool = typer.Option(False, '--dry-run', help='Validate inputs and print the planned stages'),
):
    '''Run the hop/size/mode ablation grid, one score report per cell'''
    cfg: Config = ctx.obj.config
    sw = cfg.sweep
    name = backend or cfg.boost.backend
    judge_name = judge or cfg.judge.backend
    spec = cfg.backend_spec(name, 'boost.backend')
    cfg.backend_spec(judge_name, 'judge.backend')
    graph_path = _graph_path(cfg, graph)
    out = _output_dir(cfg, out_dir)
    sources = read_item_sources(items)
    sampler = _sampler(cfg, out)
    recs = load_records(records)
    cells = list(itertools.product(sw.hs, sw.zs, sw.modes))
    if dry_run:
        for s in sources:
            s.check(sampler)
        return _dry_run(
            ['boost', 'judge', 'aggregate'],
            cells=[{'h': h, 'z': z, 'mode': m} for h, z, m in cells], items=len(sources),
        )
    loaded = _prepare_items(sources, sampler)

    g = load_graph(graph_path)
    templates = cfg.templates()
    model = cfg.make_backend(name, 'boost.backend')
    judge_backend = cfg.make_backend(judge_name, 'judge.backend')
    rows = []
    for h, z, m in cells:
        qmode = QueryMode.random(sw.seed) if m == RANDOM else QueryMode.ranked()
        bcfg = _boost_config(cfg, 'graph', h, z, qmode)
        runner = BoostRunner(model, bcfg, g, templates)
        results = run_batch(loaded, runner.run, spec.max_parallel)
        cell = f'h{h}_z{z}_{m}'
        write_jsonl(out / f'sweep_{cell}.results.jsonl', [r.to_dict() for r in results])

        candidates = {r.item_id: r.interpretation for r in results if isinstance(r, BoostOutput)}
        run = judge_all(recs, candidates, judge_backend, templates, cfg.judge.temperature, cfg.max_parallel(judge_name))
        report = aggregate(run.verdicts, recs, len(run.failures), 'boost', model.name, judge_name)
        _write_json(out / f'sweep_{cell}.report.json', report.to_dict())
        rows.append((cell, report))
        _emit({'cell': {'h': h, 'z': z, 'mode': m}, 'report': report.to_dict()})

    (out / 'sweep.table.txt').write_text(render_table(rows) + '\n', encoding='utf-8')


def main():
    app()


if __name__ == '__main__':
    main()
