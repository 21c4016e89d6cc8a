from .errors import \
    MetaphorBoostError, InputError, BackendError, InvariantError
from .graph import \
    GraphBuildError, GraphInvariantError, \
    Role, EdgeKind, ConceptNode, Edge, GraphMeta, MetaphorGraph, \
    BuildOptions, build_graph, normalize_label, match_keywords, hop_ball
from .graphfile import \
    GraphFileError, GraphChecksumError, \
    dump_graph, dumps_graph, load_graph, loads_graph, graph_digest
from .query import \
    QueryError, QueryMode, RetrievalEntry, RetrievalResult, \
    query_common_connection
from .backends import \
    BackendTransportError, ReplyParseError, \
    ChatRequest, ChatReply, ModelBackend, OpenAIBackend, ScriptedBackend, ScriptRule, \
    EmbeddingClient, OpenAIEmbeddingClient, ScriptedEmbeddingClient, \
    BackendSpec, make_backend, make_embedder
from .imageinfo import \
    ImageFormatError, ImageFormat, ImageInfo, ImagePart, \
    sniff_image, encode_frame
from .templates import \
    TemplateError, PromptTemplates
from .taxonomy import \
    MetaphorType, DeficiencyCategory
from .corpus import \
    CorpusError, ExtractionInvariantError, DatasetManifest, CorpusDoc, ExtractedPair, ExtractionReport, \
    ExtractorClient, TranslationClient, CorpusTextIndex, BuildReport, \
    load_corpus, extract_pairs, ingest_to_graph, build_report, save_pairs, load_pairs, load_commonsense_pairs
from .frames import \
    FrameSamplerError, FrameSampler, \
    select_evenly, prepare_frames
from .boost import \
    MediaItemError, MediaItem, BoostConfig, BoostOutput, BoostFailure, BoostRunner, \
    parse_keyword_list, identify_elements, run_boost, run_baseline, run_batch, \
    replay_retrieval, verify_replay, ItemSource, read_item_sources, load_items
from .evaluation import \
    EvaluationError, UndefinedCorrelationError, \
    BenchmarkRecord, JudgeVerdict, JudgeFailure, ScoreReport, ConsistencyReport, \
    judge, judge_all, aggregate, pearson, judge_consistency, tally_deficiencies, \
    render_table, load_records
from .filtration import \
    FiltrationError, FiltrationInvariantError, \
    Candidate, StageResult, StageReport, FunnelResult, \
    stage_comment_filter, stage_llm_filter, stage_mllm_verify, stage_human_veto, \
    run_funnel, check_type_balance
from .config import \
    ConfigError, Config
