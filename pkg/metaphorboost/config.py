import copy
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Union

import yaml
import structlog

from .backends import BackendSpec, EmbeddingClient, ModelBackend, make_backend, make_embedder
from .errors import InputError
from .query import RANDOM, RANKED, QueryMode
from .templates import PromptTemplates


logger = structlog.get_logger(__name__)

PathLike = Union[str, Path]


class ConfigError(InputError):
    pass


@dataclass
class KgConfig:
    h: int = 2
    z: int = 10
    mode: str = RANKED
    seed: int = 0
    cooccur: bool = True
    similar: bool = False
    similarity_threshold: float = 0.85
    token_fallback: bool = False
    embedder: Optional[str] = None

    def query_mode(self) -> QueryMode:
        return QueryMode.random(self.seed) if self.mode == RANDOM else QueryMode.ranked()


@dataclass
class BoostSection:
    max_frames: int = 16
    temperature: float = 0.7
    backend: Optional[str] = None
    augmentation: str = 'graph'
    sampler_command: Optional[str] = None


@dataclass
class JudgeSection:
    temperature: float = 0.0
    backend: Optional[str] = None


@dataclass
class ExtractSection:
    batch: int = 8
    backend: Optional[str] = None
    translator: Optional[str] = None
    max_docs: Optional[int] = None


@dataclass
class FilterSection:
    comment_threshold: int = 150
    max_comments: int = 50
    classifier: Optional[str] = None
    verifier: Optional[str] = None


@dataclass
class PathsSection:
    graph: Optional[str] = None
    templates: Optional[str] = None
    output_dir: str = 'out'


@dataclass
class SweepSection:
    hs: List[int] = field(default_factory=lambda: [1, 2])
    zs: List[int] = field(default_factory=lambda: [5, 10])
    modes: List[str] = field(default_factory=lambda: [RANKED, RANDOM])
    seed: int = 0


_SECTIONS = {
    'kg': KgConfig,
    'boost': BoostSection,
    'judge': JudgeSection,
    'extract': ExtractSection,
    'filter': FilterSection,
    'paths': PathsSection,
    'sweep': SweepSection,
}


def _section_from_dict(name: str, cls: type, raw: Any) -> Any:
    if raw is None:
        return cls()
    if not isinstance(raw, Mapping):
        raise ConfigError(f'config section {name!r} must be a mapping')
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f'unknown key(s) in section {name!r}: {", ".join(unknown)}')
    return cls(**raw)


def _resolve(base: Optional[Path], p: Optional[str]) -> Optional[str]:
    if p is None or base is None or Path(p).is_absolute():
        return p
    return str(base / p)


@dataclass
class Config:
    '''
    Full configuration tree; every section falls back to its defaults when absent
    '''

    backends: Dict[str, BackendSpec] = field(default_factory=dict)
    kg: KgConfig = field(default_factory=KgConfig)
    boost: BoostSection = field(default_factory=BoostSection)
    judge: JudgeSection = field(default_factory=JudgeSection)
    extract: ExtractSection = field(default_factory=ExtractSection)
    filter: FilterSection = field(default_factory=FilterSection)
    paths: PathsSection = field(default_factory=PathsSection)
    sweep: SweepSection = field(default_factory=SweepSection)

    @classmethod
    def from_dict(cls, raw: Optional[Mapping[str, Any]], base: Optional[Path] = None) -> 'Config':
        '''
        Builds and validates a config; relative file paths are resolved against `base`
        '''
        raw = dict(raw or {})
        unknown = sorted(set(raw) - set(_SECTIONS) - {'backends'})
        if unknown:
            raise ConfigError(f'unknown config section(s): {", ".join(unknown)}')

        backends = {}
        raw_backends = raw.get('backends') or {}
        if not isinstance(raw_backends, Mapping):
            raise ConfigError('`backends` must be a mapping of name -> backend settings')
        for name, spec in raw_backends.items():
            spec = _section_from_dict(f'backends.{name}', BackendSpec, spec)
            spec.script = _resolve(base, spec.script)
            backends[str(name)] = spec

        sections = {name: _section_from_dict(name, cls_, raw.get(name)) for name, cls_ in _SECTIONS.items()}
        paths = sections['paths']
        paths.graph = _resolve(base, paths.graph)
        paths.templates = _resolve(base, paths.templates)
        paths.output_dir = _resolve(base, paths.output_dir)

        config = cls(backends=backends, **sections)
        config.validate()
        return config

    @classmethod
    def load(cls, path: Optional[PathLike] = None, overrides: Sequence[str] = ()) -> 'Config':
        '''
        Loads a YAML config file (or the defaults if `path` is None) and applies
        `section.key=value` overrides, whose values are parsed as YAML scalars
        '''
        raw: Dict[str, Any] = {}
        base = None
        if path is not None:
            path = Path(path)
            try:
                raw = yaml.safe_load(path.read_text(encoding='utf-8')) or {}
            except OSError as e:
                raise ConfigError(f'cannot read config {path}: {e}') from e
            except yaml.YAMLError as e:
                raise ConfigError(f'invalid config {path}: {e}') from e
            if not isinstance(raw, dict):
                raise ConfigError(f'config {path} must contain a mapping')
            base = path.resolve().parent
        return cls.from_dict(apply_overrides(raw, overrides), base=base)

    def validate(self) -> None:
        kg = self.kg
        if not isinstance(kg.h, int) or kg.h < 1:
            raise ConfigError(f'kg.h must be an integer >= 1, got {kg.h!r}')
        if not isinstance(kg.z, int) or kg.z < 0:
            raise ConfigError(f'kg.z must be an integer >= 0, got {kg.z!r}')
        if kg.mode not in (RANKED, RANDOM):
            raise ConfigError(f'kg.mode must be {RANKED!r} or {RANDOM!r}, got {kg.mode!r}')
        if not 0 < kg.similarity_threshold <= 1:
            raise ConfigError(f'kg.similarity_threshold must be in (0, 1], got {kg.similarity_threshold!r}')
        for name, temp in (('boost.temperature', self.boost.temperature), ('judge.temperature', self.judge.temperature)):
            if not isinstance(temp, (int, float)) or not 0 <= temp <= 2:
                raise ConfigError(f'{name} must be in [0, 2], got {temp!r}')
        if self.boost.max_frames < 1:
            raise ConfigError(f'boost.max_frames must be >= 1, got {self.boost.max_frames}')
        if self.boost.augmentation not in ('graph', 'self', 'text'):
            raise ConfigError(f'boost.augmentation must be graph, self or text, got {self.boost.augmentation!r}')
        if self.extract.batch < 1:
            raise ConfigError(f'extract.batch must be >= 1, got {self.extract.batch}')
        if self.filter.comment_threshold < 0:
            raise ConfigError(f'filter.comment_threshold must be >= 0, got {self.filter.comment_threshold}')
        for name, spec in self.backends.items():
            if spec.max_parallel < 1:
                raise ConfigError(f'backends.{name}.max_parallel must be >= 1, got {spec.max_parallel}')
        if any(not isinstance(h, int) or h < 1 for h in self.sweep.hs):
            raise ConfigError(f'sweep.hs must be integers >= 1, got {self.sweep.hs!r}')
        if any(not isinstance(z, int) or z < 0 for z in self.sweep.zs):
            raise ConfigError(f'sweep.zs must be integers >= 0, got {self.sweep.zs!r}')
        if any(m not in (RANKED, RANDOM) for m in self.sweep.modes):
            raise ConfigError(f'sweep.modes must be {RANKED!r} and/or {RANDOM!r}, got {self.sweep.modes!r}')

    #####
    # accessors
    #####

    def backend_spec(self, name: Optional[str], role: str) -> BackendSpec:
        if not name:
            raise ConfigError(f'no backend configured for {role}')
        try:
            return self.backends[name]
        except KeyError:
            raise ConfigError(f'{role}: backend {name!r} is not defined under `backends`') from None

    def make_backend(self, name: Optional[str], role: str) -> ModelBackend:
        return make_backend(name, self.backend_spec(name, role))

    def make_embedder(self) -> EmbeddingClient:
        return make_embedder(self.kg.embedder, self.backend_spec(self.kg.embedder, 'kg.embedder'))

    def max_parallel(self, name: Optional[str]) -> int:
        return self.backends[name].max_parallel if name in self.backends else 1

    def templates(self) -> PromptTemplates:
        return PromptTemplates(self.paths.templates)

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)


def apply_overrides(raw: Mapping[str, Any], overrides: Sequence[str]) -> Dict[str, Any]:
    '''
    Applies `a.b.c=value` overrides to a copy of the raw config tree

    Examples:
        >>> apply_overrides({'kg': {'h': 2}}, ['kg.h=1', 'boost.temperature=0.2'])
        {'kg': {'h': 1}, 'boost': {'temperature': 0.2}}
    '''
    out = copy.deepcopy(dict(raw))
    for item in overrides:
        key, sep, value = item.partition('=')
        parts = key.strip().split('.')
        if not sep or not all(parts):
            raise ConfigError(f'invalid override {item!r} (expected section.key=value)')
        try:
            parsed = yaml.safe_load(value)
        except yaml.YAMLError as e:
            raise ConfigError(f'invalid override value in {item!r}: {e}') from e

        node = out
        for part in parts[:-1]:
            child = node.get(part)
            if child is None:
                child = node[part] = {}
            elif not isinstance(child, dict):
                raise ConfigError(f'override {item!r}: {part!r} is not a section')
            node = child
        node[parts[-1]] = parsed
        logger.debug('config_override', key=key, value=parsed)
    return out
