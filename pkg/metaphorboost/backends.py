import os
import re
import json
import hashlib
import threading
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import structlog

from .errors import BackendError, InputError
from .imageinfo import ImagePart
from .misc import call_with_retries


logger = structlog.get_logger(__name__)


class BackendTransportError(BackendError):
    '''
    Retryable failure (connection, timeout, rate limit, server error)
    '''


class ReplyParseError(BackendError):
    '''
    Backend replied, but the reply could not be interpreted
    '''

    def __init__(self, message: str, raw_reply: str = ''):
        super().__init__(message)
        self.raw_reply = raw_reply


class ScriptMissError(BackendError):
    pass


@dataclass(frozen=True)
class ChatRequest:
    '''
    Provider-agnostic chat request

    Attributes:
        stage (str): pipeline stage issuing the request (`identify`, `generate`, `judge`, ...)
        images (tuple of :class:`ImagePart`): frames, passed inline
    '''

    stage: str
    system: str
    user: str
    images: Tuple[ImagePart, ...] = ()
    temperature: float = 0.7


@dataclass(frozen=True)
class ChatReply:
    text: str
    thinking: str = ''


_THINK_RE = re.compile(r'<think>(.*?)</think>', re.DOTALL)


def split_thinking(text: str) -> Tuple[str, str]:
    '''
    Splits `<think>...</think>` sections off a reply; returns `(thinking, rest)`
    '''
    thinking = '\n'.join(m.strip() for m in _THINK_RE.findall(text))
    return thinking, _THINK_RE.sub('', text).strip()


def request_digest(request: ChatRequest) -> str:
    '''
    Content address of a request (temperature excluded), used as key in scripted fixtures
    '''
    payload = {
        'stage': request.stage,
        'system': request.system,
        'user': request.user,
        'images': [img.digest for img in request.images],
    }
    return hashlib.sha256(json.dumps(payload, sort_keys=True, ensure_ascii=False).encode('utf-8')).hexdigest()


class ModelBackend(ABC):
    '''
    Abstract chat endpoint taking a system prompt, user text and images
    '''

    @property
    @abstractmethod
    def name(self) -> str:
        pass

    @abstractmethod
    def complete(self, request: ChatRequest) -> ChatReply:
        pass


def complete_with_retries(backend: ModelBackend, request: ChatRequest, attempts: int = 3, base_delay: float = 0.5) -> ChatReply:
    return call_with_retries(lambda: backend.complete(request), (BackendTransportError,), attempts, base_delay)


#####
# openai-compatible providers
#####

class OpenAIBackend(ModelBackend):
    '''
    OpenAI-compatible chat completion provider (official API, vLLM, DeepSeek, ...)
    '''

    def __init__(self, model: str, api_key: Optional[str] = None, base_url: Optional[str] = None,
                 timeout_s: float = 120.0, max_tokens: Optional[int] = None, client: Any = None):
        self.model = model
        self.max_tokens = max_tokens
        if client is None:
            from openai import OpenAI
            kwargs: Dict[str, Any] = {'api_key': api_key, 'timeout': timeout_s}
            if base_url:
                kwargs['base_url'] = base_url
            client = OpenAI(**kwargs)
        self._client = client

    @property
    def name(self) -> str:
        return self.model

    @staticmethod
    def build_messages(request: ChatRequest) -> List[Dict[str, Any]]:
        content: List[Dict[str, Any]] = [{'type': 'text', 'text': request.user}]
        content.extend({'type': 'image_url', 'image_url': {'url': img.data_url}} for img in request.images)
        messages: List[Dict[str, Any]] = []
        if request.system:
            messages.append({'role': 'system', 'content': request.system})
        messages.append({'role': 'user', 'content': content if request.images else request.user})
        return messages

    def complete(self, request: ChatRequest) -> ChatReply:
        import openai

        kwargs: Dict[str, Any] = {
            'model': self.model,
            'messages': self.build_messages(request),
            'temperature': request.temperature,
        }
        if self.max_tokens is not None:
            kwargs['max_tokens'] = self.max_tokens

        logger.debug('chat_request', backend=self.name, stage=request.stage, images=len(request.images))
        try:
            completion = self._client.chat.completions.create(**kwargs)
        except (openai.APIConnectionError, openai.APITimeoutError, openai.RateLimitError, openai.InternalServerError) as e:
            raise BackendTransportError(f'{self.name}: {e}') from e
        except openai.OpenAIError as e:
            raise BackendError(f'{self.name}: {e}') from e

        if not completion.choices:
            raise ReplyParseError(f'{self.name}: reply without choices')
        message = completion.choices[0].message
        thinking_field = getattr(message, 'reasoning_content', None) or ''
        thinking, text = split_thinking(message.content or '')
        return ChatReply(text, '\n'.join(t for t in (thinking_field.strip(), thinking) if t))


#####
# scripted mock
#####

Reply = Union[str, Mapping[str, Any], Sequence[Any]]


def _to_reply(obj: Any) -> ChatReply:
    if isinstance(obj, ChatReply):
        return obj
    if isinstance(obj, str):
        thinking, text = split_thinking(obj)
        return ChatReply(text, thinking)
    if isinstance(obj, Mapping):
        if obj.get('transport_error'):
            raise BackendTransportError(str(obj['transport_error']))
        return ChatReply(str(obj.get('text', '')), str(obj.get('thinking', '')))
    raise InputError(f'invalid scripted reply {obj!r}')


@dataclass
class ScriptRule:
    reply: Any
    stage: Optional[str] = None
    contains: Optional[str] = None

    def matches(self, request: ChatRequest) -> bool:
        if self.stage is not None and self.stage != request.stage:
            return False
        if self.contains is not None and self.contains not in request.user:
            return False
        return True


class ScriptedBackend(ModelBackend):
    '''
    Deterministic backend replaying scripted replies.

    Lookup order: exact request digest, first matching rule (stage and/or substring of the
    user text), per-stage reply, default reply. A list reply is consumed one element per call
    (the last element repeats), which allows scripting repair retries. Replies are strings
    (`<think>` sections split off), `{text, thinking}` mappings or `{transport_error: msg}`.
    '''

    def __init__(
        self,
        replies: Optional[Mapping[str, Reply]] = None,
        rules: Optional[Sequence[ScriptRule]] = None,
        stages: Optional[Mapping[str, Reply]] = None,
        default: Optional[Reply] = None,
        name: str = 'scripted',
    ):
        self.replies = dict(replies or {})
        self.rules = list(rules or [])
        self.stages = dict(stages or {})
        self.default = default
        self._name = name
        self.requests: List[ChatRequest] = []
        self._cursor: Dict[Tuple[str, str], int] = {}
        self._lock = threading.Lock()

    @property
    def name(self) -> str:
        return self._name

    @classmethod
    def from_file(cls, path: Union[str, Path], name: Optional[str] = None) -> 'ScriptedBackend':
        try:
            obj = json.loads(Path(path).read_text(encoding='utf-8'))
        except (OSError, json.JSONDecodeError) as e:
            raise InputError(f'cannot load backend script {path}: {e}') from e
        rules = [
            ScriptRule(r['reply'], r.get('stage'), r.get('contains'))
            for r in obj.get('rules', [])
        ]
        return cls(obj.get('replies'), rules, obj.get('stages'), obj.get('default'), name or Path(path).stem)

    def _pick(self, key: Tuple[str, str], reply: Reply) -> Any:
        if isinstance(reply, (list, tuple)):
            if not reply:
                raise InputError(f'empty scripted reply list for {key}')
            i = self._cursor.get(key, 0)
            self._cursor[key] = i + 1
            return reply[min(i, len(reply) - 1)]
        return reply

    def complete(self, request: ChatRequest) -> ChatReply:
        with self._lock:
            self.requests.append(request)
            digest = request_digest(request)
            if digest in self.replies:
                return _to_reply(self._pick(('digest', digest), self.replies[digest]))
            for i, rule in enumerate(self.rules):
                if rule.matches(request):
                    return _to_reply(self._pick(('rule', str(i)), rule.reply))
            if request.stage in self.stages:
                return _to_reply(self._pick(('stage', request.stage), self.stages[request.stage]))
            if self.default is not None:
                return _to_reply(self._pick(('default', ''), self.default))
        raise ScriptMissError(f'{self.name}: no scripted reply for stage {request.stage!r} (digest {digest})')

    def calls(self, stage: Optional[str] = None) -> List[ChatRequest]:
        return [r for r in self.requests if stage is None or r.stage == stage]


#####
# embeddings
#####

class EmbeddingClient(ABC):
    @abstractmethod
    def embed(self, texts: Sequence[str]) -> np.ndarray:
        pass


class OpenAIEmbeddingClient(EmbeddingClient):
    def __init__(self, model: str, api_key: Optional[str] = None, base_url: Optional[str] = None,
                 batch: int = 256, client: Any = None):
        self.model = model
        self.batch = batch
        if client is None:
            from openai import OpenAI
            client = OpenAI(api_key=api_key, base_url=base_url) if base_url else OpenAI(api_key=api_key)
        self._client = client

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        import openai

        rows: List[List[float]] = []
        for start in range(0, len(texts), self.batch):
            chunk = list(texts[start:start + self.batch])
            try:
                resp = call_with_retries(
                    lambda: self._wrap(lambda: self._client.embeddings.create(model=self.model, input=chunk)),
                    (BackendTransportError,),
                )
            except openai.OpenAIError as e:
                raise BackendError(f'embedding request failed: {e}') from e
            rows.extend(d.embedding for d in sorted(resp.data, key=lambda d: d.index))
        return np.asarray(rows, dtype=np.float64)

    @staticmethod
    def _wrap(fn):
        import openai
        try:
            return fn()
        except (openai.APIConnectionError, openai.APITimeoutError, openai.RateLimitError, openai.InternalServerError) as e:
            raise BackendTransportError(str(e)) from e


class ScriptedEmbeddingClient(EmbeddingClient):
    '''
    Returns fixed vectors per text; unknown texts get a zero vector
    '''

    def __init__(self, vectors: Mapping[str, Sequence[float]]):
        self.vectors = {k: np.asarray(v, dtype=np.float64) for k, v in vectors.items()}
        self.dim = len(next(iter(self.vectors.values()))) if self.vectors else 1

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        return np.stack([self.vectors.get(t, np.zeros(self.dim)) for t in texts]) if texts else np.zeros((0, self.dim))


#####
# factory
#####

@dataclass
class BackendSpec:
    provider: str = 'openai'
    model: str = ''
    endpoint: Optional[str] = None
    api_key_env: str = 'OPENAI_API_KEY'
    max_parallel: int = 4
    timeout_s: float = 120.0
    script: Optional[str] = None
    extra: Dict[str, Any] = field(default_factory=dict)


def make_backend(name: str, spec: BackendSpec) -> ModelBackend:
    '''
    Instantiates a configured backend; API keys are read from the environment only
    '''
    if spec.provider == 'scripted':
        if not spec.script:
            raise InputError(f'backend {name!r}: scripted provider needs a `script` file')
        return ScriptedBackend.from_file(spec.script, name=name)
    if spec.provider == 'openai':
        if not spec.model:
            raise InputError(f'backend {name!r}: missing model id')
        api_key = os.environ.get(spec.api_key_env)
        if not api_key:
            raise BackendError(f'backend {name!r}: environment variable {spec.api_key_env} is not set')
        return OpenAIBackend(spec.model, api_key=api_key, base_url=spec.endpoint, timeout_s=spec.timeout_s)
    raise InputError(f'backend {name!r}: unknown provider {spec.provider!r}')


def make_embedder(name: str, spec: BackendSpec) -> EmbeddingClient:
    if spec.provider == 'scripted':
        if not spec.script:
            raise InputError(f'embedder {name!r}: scripted provider needs a `script` file')
        try:
            vectors = json.loads(Path(spec.script).read_text(encoding='utf-8'))
        except (OSError, json.JSONDecodeError) as e:
            raise InputError(f'cannot load embedding script {spec.script}: {e}') from e
        return ScriptedEmbeddingClient(vectors)
    if spec.provider == 'openai':
        api_key = os.environ.get(spec.api_key_env)
        if not api_key:
            raise BackendError(f'embedder {name!r}: environment variable {spec.api_key_env} is not set')
        return OpenAIEmbeddingClient(spec.model, api_key=api_key, base_url=spec.endpoint)
    raise InputError(f'embedder {name!r}: unknown provider {spec.provider!r}')
