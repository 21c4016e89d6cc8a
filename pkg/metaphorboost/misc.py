import json
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, Iterator, List, Sequence, Tuple, Type, TypeVar, Union

import structlog

from .errors import InputError


logger = structlog.get_logger(__name__)

_T = TypeVar('_T')
_R = TypeVar('_R')

PathLike = Union[str, Path]


class JsonLinesError(InputError):
    pass


#####
# parallel/retry stuff
#####

def bounded_map(fn: Callable[[_T], _R], items: Sequence[_T], max_parallel: int = 1) -> List[_R]:
    '''
    Applies `fn` to every item with at most `max_parallel` calls in flight;
    results are returned in input order regardless of completion order
    '''
    if max_parallel < 1:
        raise InputError(f'max_parallel must be >= 1, got {max_parallel}')
    if max_parallel == 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=min(max_parallel, len(items))) as pool:
        return list(pool.map(fn, items))


def call_with_retries(
    fn: Callable[[], _R],
    retry_on: Tuple[Type[BaseException], ...],
    attempts: int = 3,
    base_delay: float = 0.5,
    sleep: Callable[[float], None] = time.sleep,
) -> _R:
    '''
    Calls `fn`, retrying on the given exception types with exponential backoff
    (`base_delay`, `2 * base_delay`, ...); the last exception is re-raised
    '''
    if attempts < 1:
        raise InputError(f'attempts must be >= 1, got {attempts}')
    for attempt in range(1, attempts + 1):
        try:
            return fn()
        except retry_on as e:
            if attempt == attempts:
                raise
            delay = base_delay * (2 ** (attempt - 1))
            logger.warning('retrying_call', attempt=attempt, attempts=attempts, delay=delay, error=str(e))
            sleep(delay)
    raise AssertionError('unreachable')


#####
# json lines stuff
#####

def iter_jsonl(path: PathLike) -> Iterator[Tuple[int, Union[Dict[str, Any], JsonLinesError]]]:
    '''
    Yields `(line_number, object)` for every non-blank line of a JSON Lines file;
    lines that don't decode to a JSON object yield a :class:`JsonLinesError` instead of raising
    '''
    with open(path, 'r', encoding='utf-8') as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                yield lineno, JsonLinesError(f'{path}:{lineno}: {e.msg}')
                continue
            if not isinstance(obj, dict):
                yield lineno, JsonLinesError(f'{path}:{lineno}: expected an object, got {type(obj).__name__}')
                continue
            yield lineno, obj


def read_jsonl(path: PathLike) -> List[Dict[str, Any]]:
    '''
    Strict variant of :func:`iter_jsonl`, raises on the first malformed line
    '''
    out = []
    for _, obj in iter_jsonl(path):
        if isinstance(obj, JsonLinesError):
            raise obj
        out.append(obj)
    return out


def dumps_jsonl_line(obj: Any) -> str:
    return json.dumps(obj, ensure_ascii=False, sort_keys=True)


def write_jsonl(path: PathLike, objs: Iterable[Any]) -> None:
    with open(path, 'w', encoding='utf-8') as f:
        for obj in objs:
            f.write(dumps_jsonl_line(obj) + '\n')
