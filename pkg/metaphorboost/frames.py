import shlex
import subprocess
from pathlib import Path
from typing import List, Optional, Sequence, TypeVar, Union

import structlog

from .errors import InputError


logger = structlog.get_logger(__name__)

_T = TypeVar('_T')

FRAME_SUFFIXES = frozenset({'.png', '.jpg', '.jpeg', '.gif', '.webp'})


class FrameSamplerError(InputError):
    pass


def select_evenly(frames: Sequence[_T], max_frames: int) -> List[_T]:
    '''
    Picks at most `max_frames` evenly spaced elements (index `floor(i * n / k)`)

    Examples:
        >>> select_evenly(list(range(16)), 8)
        [0, 2, 4, 6, 8, 10, 12, 14]
    '''
    if max_frames < 1:
        raise InputError(f'max_frames must be >= 1, got {max_frames}')
    n = len(frames)
    k = min(n, max_frames)
    return [frames[i * n // k] for i in range(k)]


def list_frames(directory: Union[str, Path]) -> List[Path]:
    return sorted(p for p in Path(directory).iterdir() if p.is_file() and p.suffix.lower() in FRAME_SUFFIXES)


class FrameSampler:
    '''
    Shim around an external frame extraction tool.

    `command` is a shell-style template with `{video}` and `{out}` placeholders, e.g.
    `ffmpeg -loglevel error -i {video} -vf fps=1 {out}/%05d.png`. A video reference that is
    already a directory of frames is used as-is.
    '''

    def __init__(self, command: Optional[str], workdir: Union[str, Path], max_frames: int = 16, timeout_s: float = 600.0):
        self.command = command
        self.workdir = Path(workdir)
        self.max_frames = max_frames
        self.timeout_s = timeout_s

    def extract(self, video_ref: str) -> Path:
        src = Path(video_ref)
        if src.is_dir():
            return src
        if not self.command:
            raise FrameSamplerError(f'{video_ref} is not a frame directory and no sampler command is configured')

        out = self.workdir / src.stem
        out.mkdir(parents=True, exist_ok=True)
        argv = [arg.format(video=str(src), out=str(out)) for arg in shlex.split(self.command)]
        logger.info('sampling_frames', video=str(src), out=str(out))
        try:
            proc = subprocess.run(argv, capture_output=True, text=True, timeout=self.timeout_s, check=False)
        except FileNotFoundError as e:
            raise FrameSamplerError(f'frame sampler {argv[0]!r} not found') from e
        except subprocess.TimeoutExpired as e:
            raise FrameSamplerError(f'frame sampler timed out after {self.timeout_s}s on {video_ref}') from e
        if proc.returncode != 0:
            raise FrameSamplerError(
                f'frame sampler exited with status {proc.returncode} on {video_ref}: {(proc.stderr or proc.stdout).strip()}'
            )
        return out

    def check(self, video_ref: str) -> None:
        '''
        Raises if `video_ref` could not be sampled; runs nothing
        '''
        src = Path(video_ref)
        if src.is_dir():
            return
        if not self.command:
            raise FrameSamplerError(f'{video_ref} is not a frame directory and no sampler command is configured')
        if not src.is_file():
            raise FrameSamplerError(f'video {video_ref} does not exist')

    def sample(self, video_ref: str) -> List[Path]:
        frames = list_frames(self.extract(video_ref))
        if not frames:
            raise FrameSamplerError(f'no frames found for {video_ref}')
        return select_evenly(frames, self.max_frames)


def prepare_frames(video_ref: str, sampler: FrameSampler) -> List[Path]:
    return sampler.sample(video_ref)
