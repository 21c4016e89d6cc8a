import io
import base64
import hashlib
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Callable, IO, List, Optional, Tuple, Type, Union

from construct import \
    Struct, Subconstruct, Construct, Const, Bytes, Int8ub, Int16ub, Int16ul, Int32ub, Int32ul, \
    ConstructError, MappingError

from .errors import InputError


class ImageFormatError(InputError):
    pass


class ImageFormat(Enum):
    PNG = 'png'
    GIF = 'gif'
    JPEG = 'jpeg'
    WEBP = 'webp'

    @property
    def mime(self) -> str:
        return f'image/{self.value}'


@dataclass(frozen=True)
class ImageInfo:
    format: ImageFormat
    width: Optional[int]
    height: Optional[int]

    @property
    def mime(self) -> str:
        return self.format.mime


@dataclass(frozen=True)
class ImagePart:
    '''
    Inline image payload as sent to model backends
    '''

    mime: str
    data_b64: str

    @property
    def data_url(self) -> str:
        return f'data:{self.mime};base64,{self.data_b64}'

    @property
    def digest(self) -> str:
        return hashlib.sha256(self.data_b64.encode('ascii')).hexdigest()


class HeaderTag(Subconstruct):
    '''
    Fixed-width header tag restricted to the members of `enum`; parsing yields the
    member, anything else is an unsupported variant of the format
    '''

    def __init__(self, subcon: Construct, enum: Type[Enum], what: Optional[str] = None):
        if not (isinstance(enum, type) and issubclass(enum, Enum)):
            raise MappingError(f'{enum!r} is not an Enum type')
        super().__init__(subcon)
        self.enum = enum
        self.what = what or enum.__name__
        self.members = {m.value: m for m in enum}

    def _parse(self, stream, context, path):
        raw = super()._parse(stream, context, path)
        if raw not in self.members:
            raise MappingError(f'unsupported {self.what} {raw!r}', path=path)
        return self.members[raw]

    def _build(self, obj, stream, context, path):
        if not isinstance(obj, self.enum):
            raise MappingError(f'cannot write {obj!r} as {self.what}', path=path)
        super()._build(obj.value, stream, context, path)
        return obj


class GifVersion(Enum):
    GIF87A = b'87a'
    GIF89A = b'89a'


class WebpChunk(Enum):
    LOSSY = b'VP8 '
    LOSSLESS = b'VP8L'
    EXTENDED = b'VP8X'


PngHeader = Struct(
    'signature' / Const(b'\x89PNG\r\n\x1a\n'),
    'ihdr_length' / Int32ub,
    'chunk_type' / Const(b'IHDR'),
    'width' / Int32ub,
    'height' / Int32ub,
)

GifHeader = Struct(
    'signature' / Const(b'GIF'),
    'version' / HeaderTag(Bytes(3), GifVersion, 'GIF version'),
    'width' / Int16ul,
    'height' / Int16ul,
)

WebpHeader = Struct(
    'riff' / Const(b'RIFF'),
    'size' / Int32ul,
    'webp' / Const(b'WEBP'),
    'chunk' / HeaderTag(Bytes(4), WebpChunk, 'WebP chunk'),
)

JpegStart = Const(b'\xff\xd8')

JpegSegment = Struct(
    'prefix' / Const(b'\xff'),
    'marker' / Int8ub,
    'length' / Int16ub,
)

JpegFrame = Struct(
    'precision' / Int8ub,
    'height' / Int16ub,
    'width' / Int16ub,
)

# SOF0..SOF15 minus DHT (c4), JPG (c8) and DAC (cc)
_JPEG_SOF = frozenset(range(0xc0, 0xd0)) - {0xc4, 0xc8, 0xcc}
_JPEG_SOS = 0xda
_JPEG_EOI = 0xd9


def _sniff_png(stream: IO[bytes]) -> ImageInfo:
    h = PngHeader.parse_stream(stream)
    return ImageInfo(ImageFormat.PNG, h.width, h.height)


def _sniff_gif(stream: IO[bytes]) -> ImageInfo:
    h = GifHeader.parse_stream(stream)
    return ImageInfo(ImageFormat.GIF, h.width, h.height)


def _sniff_webp(stream: IO[bytes]) -> ImageInfo:
    WebpHeader.parse_stream(stream)
    return ImageInfo(ImageFormat.WEBP, None, None)


def _sniff_jpeg(stream: IO[bytes]) -> ImageInfo:
    JpegStart.parse_stream(stream)
    while True:
        seg = JpegSegment.parse_stream(stream)
        if seg.marker in _JPEG_SOF:
            frame = JpegFrame.parse_stream(stream)
            return ImageInfo(ImageFormat.JPEG, frame.width, frame.height)
        if seg.marker in (_JPEG_SOS, _JPEG_EOI):
            # no frame header before scan data, still a JPEG
            return ImageInfo(ImageFormat.JPEG, None, None)
        if seg.length < 2:
            raise ImageFormatError(f'invalid JPEG segment length {seg.length}')
        stream.seek(seg.length - 2, io.SEEK_CUR)


_SNIFFERS: List[Tuple[bytes, Callable[[IO[bytes]], ImageInfo]]] = [
    (b'\x89PNG', _sniff_png),
    (b'GIF8', _sniff_gif),
    (b'RIFF', _sniff_webp),
    (b'\xff\xd8', _sniff_jpeg),
]


def sniff_image(data: bytes) -> ImageInfo:
    '''
    Detects the image format (and dimensions, where the header carries them)
    from the leading bytes of an image file

    Examples:
        >>> sniff_image(b'GIF89a\\x02\\x00\\x03\\x00').height
        3
    '''
    for magic, sniffer in _SNIFFERS:
        if not data.startswith(magic):
            continue
        try:
            return sniffer(io.BytesIO(data))
        except ConstructError as e:
            raise ImageFormatError(f'malformed {sniffer.__name__[7:].upper()} header: {e}') from e
    raise ImageFormatError(f'unrecognized image data (leading bytes {data[:8].hex()})')


def encode_frame(path: Union[str, Path]) -> ImagePart:
    '''
    Reads an image file and returns it as a base64 payload with its detected MIME type
    '''
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise ImageFormatError(f'cannot read frame {path}: {e}') from e
    try:
        info = sniff_image(data)
    except ImageFormatError as e:
        raise ImageFormatError(f'{path}: {e}') from e
    return ImagePart(info.mime, base64.b64encode(data).decode('ascii'))
