"""Caption and soft-semantic side information.

Captions ride in the container losslessly via LZW: 256 single-byte initial
codes plus code 256 = end-of-stream, dictionary growing to 12-bit codes
(257..4095) then freezing, every code packed LSB-first at a fixed 12 bits.
An empty caption compresses to just the end code.

Soft semantics come from a pluggable provider; the bundled default is a
small frozen randomly-initialized conv encoder producing a feature map at
1/16 input scale. It stands in for a large pretrained image encoder so the
attention wiring downstream has realistic inputs, with weights drawn from a
seeded numpy stream for cross-version reproducibility.
"""

from __future__ import annotations

import struct
import subprocess
import tempfile
import warnings
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
import torch

from .errors import StreamFormatError, TruncatedStreamError

END_CODE = 256
MAX_CODE = 4095
CODE_BITS = 12

C_SEM_DEFAULT = 32
SEM_SCALE_STAGES = 4  # stride-2 stages, so features live at 1/16 scale
EMBED_DIM_DEFAULT = 128
HASH_BUCKETS = 4096
MAX_CAPTION_TOKENS = 32


# ---------------------------------------------------------------------------
# LZW caption coding


def _pack_codes(codes: Sequence[int]) -> bytes:
    out = bytearray()
    acc = 0
    nbits = 0
    for code in codes:
        acc |= code << nbits
        nbits += CODE_BITS
        while nbits >= 8:
            out.append(acc & 0xFF)
            acc >>= 8
            nbits -= 8
    if nbits:
        out.append(acc & 0xFF)
    return bytes(out)


def _iter_codes(data: bytes):
    acc = 0
    nbits = 0
    for byte in data:
        acc |= byte << nbits
        nbits += 8
        if nbits >= CODE_BITS:
            yield acc & 0xFFF
            acc >>= CODE_BITS
            nbits -= CODE_BITS


def lz_compress(raw: bytes) -> bytes:
    if len(raw) >= 2**32:
        raise ValueError("input too large")
    table: dict[bytes, int] = {bytes([i]): i for i in range(256)}
    next_code = END_CODE + 1
    codes: list[int] = []
    w = b""
    for i in range(len(raw)):
        c = raw[i : i + 1]
        wc = w + c
        if wc in table:
            w = wc
            continue
        codes.append(table[w])
        if next_code <= MAX_CODE:
            table[wc] = next_code
            next_code += 1
        w = c
    if w:
        codes.append(table[w])
    codes.append(END_CODE)
    return _pack_codes(codes)


def lz_decompress(data: bytes) -> bytes:
    table: list[bytes | None] = [bytes([i]) for i in range(256)]
    table.append(None)  # END_CODE slot
    out = bytearray()
    prev: bytes | None = None
    for code in _iter_codes(data):
        if code == END_CODE:
            return bytes(out)
        if code < len(table) and table[code] is not None:
            entry = table[code]
        elif code == len(table) and prev is not None:
            entry = prev + prev[:1]
        else:
            raise StreamFormatError(f"unknown LZW code {code}")
        out.extend(entry)
        if prev is not None and len(table) <= MAX_CODE:
            table.append(prev + entry[:1])
        prev = entry
    raise TruncatedStreamError("LZW stream missing end code", offset=len(data))


@dataclass(frozen=True)
class Caption:
    text: str
    compressed: bytes

    @classmethod
    def from_text(cls, text: str) -> "Caption":
        return cls(text=text, compressed=lz_compress(text.encode("utf-8")))

    @classmethod
    def from_compressed(cls, data: bytes) -> "Caption":
        return cls(text=lz_decompress(data).decode("utf-8"), compressed=data)


# ---------------------------------------------------------------------------
# caption providers


class CaptionProvider(Protocol):
    def __call__(self, img: np.ndarray) -> str: ...


class EmptyCaptionProvider:
    def __call__(self, img: np.ndarray) -> str:
        return ""


class FixedCaptionProvider:
    def __init__(self, text: str):
        self.text = text

    def __call__(self, img: np.ndarray) -> str:
        return self.text


class ExternalCaptionProvider:
    """Runs ``[*cmd, image.png]`` and takes stdout as the caption.

    Any failure (nonzero exit, missing binary, undecodable output) degrades
    to an empty caption with a warning; captions are enhancement, not a
    correctness dependency.
    """

    def __init__(self, cmd: Sequence[str], timeout: float = 60.0):
        self.cmd = list(cmd)
        self.timeout = timeout

    def __call__(self, img: np.ndarray) -> str:
        from . import imageio

        try:
            with tempfile.TemporaryDirectory() as tmp:
                path = Path(tmp) / "in.png"
                imageio.save_image(img, path)
                proc = subprocess.run(
                    [*self.cmd, str(path)],
                    check=True,
                    capture_output=True,
                    timeout=self.timeout,
                )
            return proc.stdout.decode("utf-8").strip()
        except (OSError, subprocess.SubprocessError, UnicodeDecodeError) as exc:
            warnings.warn(f"caption command failed ({exc}); using empty caption")
            return ""


# ---------------------------------------------------------------------------
# semantic features


@dataclass(frozen=True)
class SemanticFeatures:
    """Feature map (C, H, W) float32 at 1/16 the source image scale."""

    array: np.ndarray
    source_hw: tuple[int, int]

    def __post_init__(self):
        if self.array.ndim != 3:
            raise ValueError(f"expected (C, H, W) features, got {self.array.shape}")
        if not np.isfinite(self.array).all():
            raise ValueError("semantic features contain non-finite values")
        want = feature_dims(*self.source_hw)
        if self.array.shape[1:] != want:
            raise StreamFormatError(
                f"feature dims {self.array.shape[1:]} do not match source "
                f"{self.source_hw} (expected {want})"
            )


def feature_dims(height: int, width: int) -> tuple[int, int]:
    h, w = height, width
    for _ in range(SEM_SCALE_STAGES):
        h = (h + 1) // 2
        w = (w + 1) // 2
    return h, w


class SemanticProvider(Protocol):
    def __call__(self, img: np.ndarray) -> SemanticFeatures: ...


def _seeded_conv(
    rng: np.random.Generator, c_in: int, c_out: int, k: int = 3
) -> torch.nn.Conv2d:
    conv = torch.nn.Conv2d(c_in, c_out, k, stride=2, padding=k // 2, bias=True)
    fan_in = c_in * k * k
    w = rng.standard_normal((c_out, c_in, k, k)) * np.sqrt(2.0 / fan_in)
    with torch.no_grad():
        conv.weight.copy_(torch.from_numpy(w.astype(np.float32)))
        conv.bias.zero_()
    conv.requires_grad_(False)
    return conv


class FrozenConvSemanticProvider:
    """Deterministic conv stack: 4 stride-2 stages, SiLU between stages."""

    def __init__(self, channels: int = C_SEM_DEFAULT, seed: int = 7701):
        self.channels = channels
        self.seed = seed
        rng = np.random.default_rng(seed)
        widths = [3, 16, 32, 32, channels]
        self._convs = torch.nn.ModuleList(
            _seeded_conv(rng, widths[i], widths[i + 1]) for i in range(SEM_SCALE_STAGES)
        )
        self._convs.eval()

    def __call__(self, img: np.ndarray) -> SemanticFeatures:
        img = np.asarray(img, dtype=np.float32)
        if img.ndim != 3 or img.shape[2] != 3:
            raise ValueError(f"expected (H, W, 3) image, got {img.shape}")
        x = torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1)))[None]
        with torch.no_grad():
            for i, conv in enumerate(self._convs):
                x = conv(x)
                if i < SEM_SCALE_STAGES - 1:
                    x = torch.nn.functional.silu(x)
        return SemanticFeatures(
            array=x[0].numpy().astype(np.float32), source_hw=img.shape[:2]
        )


class FileSemanticProvider:
    """Serves features precomputed by an external encoder from a file."""

    def __init__(self, path: str | Path):
        self.path = Path(path)

    def __call__(self, img: np.ndarray) -> SemanticFeatures:
        arr = load_features(self.path)
        return SemanticFeatures(array=arr, source_hw=img.shape[:2])


_FEATURE_HEADER = struct.Struct("<III")


def save_features(arr: np.ndarray, path: str | Path) -> None:
    arr = np.ascontiguousarray(arr, dtype=np.float32)
    if arr.ndim != 3:
        raise ValueError(f"expected (C, H, W) features, got {arr.shape}")
    c, h, w = arr.shape
    payload = arr.astype("<f4").tobytes()
    Path(path).write_bytes(_FEATURE_HEADER.pack(c, h, w) + payload)


def load_features(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < _FEATURE_HEADER.size:
        raise TruncatedStreamError("feature file shorter than header", offset=len(data))
    c, h, w = _FEATURE_HEADER.unpack_from(data)
    want = _FEATURE_HEADER.size + 4 * c * h * w
    if len(data) != want:
        raise StreamFormatError(
            f"feature file size {len(data)} does not match shape ({c},{h},{w})",
            offset=_FEATURE_HEADER.size,
        )
    flat = np.frombuffer(data, dtype="<f4", offset=_FEATURE_HEADER.size)
    return flat.reshape(c, h, w).astype(np.float32)


# ---------------------------------------------------------------------------
# caption tokenization


class HashBucketTokenizer:
    """Whitespace tokens -> fixed embeddings via a seeded hash-bucket table.

    Table row ``HASH_BUCKETS`` is the null token served for empty text. The
    table itself stays frozen; downstream cross-attention projections supply
    all trainable adaptation, which for any single fixed token is as
    expressive as training the token vector itself.
    """

    def __init__(
        self,
        dim: int = EMBED_DIM_DEFAULT,
        buckets: int = HASH_BUCKETS,
        max_tokens: int = MAX_CAPTION_TOKENS,
        seed: int = 4242,
    ):
        self.dim = dim
        self.buckets = buckets
        self.max_tokens = max_tokens
        rng = np.random.default_rng(seed)
        self.table = (rng.standard_normal((buckets + 1, dim)) * 0.02).astype(np.float32)

    def bucket(self, token: str) -> int:
        return zlib.crc32(token.encode("utf-8")) % self.buckets

    def __call__(self, text: str) -> np.ndarray:
        tokens = text.split()[: self.max_tokens]
        if not tokens:
            return self.table[[self.buckets]].copy()
        idx = [self.bucket(t) for t in tokens]
        return self.table[idx].copy()


def caption_tokenize(text: str, tokenizer: HashBucketTokenizer | None = None) -> np.ndarray:
    if tokenizer is None:
        tokenizer = _default_tokenizer()
    return tokenizer(text)


_TOKENIZER_SINGLETON: HashBucketTokenizer | None = None


def _default_tokenizer() -> HashBucketTokenizer:
    global _TOKENIZER_SINGLETON
    if _TOKENIZER_SINGLETON is None:
        _TOKENIZER_SINGLETON = HashBucketTokenizer()
    return _TOKENIZER_SINGLETON
