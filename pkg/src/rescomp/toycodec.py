"""Bundled deterministic anchor codec and the pluggable codec interface.

The toy codec pipeline: per-channel shift to [-0.5, 0.5] -> 8x8 block DCT-II
(orthonormal; edge blocks replicate-padded) -> uniform scalar quantization
with step 2**(qp/6)/256 (round half to even) -> zigzag scan -> (zero-run,
level) pairs -> Exp-Golomb(k=0) bit coding, runs unsigned, levels signed.

Stream layout (bit-exact): magic b"TDCT" | encoded_w u32 LE | encoded_h u32 LE
| native_qp f32 LE | one MSB-first bitstream holding every block of every
channel (channels 0..2, blocks in raster order within a channel), zero-padded
to a whole byte at the very end only. Within a block, each nonzero
coefficient is coded as ueg(run), seg(level); end-of-block is the pair
ueg(0), seg(0), which cannot collide with data because real levels are
nonzero.
"""

from __future__ import annotations

import math
import struct
import subprocess
import tempfile
import threading
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path
from typing import Mapping, Protocol, Sequence

import numpy as np

from .errors import StreamFormatError, TruncatedStreamError

MAGIC = b"TDCT"
HEADER = struct.Struct("<4sIIf")
BLOCK = 8


class CodecId(IntEnum):
    TOY_DCT = 0
    EXTERNAL_TRADITIONAL = 1
    EXTERNAL_LEARNED = 2


#: codec-type flag: 0 for traditional-style codecs, 1 for learned codecs.
CHI_CT = {
    CodecId.TOY_DCT: 0.0,
    CodecId.EXTERNAL_TRADITIONAL: 0.0,
    CodecId.EXTERNAL_LEARNED: 1.0,
}


@dataclass(frozen=True)
class QualitySpec:
    """Codec-native quality knob plus its normalized proxy.

    ``chi_qp`` is the mean bits-per-pixel the codec produces at ``native_qp``
    on a calibration set, so quality is comparable across codecs.
    """

    native_qp: float
    chi_qp: float

    def __post_init__(self):
        if not (self.chi_qp > 0):
            raise ValueError(f"chi_qp must be > 0, got {self.chi_qp}")


@dataclass(frozen=True)
class AnchorBitstream:
    data: bytes
    encoded_h: int
    encoded_w: int


class AnchorCodec(Protocol):
    """Anchor codec adapter: a deterministic encode/decode pair over opaque
    self-describing byte streams."""

    codec_id: CodecId

    def encode(self, img: np.ndarray, native_qp: float) -> AnchorBitstream: ...

    def decode(self, bs: AnchorBitstream) -> np.ndarray: ...

    def parse(self, data: bytes) -> AnchorBitstream: ...


# ---------------------------------------------------------------------------
# bit-level coding


class BitWriter:
    def __init__(self):
        self._bytes = bytearray()
        self._acc = 0
        self._nbits = 0

    def write_bit(self, bit: int):
        self._acc = (self._acc << 1) | (bit & 1)
        self._nbits += 1
        if self._nbits == 8:
            self._bytes.append(self._acc)
            self._acc = 0
            self._nbits = 0

    def write_bits(self, value: int, width: int):
        for shift in range(width - 1, -1, -1):
            self.write_bit((value >> shift) & 1)

    def getvalue(self) -> bytes:
        out = bytearray(self._bytes)
        if self._nbits:
            out.append(self._acc << (8 - self._nbits))
        return bytes(out)


class BitReader:
    def __init__(self, data: bytes, base_offset: int = 0):
        self._data = data
        self._pos = 0  # bit position
        self._base = base_offset

    @property
    def byte_offset(self) -> int:
        return self._base + self._pos // 8

    def read_bit(self) -> int:
        byte_idx, bit_idx = divmod(self._pos, 8)
        if byte_idx >= len(self._data):
            raise TruncatedStreamError("bitstream exhausted", offset=self.byte_offset)
        self._pos += 1
        return (self._data[byte_idx] >> (7 - bit_idx)) & 1

    def read_bits(self, width: int) -> int:
        value = 0
        for _ in range(width):
            value = (value << 1) | self.read_bit()
        return value


def ueg_encode(w: BitWriter, n: int):
    """Unsigned Exp-Golomb, k=0."""
    if n < 0:
        raise ValueError("ueg requires n >= 0")
    m = n + 1
    k = m.bit_length() - 1
    w.write_bits(0, k)
    w.write_bits(m, k + 1)


def ueg_decode(r: BitReader) -> int:
    k = 0
    while r.read_bit() == 0:
        k += 1
        if k > 32:
            raise StreamFormatError("exp-golomb prefix too long", offset=r.byte_offset)
    return ((1 << k) | r.read_bits(k)) - 1


def seg_encode(w: BitWriter, v: int):
    """Signed Exp-Golomb: v > 0 maps to 2v-1, v <= 0 maps to -2v."""
    ueg_encode(w, 2 * v - 1 if v > 0 else -2 * v)


def seg_decode(r: BitReader) -> int:
    n = ueg_decode(r)
    return (n + 1) // 2 if n % 2 else -(n // 2)


# ---------------------------------------------------------------------------
# transform and scan


def _dct_matrix() -> np.ndarray:
    n = np.arange(BLOCK)
    mat = np.cos(np.pi * (2 * n[None, :] + 1) * n[:, None] / (2 * BLOCK))
    mat *= math.sqrt(2.0 / BLOCK)
    mat[0] = math.sqrt(1.0 / BLOCK)
    return mat


_DCT = _dct_matrix()


def zigzag_order(size: int = BLOCK) -> np.ndarray:
    """Flat indices of the zigzag scan over a size x size block.

    Standard order: anti-diagonals by increasing index sum, odd sums walked
    top-right to bottom-left, even sums the other way.
    """
    coords = sorted(
        ((i, j) for i in range(size) for j in range(size)),
        key=lambda ij: (ij[0] + ij[1], ij[0] if (ij[0] + ij[1]) % 2 else ij[1]),
    )
    return np.array([i * size + j for i, j in coords])


_ZIGZAG = zigzag_order()


def quant_step(native_qp: float) -> float:
    """Quantizer step, doubling every 6 qp; qp=0 is one 8-bit pixel level."""
    return 2.0 ** (native_qp / 6.0) / 256.0


def encode_block_coeffs(w: BitWriter, coeffs: Sequence[int]):
    """Run-level code one zigzagged coefficient block into ``w``."""
    run = 0
    for level in coeffs:
        if level == 0:
            run += 1
        else:
            ueg_encode(w, run)
            seg_encode(w, int(level))
            run = 0
    ueg_encode(w, 0)
    seg_encode(w, 0)


def decode_block_coeffs(r: BitReader, count: int = BLOCK * BLOCK) -> np.ndarray:
    out = np.zeros(count, dtype=np.int32)
    pos = 0
    while True:
        run = ueg_decode(r)
        level = seg_decode(r)
        if level == 0:
            if run != 0:
                raise StreamFormatError(
                    "nonzero run with zero level", offset=r.byte_offset
                )
            return out
        pos += run
        if pos >= count:
            raise StreamFormatError("run past end of block", offset=r.byte_offset)
        out[pos] = level
        pos += 1


# ---------------------------------------------------------------------------
# toy codec


def _to_blocks(chan: np.ndarray) -> np.ndarray:
    """(H, W) -> (n_blocks, 8, 8) with replicate padding, raster order."""
    h, w = chan.shape
    ph = (-h) % BLOCK
    pw = (-w) % BLOCK
    padded = np.pad(chan, ((0, ph), (0, pw)), mode="edge")
    by, bx = padded.shape[0] // BLOCK, padded.shape[1] // BLOCK
    return (
        padded.reshape(by, BLOCK, bx, BLOCK).transpose(0, 2, 1, 3).reshape(-1, BLOCK, BLOCK)
    )


def _from_blocks(blocks: np.ndarray, h: int, w: int) -> np.ndarray:
    by = (h + BLOCK - 1) // BLOCK
    bx = (w + BLOCK - 1) // BLOCK
    full = blocks.reshape(by, bx, BLOCK, BLOCK).transpose(0, 2, 1, 3)
    return full.reshape(by * BLOCK, bx * BLOCK)[:h, :w]


class ToyDctCodec:
    """The bundled block-DCT codec; bit-exact and dependency-free."""

    codec_id = CodecId.TOY_DCT

    def encode(self, img: np.ndarray, native_qp: float) -> AnchorBitstream:
        img = np.asarray(img, dtype=np.float64)
        if img.ndim != 3 or img.shape[2] != 3 or img.shape[0] < 1 or img.shape[1] < 1:
            raise ValueError(f"expected non-empty (H, W, 3) image, got {img.shape}")
        h, w = img.shape[:2]
        step = quant_step(native_qp)
        writer = BitWriter()
        for c in range(3):
            blocks = _to_blocks(img[:, :, c] - 0.5)
            coeffs = np.einsum("ij,bjk,lk->bil", _DCT, blocks, _DCT)
            levels = np.rint(coeffs / step).astype(np.int64)
            for block in levels:
                encode_block_coeffs(writer, block.reshape(-1)[_ZIGZAG])
        data = HEADER.pack(MAGIC, w, h, np.float32(native_qp)) + writer.getvalue()
        return AnchorBitstream(data=data, encoded_h=h, encoded_w=w)

    def parse(self, data: bytes) -> AnchorBitstream:
        if len(data) < HEADER.size:
            raise TruncatedStreamError(
                f"stream shorter than {HEADER.size}-byte header", offset=len(data)
            )
        magic, w, h, _qp = HEADER.unpack_from(data)
        if magic != MAGIC:
            raise StreamFormatError(f"bad magic {magic!r}", offset=0)
        if w < 1:
            raise StreamFormatError("encoded width must be >= 1", offset=4)
        if h < 1:
            raise StreamFormatError("encoded height must be >= 1", offset=8)
        return AnchorBitstream(data=data, encoded_h=h, encoded_w=w)

    def decode(self, bs: AnchorBitstream) -> np.ndarray:
        parsed = self.parse(bs.data)
        h, w = parsed.encoded_h, parsed.encoded_w
        _, _, _, native_qp = HEADER.unpack_from(bs.data)
        if not math.isfinite(native_qp):
            raise StreamFormatError("non-finite qp", offset=12)
        step = quant_step(float(native_qp))
        reader = BitReader(bs.data[HEADER.size :], base_offset=HEADER.size)
        nblocks = ((h + BLOCK - 1) // BLOCK) * ((w + BLOCK - 1) // BLOCK)
        inv_zigzag = np.argsort(_ZIGZAG)
        channels = []
        for _c in range(3):
            blocks = np.empty((nblocks, BLOCK, BLOCK))
            for b in range(nblocks):
                zz = decode_block_coeffs(reader)
                blocks[b] = (zz[inv_zigzag].reshape(BLOCK, BLOCK)) * step
            pixels = np.einsum("ji,bjk,kl->bil", _DCT, blocks, _DCT)
            channels.append(_from_blocks(pixels, h, w) + 0.5)
        out = np.stack(channels, axis=-1)
        return np.clip(out, 0.0, 1.0).astype(np.float32)


class ExternalCodecAdapter:
    """Process-boundary adapter for a real codec.

    ``encode_cmd`` is run as ``[*encode_cmd, in.png, out.bin, str(qp)]`` and
    ``decode_cmd`` as ``[*decode_cmd, in.bin, out.png]``. The adapter wraps
    the external payload with a 12-byte dim header (b"XCDC", w u32 LE,
    h u32 LE) so streams stay self-describing. ``chi_qp_table`` supplies
    precomputed normalized quality values keyed by native_qp.
    """

    _MAGIC = b"XCDC"
    _HEADER = struct.Struct("<4sII")

    def __init__(
        self,
        codec_id: CodecId,
        encode_cmd: Sequence[str],
        decode_cmd: Sequence[str],
        chi_qp_table: Mapping[float, float] | None = None,
    ):
        if codec_id == CodecId.TOY_DCT:
            raise ValueError("external adapter cannot claim the bundled codec id")
        self.codec_id = codec_id
        self.encode_cmd = list(encode_cmd)
        self.decode_cmd = list(decode_cmd)
        self.chi_qp_table = dict(chi_qp_table or {})

    def encode(self, img: np.ndarray, native_qp: float) -> AnchorBitstream:
        from . import imageio

        h, w = img.shape[:2]
        with tempfile.TemporaryDirectory() as tmp:
            src = Path(tmp) / "in.png"
            dst = Path(tmp) / "out.bin"
            imageio.save_image(img, src)
            subprocess.run(
                [*self.encode_cmd, str(src), str(dst), str(native_qp)],
                check=True,
                capture_output=True,
            )
            payload = dst.read_bytes()
        data = self._HEADER.pack(self._MAGIC, w, h) + payload
        return AnchorBitstream(data=data, encoded_h=h, encoded_w=w)

    def parse(self, data: bytes) -> AnchorBitstream:
        if len(data) < self._HEADER.size:
            raise TruncatedStreamError("stream shorter than adapter header", offset=len(data))
        magic, w, h = self._HEADER.unpack_from(data)
        if magic != self._MAGIC:
            raise StreamFormatError(f"bad magic {magic!r}", offset=0)
        return AnchorBitstream(data=data, encoded_h=h, encoded_w=w)

    def decode(self, bs: AnchorBitstream) -> np.ndarray:
        from . import imageio

        parsed = self.parse(bs.data)
        with tempfile.TemporaryDirectory() as tmp:
            src = Path(tmp) / "in.bin"
            dst = Path(tmp) / "out.png"
            src.write_bytes(bs.data[self._HEADER.size :])
            subprocess.run(
                [*self.decode_cmd, str(src), str(dst)], check=True, capture_output=True
            )
            img = imageio.load_image(dst)
        if img.shape[:2] != (parsed.encoded_h, parsed.encoded_w):
            raise StreamFormatError(
                f"decoded dims {img.shape[:2]} disagree with header "
                f"{(parsed.encoded_h, parsed.encoded_w)}"
            )
        return img


def default_codecs() -> dict[CodecId, AnchorCodec]:
    return {CodecId.TOY_DCT: ToyDctCodec()}


# ---------------------------------------------------------------------------
# rate accounting


def measure_bpp(bs: AnchorBitstream, orig_h: int, orig_w: int) -> float:
    """Bits per pixel of the stream against the original (pre-downsampling)
    resolution."""
    if orig_h * orig_w <= 0:
        raise ValueError("original dims must have positive area")
    return 8.0 * len(bs.data) / (orig_h * orig_w)


_chi_qp_cache: dict[tuple[int, float], float] = {}
_chi_qp_lock = threading.Lock()


def normalize_qp(
    codec: AnchorCodec, native_qp: float, calibration_set: Sequence[np.ndarray]
) -> float:
    """Normalized quality proxy: mean bpp at native resolution over the
    calibration set. Cached per (codec id, native_qp)."""
    if len(calibration_set) == 0:
        raise ValueError("calibration set must be non-empty")
    if isinstance(codec, ExternalCodecAdapter) and float(native_qp) in codec.chi_qp_table:
        return codec.chi_qp_table[float(native_qp)]
    key = (int(codec.codec_id), float(native_qp))
    with _chi_qp_lock:
        if key in _chi_qp_cache:
            return _chi_qp_cache[key]
    bpps = [
        measure_bpp(codec.encode(img, native_qp), img.shape[0], img.shape[1])
        for img in calibration_set
    ]
    value = float(np.mean(bpps))
    with _chi_qp_lock:
        _chi_qp_cache[key] = value
    return value


def clear_chi_qp_cache():
    with _chi_qp_lock:
        _chi_qp_cache.clear()


def quality_for(
    codec: AnchorCodec, native_qp: float, calibration_set: Sequence[np.ndarray]
) -> QualitySpec:
    return QualitySpec(
        native_qp=float(native_qp),
        chi_qp=normalize_qp(codec, native_qp, calibration_set),
    )
