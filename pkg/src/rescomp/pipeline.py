"""End-to-end compress/decompress orchestration and the container format.

Compression inserts an arbitrary-scale bicubic downsampler in front of the
anchor codec and records everything the restoration decoder needs in a
fixed little-endian container: codec identity, original dims, the scale
factor, the native and normalized quality values, and an optionally
attached compressed caption.

Decompression has two modes. With restoration disabled (``crd_enabled``
false) the anchor decode is returned verbatim (bicubic-upsampled only when
the encoded dims differ from the originals), so an s=1 container is a
byte-exact pass-through of the bare anchor codec. With restoration enabled,
the decoded image is upsampled to the original dims and refined by the
conditioned latent-diffusion model.

Wire format, all little-endian, no padding:

    magic "AEIC" (4B) | version u8 | flags u8 | codec_id u8 | reserved u8 |
    orig_w u32 | orig_h u32 | s f32 | native_qp f32 | chi_qp f32 |
    caption_len u32 | caption LZW bytes | bitstream_len u32 | bitstream

Flags: bit0 = restoration enabled, bit1 = caption present; other bits must
be zero. The normalized quality travels in the container because the
decoder may not have the calibration set to recompute it.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace

import numpy as np

from . import rescale, semantics, toycodec
from .errors import StreamFormatError, TruncatedStreamError
from .toycodec import CHI_CT, AnchorCodec, CodecId, QualitySpec

MAGIC = b"AEIC"
VERSION = 1
_FIXED = struct.Struct("<4sBBBBIIfffI")  # through caption_len
_LEN = struct.Struct("<I")
FLAG_CRD = 0x01
FLAG_CAPTION = 0x02
HEADER_BYTES = _FIXED.size + _LEN.size  # fixed fields + bitstream_len


@dataclass(frozen=True)
class EncodingParams:
    """Everything the encoder side chooses: anchor codec, its quality, the
    rescaling factor, and the two feature switches."""

    codec: CodecId
    quality: QualitySpec
    s: float
    crd_enabled: bool = True
    caption_enabled: bool = True

    def __post_init__(self):
        # s travels as f32; coerce now so compress/decompress agree exactly
        object.__setattr__(self, "s", float(np.float32(self.s)))
        if not np.isfinite(self.s) or self.s < 1.0:
            raise ValueError(f"scale factor must be >= 1, got {self.s}")

    @property
    def chi_ct(self) -> float:
        return CHI_CT[self.codec]


@dataclass(frozen=True)
class CompressedContainer:
    crd_enabled: bool
    caption_present: bool
    codec_id: CodecId
    orig_w: int
    orig_h: int
    s: float
    native_qp: float
    chi_qp: float
    caption_bytes: bytes
    bitstream: bytes

    def __post_init__(self):
        # all three travel as f32; coerce so serialize/deserialize is an
        # exact field-for-field identity
        for name in ("s", "native_qp", "chi_qp"):
            object.__setattr__(self, name, float(np.float32(getattr(self, name))))

    @property
    def caption_text(self) -> str:
        if not self.caption_present:
            return ""
        raw = semantics.lz_decompress(self.caption_bytes)
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise StreamFormatError(f"caption is not valid UTF-8: {exc}") from exc


def serialize(c: CompressedContainer) -> bytes:
    flags = (FLAG_CRD if c.crd_enabled else 0) | (
        FLAG_CAPTION if c.caption_present else 0
    )
    head = _FIXED.pack(
        MAGIC,
        VERSION,
        flags,
        int(c.codec_id),
        0,
        c.orig_w,
        c.orig_h,
        np.float32(c.s),
        np.float32(c.native_qp),
        np.float32(c.chi_qp),
        len(c.caption_bytes),
    )
    return head + c.caption_bytes + _LEN.pack(len(c.bitstream)) + c.bitstream


def deserialize(data: bytes) -> CompressedContainer:
    if len(data) < _FIXED.size:
        raise TruncatedStreamError(
            f"container needs at least {_FIXED.size} bytes, got {len(data)}"
        )
    (
        magic,
        version,
        flags,
        codec_id,
        reserved,
        orig_w,
        orig_h,
        s,
        native_qp,
        chi_qp,
        caption_len,
    ) = _FIXED.unpack_from(data, 0)
    if magic != MAGIC:
        raise StreamFormatError(f"bad magic {magic!r}", offset=0)
    if version != VERSION:
        raise StreamFormatError(f"unsupported container version {version}", offset=4)
    if flags & ~(FLAG_CRD | FLAG_CAPTION):
        raise StreamFormatError(f"unknown flag bits 0x{flags:02x}", offset=5)
    if reserved != 0:
        raise StreamFormatError(f"reserved byte must be 0, got {reserved}", offset=7)
    try:
        codec_id = CodecId(codec_id)
    except ValueError:
        raise StreamFormatError(f"unknown codec id {codec_id}", offset=6) from None
    if orig_w < 1:
        raise StreamFormatError(f"original width must be >= 1, got {orig_w}", offset=8)
    if orig_h < 1:
        raise StreamFormatError(
            f"original height must be >= 1, got {orig_h}", offset=12
        )
    if not np.isfinite(s) or s < 1.0:
        raise StreamFormatError(f"scale factor must be >= 1, got {s}", offset=16)
    if not np.isfinite(native_qp):
        raise StreamFormatError("native qp must be finite", offset=20)
    if not (np.isfinite(chi_qp) and chi_qp > 0):
        raise StreamFormatError(f"chi_qp must be > 0, got {chi_qp}", offset=24)
    caption_present = bool(flags & FLAG_CAPTION)
    if not caption_present and caption_len != 0:
        raise StreamFormatError(
            f"caption flag clear but caption_len = {caption_len}", offset=28
        )
    pos = _FIXED.size
    if caption_len > len(data) - pos:
        raise TruncatedStreamError(
            f"caption claims {caption_len} bytes, only {len(data) - pos} remain"
        )
    caption_bytes = data[pos : pos + caption_len]
    pos += caption_len
    if len(data) - pos < _LEN.size:
        raise TruncatedStreamError("container ends before bitstream length")
    (bitstream_len,) = _LEN.unpack_from(data, pos)
    pos += _LEN.size
    if bitstream_len > len(data) - pos:
        raise TruncatedStreamError(
            f"bitstream claims {bitstream_len} bytes, only {len(data) - pos} remain"
        )
    bitstream = data[pos : pos + bitstream_len]
    pos += bitstream_len
    if pos != len(data):
        raise StreamFormatError(
            f"{len(data) - pos} trailing bytes after bitstream", offset=pos
        )
    return CompressedContainer(
        crd_enabled=bool(flags & FLAG_CRD),
        caption_present=caption_present,
        codec_id=codec_id,
        orig_w=orig_w,
        orig_h=orig_h,
        s=float(s),
        native_qp=float(native_qp),
        chi_qp=float(chi_qp),
        caption_bytes=caption_bytes,
        bitstream=bitstream,
    )


def compress(
    img: np.ndarray,
    params: EncodingParams,
    codecs: dict[CodecId, AnchorCodec] | None = None,
    caption_provider: semantics.CaptionProvider | None = None,
) -> CompressedContainer:
    codecs = codecs if codecs is not None else toycodec.default_codecs()
    if params.codec not in codecs:
        raise StreamFormatError(f"no codec registered for id {params.codec}")
    codec = codecs[params.codec]
    orig_h, orig_w = img.shape[0], img.shape[1]
    if params.caption_enabled:
        provider = caption_provider or semantics.EmptyCaptionProvider()
        caption_bytes = semantics.lz_compress(provider(img).encode("utf-8"))
    else:
        caption_bytes = b""
    lr = rescale.downsample(img, params.s)
    bs = codec.encode(lr, params.quality.native_qp)
    return CompressedContainer(
        crd_enabled=params.crd_enabled,
        caption_present=params.caption_enabled,
        codec_id=params.codec,
        orig_w=orig_w,
        orig_h=orig_h,
        s=params.s,
        native_qp=float(params.quality.native_qp),
        chi_qp=float(params.quality.chi_qp),
        caption_bytes=caption_bytes,
        bitstream=bs.data,
    )


def decompress(
    c: CompressedContainer,
    steps: int = 20,
    seed: int = 0,
    model=None,
    codecs: dict[CodecId, AnchorCodec] | None = None,
    semantic_provider: semantics.SemanticProvider | None = None,
) -> np.ndarray:
    codecs = codecs if codecs is not None else toycodec.default_codecs()
    if c.codec_id not in codecs:
        raise StreamFormatError(f"no codec registered for id {c.codec_id}")
    codec = codecs[c.codec_id]
    x_g = codec.decode(codec.parse(c.bitstream))
    needs_resize = x_g.shape[:2] != (c.orig_h, c.orig_w)
    if not c.crd_enabled:
        return rescale.upsample(x_g, c.orig_h, c.orig_w) if needs_resize else x_g
    x_g_up = rescale.upsample(x_g, c.orig_h, c.orig_w) if needs_resize else x_g
    if model is None:
        from .decoder import RestorationModel

        model = RestorationModel()
    provider = semantic_provider or semantics.FrozenConvSemanticProvider()
    tokens = semantics.caption_tokenize(c.caption_text)
    feats = provider(x_g_up).array
    cond = model.make_conditioning(
        x_g_up, CHI_CT[c.codec_id], c.chi_qp, c.s, tokens, feats
    )
    out = model.sample(cond, steps=steps, seed=seed, out_hw=(c.orig_h, c.orig_w))
    from .decoder import batch_to_np

    return batch_to_np(out)


def anchor_bpp(c: CompressedContainer) -> float:
    """Bits per pixel of the anchor bitstream alone, against original dims."""
    return 8.0 * len(c.bitstream) / (c.orig_h * c.orig_w)


def total_bpp(c: CompressedContainer) -> float:
    """Bits per pixel of the full serialized container (header, caption, and
    bitstream), against original dims."""
    return 8.0 * len(serialize(c)) / (c.orig_h * c.orig_w)


def with_crd(c: CompressedContainer, enabled: bool) -> CompressedContainer:
    """Same payload with the restoration flag toggled (decode-side choice)."""
    return replace(c, crd_enabled=enabled)
