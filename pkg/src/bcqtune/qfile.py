"""Binary containers and storage arithmetic.

Three little-endian formats, each ending in a CRC32 of every preceding byte:

* ``BCQD``: a dense full-precision model (float32 weights);
* ``BCQ1``: a quantized base model (bit-packed planes, float32 scales);
* ``BCQA``: a task checkpoint holding only trained scales, bound to its base
  model by the SHA-256 of the base file.

Byte layouts are documented in FORMATS.md. Sizes in reports use MB = 10**6 bytes.
"""

from __future__ import annotations

import hashlib
import io
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .bcq import ROW, BCQMatrix, BitPlane, GroupedScales, QuantConfig, words_per_row
from .errors import BadMagicError, ChecksumError, CompatibilityError, ConfigError, IntegrityError, VersionError
from .qlinear import DenseLinear, QuantLinear
from .toymodel import Block, ModelConfig, ToyTransformer, layer_shapes, LINEAR_NAMES

MODEL_MAGIC = b"BCQ1"
DENSE_MAGIC = b"BCQD"
CKPT_MAGIC = b"BCQA"
VERSION = 1
MB = 1_000_000

GPT2_MEDIUM = ModelConfig(vocab=50257, h=1024, n_layers=24, n_ctx=1024)
GPT2_LARGE = ModelConfig(vocab=50257, h=1280, n_layers=36, n_ctx=1024)
GEOMETRIES = {"gpt2m": GPT2_MEDIUM, "gpt2l": GPT2_LARGE}

_F32 = np.dtype("<f4")
_U64 = np.dtype("<u8")


# -- low-level helpers ---------------------------------------------------------------

class _Writer:
    def __init__(self):
        self.buf = io.BytesIO()

    def pack(self, fmt: str, *values) -> None:
        self.buf.write(struct.pack("<" + fmt, *values))

    def array(self, arr: np.ndarray, dtype: np.dtype) -> None:
        self.buf.write(np.ascontiguousarray(arr, dtype=dtype).tobytes())

    def finish(self) -> bytes:
        body = self.buf.getvalue()
        return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, data: bytes, magic: bytes):
        if len(data) < len(magic) + 4:
            raise IntegrityError(f"file too short ({len(data)} bytes)")
        if data[:4] != magic:
            raise BadMagicError(f"bad magic {data[:4]!r}, expected {magic!r}")
        body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
        if zlib.crc32(body) != crc:
            raise ChecksumError("CRC32 mismatch: file is corrupt or truncated")
        self.data = body
        self.pos = 4

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise IntegrityError(f"unexpected end of data at byte {self.pos} (wanted {n} more)")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        fmt = "<" + fmt
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, shape, dtype: np.dtype) -> np.ndarray:
        count = int(np.prod(shape))
        raw = self.take(count * dtype.itemsize)
        return np.frombuffer(raw, dtype=dtype).reshape(shape)

    def floats(self, shape) -> np.ndarray:
        return self.array(shape, _F32).astype(np.float64)

    def done(self) -> None:
        if self.pos != len(self.data):
            raise IntegrityError(f"{len(self.data) - self.pos} trailing bytes before checksum")


def _check_version(version: int) -> None:
    if version != VERSION:
        raise VersionError(f"unsupported format version {version} (this build reads {VERSION})")


def _write_full_precision(w: _Writer, model: ToyTransformer) -> None:
    w.array(model.tok_emb, _F32)
    w.array(model.pos_emb, _F32)
    for block in model.blocks:
        for _, layer in block.linears():
            w.array(layer.bias, _F32)
        for attr in ("ln1_gain", "ln1_bias", "ln2_gain", "ln2_bias"):
            w.array(getattr(block, attr), _F32)
    w.array(model.lnf_gain, _F32)
    w.array(model.lnf_bias, _F32)


def _read_full_precision(r: _Reader, cfg: ModelConfig):
    h = cfg.h
    tok_emb = r.floats((cfg.vocab, h))
    pos_emb = r.floats((cfg.n_ctx, h))
    per_block = []
    for _ in range(cfg.n_layers):
        biases = {name: r.floats((h_out,)) for name, (h_out, _) in layer_shapes(h).items()}
        norms = {attr: r.floats((h,)) for attr in ("ln1_gain", "ln1_bias", "ln2_gain", "ln2_bias")}
        per_block.append((biases, norms))
    lnf_gain = r.floats((h,))
    lnf_bias = r.floats((h,))
    return tok_emb, pos_emb, per_block, lnf_gain, lnf_bias


def _read_path(path) -> bytes:
    return Path(path).read_bytes()


def _write_path(path, data: bytes) -> None:
    Path(path).write_bytes(data)


# -- dense model -----------------------------------------------------------------------

def serialize_dense(model: ToyTransformer) -> bytes:
    if model.is_quantized:
        raise ConfigError("serialize_dense expects a full-precision model")
    cfg = model.config
    w = _Writer()
    w.buf.write(DENSE_MAGIC)
    w.pack("HIIII", VERSION, cfg.vocab, cfg.h, cfg.n_layers, cfg.n_ctx)
    for _, layer in model.linear_layers():
        w.array(layer.weight, _F32)
    _write_full_precision(w, model)
    return w.finish()


def deserialize_dense(data: bytes) -> ToyTransformer:
    r = _Reader(data, DENSE_MAGIC)
    version, vocab, h, n_layers, n_ctx = r.unpack("HIIII")
    _check_version(version)
    cfg = _config_or_integrity(vocab=vocab, h=h, n_layers=n_layers, n_ctx=n_ctx)
    weights = [{name: r.floats(shape) for name, shape in layer_shapes(h).items()}
               for _ in range(n_layers)]
    tok_emb, pos_emb, per_block, lnf_gain, lnf_bias = _read_full_precision(r, cfg)
    r.done()
    blocks = [Block(**{name: DenseLinear(ws[name], biases[name]) for name in LINEAR_NAMES}, **norms)
              for ws, (biases, norms) in zip(weights, per_block)]
    return ToyTransformer(cfg, tok_emb, pos_emb, blocks, lnf_gain, lnf_bias, ())


def save_dense(path, model: ToyTransformer) -> None:
    _write_path(path, serialize_dense(model))


def load_dense(path) -> ToyTransformer:
    return deserialize_dense(_read_path(path))


def _config_or_integrity(**kwargs) -> ModelConfig:
    try:
        return ModelConfig(**kwargs)
    except ConfigError as exc:
        raise IntegrityError(f"invalid header: {exc}") from None


# -- quantized base model -----------------------------------------------------------------

def serialize_model(model: ToyTransformer) -> bytes:
    if not model.is_quantized:
        raise ConfigError("serialize_model expects a quantized model")
    cfg = model.config
    w = _Writer()
    w.buf.write(MODEL_MAGIC)
    w.pack("HIIIB", VERSION, cfg.vocab, cfg.h, cfg.n_layers, cfg.q)
    w.pack("BI", 0 if cfg.g == ROW else 1, cfg.g)
    w.pack("I", cfg.n_ctx)
    for _, layer in model.linear_layers():
        bq = layer.weights
        w.pack("III", bq.h_out, bq.h_in, bq.group_size)
        for plane in bq.planes:
            w.array(plane.words, _U64)
        for scale in bq.scales:
            w.array(scale.values, _F32)
    _write_full_precision(w, model)
    return w.finish()


def content_hash(model: ToyTransformer) -> bytes:
    """SHA-256 of the model's ``BCQ1`` serialization."""
    return hashlib.sha256(serialize_model(model)).digest()


def deserialize_model(data: bytes) -> ToyTransformer:
    r = _Reader(data, MODEL_MAGIC)
    version, vocab, h, n_layers, q = r.unpack("HIIIB")
    _check_version(version)
    g_kind, g_value = r.unpack("BI")
    if g_kind not in (0, 1) or (g_kind == 0) != (g_value == ROW):
        raise IntegrityError(f"invalid group policy record ({g_kind}, {g_value})")
    (n_ctx,) = r.unpack("I")
    try:
        qconfig = QuantConfig(q=q, g=g_value)
    except ConfigError as exc:
        raise IntegrityError(f"invalid header: {exc}") from None
    cfg = _config_or_integrity(vocab=vocab, h=h, n_layers=n_layers, n_ctx=n_ctx, q=q, g=g_value)
    layers = []
    for _ in range(n_layers):
        per = {}
        for name, shape in layer_shapes(h).items():
            h_out, h_in, g = r.unpack("III")
            if (h_out, h_in) != shape or g != qconfig.group_size(h_in):
                raise IntegrityError(f"layer {name}: dims ({h_out}, {h_in}, g={g}) disagree with header")
            planes = [BitPlane(h_out, h_in, r.array((h_out, words_per_row(h_in)), _U64).astype(np.uint64))
                      for _ in range(q)]
            scales = [GroupedScales(r.floats((h_out, h_in // g))) for _ in range(q)]
            per[name] = BCQMatrix(h_out, h_in, qconfig, planes, scales)
        layers.append(per)
    tok_emb, pos_emb, per_block, lnf_gain, lnf_bias = _read_full_precision(r, cfg)
    r.done()
    for per in layers:
        for bq in per.values():
            if not all(p.padding_is_zero() for p in bq.planes):
                raise IntegrityError("non-zero padding bits in a bit plane")
    blocks = [Block(**{name: QuantLinear(per[name], biases[name]) for name in LINEAR_NAMES}, **norms)
              for per, (biases, norms) in zip(layers, per_block)]
    model = ToyTransformer(cfg, tok_emb, pos_emb, blocks, lnf_gain, lnf_bias, (1,))
    model.base_hash = hashlib.sha256(data).digest()
    return model


def save_model(path, model: ToyTransformer) -> bytes:
    """Write a ``BCQ1`` file and return its SHA-256."""
    data = serialize_model(model)
    _write_path(path, data)
    return hashlib.sha256(data).digest()


def load_model(path) -> ToyTransformer:
    return deserialize_model(_read_path(path))


# -- task checkpoint -------------------------------------------------------------------------

def _base_hash(model: ToyTransformer) -> bytes:
    if model.base_hash is None:
        raise CompatibilityError("model has no base hash; quantize or load it from a BCQ1 file first")
    return model.base_hash


def serialize_checkpoint(model: ToyTransformer, planes=None) -> bytes:
    planes = tuple(model.trainable_planes if planes is None else planes)
    for i in planes:
        if not 1 <= i <= model.config.q:
            raise ConfigError(f"plane {i} out of range 1..{model.config.q}")
    layers = model.linear_layers()
    w = _Writer()
    w.buf.write(CKPT_MAGIC)
    w.pack("H", VERSION)
    w.buf.write(_base_hash(model))
    w.pack("B", len(planes))
    for i in planes:
        w.pack("B", i)
    w.pack("I", len(layers))
    for _, layer in layers:
        bq = layer.weights
        w.pack("II", bq.h_out, bq.groups_per_row)
        for i in planes:
            w.array(bq.scales[i - 1].values, _F32)
    return w.finish()


def save_checkpoint(path, model: ToyTransformer, planes=None) -> None:
    _write_path(path, serialize_checkpoint(model, planes))


@dataclass
class TaskCheckpoint:
    base_hash: bytes
    planes: tuple[int, ...]
    scales: list[dict[int, np.ndarray]]  # per linear layer, plane -> (rows, groups)


def deserialize_checkpoint(data: bytes) -> TaskCheckpoint:
    r = _Reader(data, CKPT_MAGIC)
    (version,) = r.unpack("H")
    _check_version(version)
    base_hash = r.take(32)
    (n_planes,) = r.unpack("B")
    planes = tuple(r.unpack("B")[0] for _ in range(n_planes))
    (n_layers,) = r.unpack("I")
    scales = []
    for _ in range(n_layers):
        rows, groups = r.unpack("II")
        scales.append({i: r.floats((rows, groups)) for i in planes})
    r.done()
    return TaskCheckpoint(base_hash, planes, scales)


def load_checkpoint(path) -> TaskCheckpoint:
    return deserialize_checkpoint(_read_path(path))


def apply_checkpoint(model: ToyTransformer, ckpt: TaskCheckpoint | str | Path) -> ToyTransformer:
    """Overwrite the checkpoint's planes in ``model`` (in place) and return it."""
    if not isinstance(ckpt, TaskCheckpoint):
        ckpt = load_checkpoint(ckpt)
    if ckpt.base_hash != _base_hash(model):
        raise CompatibilityError("checkpoint was trained on a different base model "
                                 f"({ckpt.base_hash.hex()[:16]}... vs {model.base_hash.hex()[:16]}...)")
    layers = model.linear_layers()
    if len(ckpt.scales) != len(layers):
        raise CompatibilityError(f"checkpoint has {len(ckpt.scales)} layers, model has {len(layers)}")
    for (name, layer), per in zip(layers, ckpt.scales):
        for i, values in per.items():
            if not 1 <= i <= layer.weights.q:
                raise CompatibilityError(f"{name}: plane {i} does not exist")
            target = layer.weights.scales[i - 1].values
            if target.shape != values.shape:
                raise CompatibilityError(f"{name}: scale shape {values.shape} != {target.shape}")
    for (_, layer), per in zip(layers, ckpt.scales):
        for i, values in per.items():
            layer.weights.scales[i - 1].values[...] = values
    return model


# -- storage arithmetic ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LayerSize:
    name: str
    h_out: int
    h_in: int
    g: int
    q: int
    plane_bytes: int         # q * h_out * h_in / 8, unpadded
    plane_padding_bytes: int  # extra bytes from padding rows to 64-bit words
    scale_bytes: int         # 4 * q * h_out * h_in / g
    header_bytes: int = 12   # (h_out, h_in, g) as u32

    @property
    def total_bytes(self) -> int:
        """Unpadded planes + scales, the figure comparable to published tables."""
        return self.plane_bytes + self.scale_bytes

    @property
    def on_disk_bytes(self) -> int:
        return self.header_bytes + self.plane_bytes + self.plane_padding_bytes + self.scale_bytes

    @property
    def total_mb(self) -> float:
        return self.total_bytes / MB

    @property
    def fp32_bytes(self) -> int:
        return 4 * self.h_out * self.h_in


def layer_size(name: str, h_out: int, h_in: int, q: int, g: int) -> LayerSize:
    gs = QuantConfig(q=q, g=g).group_size(h_in)
    plane_bits = q * h_out * h_in
    padded = q * h_out * words_per_row(h_in) * 8
    return LayerSize(name, h_out, h_in, gs, q, plane_bits // 8 + (plane_bits % 8 > 0),
                     padded - (plane_bits // 8 + (plane_bits % 8 > 0)), 4 * q * h_out * (h_in // gs))


def size_report(geometry: ModelConfig, q: int, g: int = ROW) -> list[LayerSize]:
    """Per-layer storage of one transformer block."""
    try:
        return [layer_size(name, h_out, h_in, q, g) for name, (h_out, h_in) in layer_shapes(geometry.h).items()]
    except ConfigError as exc:
        raise ConfigError(f"invalid geometry for g={g}: {exc}") from None


def full_precision_bytes(geometry: ModelConfig) -> int:
    h = geometry.h
    per_block = 4 * (3 * h + h + 4 * h + h) + 4 * 4 * h
    return 4 * (geometry.vocab + geometry.n_ctx) * h + geometry.n_layers * per_block + 4 * 2 * h


def model_file_size(geometry: ModelConfig, q: int, g: int = ROW) -> int:
    """Exact byte size of the ``BCQ1`` file for this geometry."""
    header = 4 + struct.calcsize("<HIIIB") + struct.calcsize("<BI") + 4
    layers = sum(s.on_disk_bytes for s in size_report(geometry, q, g)) * geometry.n_layers
    return header + layers + full_precision_bytes(geometry) + 4


def checkpoint_file_size(geometry: ModelConfig, g: int = ROW, planes=(1,)) -> int:
    """Exact byte size of a ``BCQA`` file for this geometry."""
    header = 4 + 2 + 32 + 1 + len(planes) + 4
    n_linear = 4 * geometry.n_layers
    shapes = layer_shapes(geometry.h).values()
    resolve = QuantConfig(q=1, g=g).group_size
    scale_values = geometry.n_layers * sum(h_out * (h_in // resolve(h_in)) for h_out, h_in in shapes)
    return header + 8 * n_linear + 4 * scale_values * len(planes) + 4
