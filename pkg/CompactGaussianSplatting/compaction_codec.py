"""
Storage pipeline for trained compact scenes.

A scene is written as a "C3GS" container: a fixed header, a JSON manifest and
a sequence of binary streams. Every stream is produced by a chain of
StreamCodec strategies (half precision, 8-bit min-max quantization, small
value pruning, canonical Huffman coding, DEFLATE) picked by the packing
level:

* ``ours``     every float stream in binary16, indices as small integers;
* ``ours_pp``  Morton-sorted Gaussians, 8-bit quantized scalars and hash
               features, pruned hash features, Huffman coded symbols and a
               DEFLATE wrapper on every stream.

Layout (little-endian)::

    b"C3GS" | u16 version | u32 manifest length | manifest JSON | streams

Stream ``i`` occupies ``aux_size + size`` bytes right after stream ``i-1``;
the optional aux part holds the survivor bitmap of pruned streams.
"""

import heapq
import json
import logging
import struct
import zlib
from abc import ABC, abstractmethod
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
import torch
from django.conf import settings

from .color_field import ColorField
from .dyn_attributes import DynGaussianSet, PhiMlp
from .exceptions import CodecError, ContainerError
from .rvq_codebook import RvqCodebook
from .scene_model import DTYPE, SH_COEFFS, ColorSource, GaussianSet
from .serializers import ManifestSerializer
from .trainer import TrainedModel

logger = logging.getLogger(__name__)

LEVELS = ('ours', 'ours_pp')
HUFFMAN_MAX_LENGTH = 16
HASH_PRUNE_THRESHOLD = 0.1
MORTON_BITS = 21
HEADER = struct.Struct('<4sHI')

# floats per Gaussian in a float32 3DGS model: 3 position, 3 scale, 4 rotation,
# 1 opacity, 48 SH
BASELINE_FLOATS_STATIC = 59
# STG-style dynamic baseline: 3 + 3 + 4 + 1 + 9 features + 9 motion + 4 + 2
BASELINE_FLOATS_DYNAMIC = 35


# -- primitives -----------------------------------------------------------------

@dataclass
class QuantSpec:
    min: float
    max: float
    bits: int = 8

    def __post_init__(self):
        if self.max < self.min:
            raise CodecError(f"Quantization range is inverted: [{self.min}, {self.max}]")

    @property
    def levels(self) -> int:
        return (1 << self.bits) - 1

    def dequantize(self, q: np.ndarray) -> np.ndarray:
        if self.max == self.min:
            return np.full(q.shape, self.min, dtype=np.float64)
        return self.min + q.astype(np.float64) * (self.max - self.min) / self.levels


def quantize_minmax(stream: np.ndarray, bits: int = 8) -> Tuple[QuantSpec, np.ndarray]:
    values = np.asarray(stream, dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise CodecError("Cannot quantize a stream with non-finite values")
    if values.size == 0:
        return QuantSpec(0.0, 0.0, bits), np.zeros(0, dtype=np.uint8)
    spec = QuantSpec(float(values.min()), float(values.max()), bits)
    if spec.max == spec.min:
        return spec, np.zeros(values.shape, dtype=np.uint8)
    q = np.rint((values - spec.min) / (spec.max - spec.min) * spec.levels)
    return spec, np.clip(q, 0, spec.levels).astype(np.uint8)


def prune_small(values: np.ndarray, threshold: float = HASH_PRUNE_THRESHOLD) -> Tuple[bytes, np.ndarray]:
    """Survivor bitmap (packed, little bit order) and the surviving values."""
    flat = np.asarray(values).reshape(-1)
    keep = np.abs(flat.astype(np.float64)) >= threshold
    return np.packbits(keep, bitorder='little').tobytes(), flat[keep]


def unprune(bitmap: bytes, survivors: np.ndarray, count: int) -> np.ndarray:
    keep = np.unpackbits(np.frombuffer(bitmap, dtype=np.uint8), count=count, bitorder='little').astype(bool)
    out = np.zeros(count, dtype=np.float64)
    out[keep] = survivors.astype(np.float64)
    return out


def _spread_bits(v: np.ndarray) -> np.ndarray:
    x = v.astype(np.uint64) & np.uint64(0x1FFFFF)
    x = (x | (x << np.uint64(32))) & np.uint64(0x1F00000000FFFF)
    x = (x | (x << np.uint64(16))) & np.uint64(0x1F0000FF0000FF)
    x = (x | (x << np.uint64(8))) & np.uint64(0x100F00F00F00F00F)
    x = (x | (x << np.uint64(4))) & np.uint64(0x10C30C30C30C30C3)
    x = (x | (x << np.uint64(2))) & np.uint64(0x1249249249249249)
    return x


def morton_keys(positions: np.ndarray) -> np.ndarray:
    """63-bit Z-order keys over the positions' bounding box, x in the lowest bit."""
    p = np.asarray(positions, dtype=np.float64)
    if p.shape[0] == 0:
        return np.zeros(0, dtype=np.uint64)
    lo = p.min(axis=0)
    extent = p.max(axis=0) - lo
    unit = np.where(extent > 0, (p - lo) / np.where(extent > 0, extent, 1.0), 0.0)
    q = np.clip(np.floor(unit * ((1 << MORTON_BITS) - 1)), 0, (1 << MORTON_BITS) - 1).astype(np.uint64)
    return _spread_bits(q[:, 0]) | (_spread_bits(q[:, 1]) << np.uint64(1)) | (_spread_bits(q[:, 2]) << np.uint64(2))


def morton_order(positions: np.ndarray) -> np.ndarray:
    return np.argsort(morton_keys(positions), kind='stable')


def morton_sort(model: TrainedModel) -> Tuple[TrainedModel, np.ndarray]:
    """Reorder Gaussians (and every codebook index stream) along the Z-curve."""
    perm = morton_order(model.gaussians.position.detach().numpy())
    index = torch.from_numpy(perm)
    books = {}
    for name, book in model.books.items():
        moved = RvqCodebook(book.dim, book.stages, book.size)
        with torch.no_grad():
            moved.codes.copy_(book.codes)
        moved.indices = book.indices[index] if book.indices is not None else None
        moved.usage = book.usage.clone()
        books[name] = moved
    return replace(model, gaussians=model.gaussians.subset(index), books=books), perm


# -- canonical Huffman ------------------------------------------------------------

def _code_lengths(freqs: Dict[int, int]) -> Dict[int, int]:
    """Unrestricted Huffman code lengths, ties broken by symbol."""
    symbols = sorted(freqs)
    if len(symbols) == 1:
        return {symbols[0]: 1}
    heap = [(freqs[sym], node, node) for node, sym in enumerate(symbols)]
    heapq.heapify(heap)
    children = []
    next_node = len(symbols)
    while len(heap) > 1:
        f1, _, a = heapq.heappop(heap)
        f2, _, b = heapq.heappop(heap)
        children.append((a, b))
        heapq.heappush(heap, (f1 + f2, next_node, next_node))
        next_node += 1
    depth = [0] * next_node
    # internal nodes were created in order, so parents come after children
    for offset in range(len(children) - 1, -1, -1):
        parent = len(symbols) + offset
        for child in children[offset]:
            depth[child] = depth[parent] + 1
    return {sym: depth[node] for node, sym in enumerate(symbols)}


def huffman_code_lengths(freqs: Dict[int, int], max_length: int = HUFFMAN_MAX_LENGTH) -> Dict[int, int]:
    """
    Huffman code lengths no longer than ``max_length``. Overlong codes are
    folded back by the length-count adjustment of JPEG Annex K.3, then the
    lengths are handed out again by descending frequency.
    """
    if len(freqs) > 1 << max_length:
        raise CodecError(f"{len(freqs)} symbols do not fit {max_length}-bit codes",
                         {'symbols': len(freqs), 'max_length': max_length})
    lengths = _code_lengths(freqs)
    longest = max(lengths.values())
    if longest <= max_length:
        return lengths

    counts = [0] * (longest + 1)
    for length in lengths.values():
        counts[length] += 1
    for i in range(longest, max_length, -1):
        while counts[i] > 0:
            j = i - 2
            while counts[j] == 0:
                j -= 1
            counts[i] -= 2
            counts[i - 1] += 1
            counts[j + 1] += 2
            counts[j] -= 1

    by_weight = sorted(freqs, key=lambda sym: (-freqs[sym], sym))
    limited = {}
    position = 0
    for length in range(1, max_length + 1):
        for sym in by_weight[position:position + counts[length]]:
            limited[sym] = length
        position += counts[length]
    return limited


def canonical_codes(lengths: Dict[int, int]) -> Dict[int, Tuple[int, int]]:
    """symbol -> (code, length), assigned in (length, symbol) order."""
    codes = {}
    code = 0
    previous = 0
    for sym, length in sorted(lengths.items(), key=lambda item: (item[1], item[0])):
        code <<= length - previous
        codes[sym] = (code, length)
        code += 1
        previous = length
    return codes


def huffman_encode(symbols: np.ndarray) -> Tuple[Dict[int, int], bytes]:
    """Canonical Huffman code-length table and MSB-first bitstream."""
    symbols = np.asarray(symbols).reshape(-1).astype(np.int64)
    if symbols.size == 0:
        return {}, b''
    if symbols.min() < 0 or symbols.max() >= 1 << 16:
        raise CodecError("Huffman symbols must lie in [0, 65535]")
    values, counts = np.unique(symbols, return_counts=True)
    lengths = huffman_code_lengths({int(v): int(c) for v, c in zip(values, counts)})
    codes = canonical_codes(lengths)

    code_of = np.zeros(int(values.max()) + 1, dtype=np.int64)
    length_of = np.zeros(int(values.max()) + 1, dtype=np.int64)
    for sym, (code, length) in codes.items():
        code_of[sym] = code
        length_of[sym] = length
    c = code_of[symbols]
    n_bits = length_of[symbols]
    ends = np.cumsum(n_bits)
    starts = ends - n_bits
    bits = np.zeros(int(ends[-1]), dtype=np.uint8)
    for j in range(int(n_bits.max())):
        sel = n_bits > j
        bits[starts[sel] + j] = (c[sel] >> (n_bits[sel] - 1 - j)) & 1
    return lengths, np.packbits(bits).tobytes()


def huffman_decode(lengths: Dict[int, int], bitstream: bytes, count: int) -> np.ndarray:
    if count == 0:
        return np.zeros(0, dtype=np.int64)
    codes = canonical_codes(lengths)
    width = max(lengths.values())
    lut_symbol = np.zeros(1 << width, dtype=np.int64)
    lut_length = np.zeros(1 << width, dtype=np.int64)
    for sym, (code, length) in codes.items():
        start = code << (width - length)
        lut_symbol[start:start + (1 << (width - length))] = sym
        lut_length[start:start + (1 << (width - length))] = length

    bits = np.unpackbits(np.frombuffer(bitstream, dtype=np.uint8)).astype(np.int64)
    padded = np.concatenate([bits, np.zeros(width, dtype=np.int64)])
    windows = np.zeros(bits.size, dtype=np.int64)
    for j in range(width):
        windows = (windows << 1) | padded[j:j + bits.size]

    windows = windows.tolist()
    table_symbol = lut_symbol.tolist()
    table_length = lut_length.tolist()
    out = []
    pos = 0
    try:
        for _ in range(count):
            v = windows[pos]
            out.append(table_symbol[v])
            pos += table_length[v]
    except IndexError as exc:
        raise CodecError("Huffman bitstream ended early") from exc
    return np.asarray(out, dtype=np.int64)


_TABLE_ENTRY = np.dtype([('symbol', '<u2'), ('length', 'u1')])


def pack_huffman(symbols: np.ndarray) -> bytes:
    """Self-describing Huffman payload: u32 count, u32 entries, table, bits."""
    symbols = np.asarray(symbols).reshape(-1)
    lengths, bitstream = huffman_encode(symbols)
    table = np.zeros(len(lengths), dtype=_TABLE_ENTRY)
    for i, sym in enumerate(sorted(lengths)):
        table[i] = (sym, lengths[sym])
    return struct.pack('<II', symbols.size, len(lengths)) + table.tobytes() + bitstream


def unpack_huffman(payload: bytes) -> np.ndarray:
    if len(payload) < 8:
        raise CodecError("Huffman payload is truncated")
    count, entries = struct.unpack_from('<II', payload)
    table_end = 8 + entries * _TABLE_ENTRY.itemsize
    if len(payload) < table_end:
        raise CodecError("Huffman table is truncated")
    table = np.frombuffer(payload[8:table_end], dtype=_TABLE_ENTRY)
    lengths = {int(row['symbol']): int(row['length']) for row in table}
    return huffman_decode(lengths, payload[table_end:], count)


def deflate_wrap(payload: bytes) -> bytes:
    """A single raw DEFLATE member (RFC 1951, no zlib header) at level 9."""
    compressor = zlib.compressobj(9, zlib.DEFLATED, -15)
    return compressor.compress(payload) + compressor.flush()


def deflate_unwrap(payload: bytes) -> bytes:
    inflater = zlib.decompressobj(-15)
    try:
        data = inflater.decompress(payload) + inflater.flush()
    except zlib.error as exc:
        raise CodecError(f"Corrupt DEFLATE payload: {exc}") from exc
    if not inflater.eof:
        raise CodecError("DEFLATE payload ended before its final block")
    if inflater.unused_data:
        raise CodecError(f"{len(inflater.unused_data)} stray bytes after the DEFLATE member")
    return data


# -- stream codecs ----------------------------------------------------------------

class StreamCodec(ABC):
    """
    Strategy: one reversible stage of a stream's codec chain. ``meta`` is the
    stage's manifest record; an ``aux`` entry holds side bytes.
    """
    name = ''

    @abstractmethod
    def encode(self, data: np.ndarray, meta: Dict[str, Any]) -> np.ndarray:
        pass

    @abstractmethod
    def decode(self, data: np.ndarray, meta: Dict[str, Any]) -> np.ndarray:
        pass


class HalfCodec(StreamCodec):
    name = 'half'

    def encode(self, data, meta):
        return np.asarray(data, dtype=np.float64).astype('<f2')

    def decode(self, data, meta):
        return data.astype(np.float64)


class FloatCodec(StreamCodec):
    name = 'float'

    def encode(self, data, meta):
        return np.asarray(data, dtype=np.float64).astype('<f4')

    def decode(self, data, meta):
        return data.astype(np.float64)


class IndexCodec(StreamCodec):
    name = 'index'

    def encode(self, data, meta):
        data = np.asarray(data, dtype=np.int64)
        dtype = 'u1' if data.size == 0 or data.max() < 256 else '<u2'
        return data.astype(dtype)

    def decode(self, data, meta):
        return data.astype(np.int64)


class MinMax8Codec(StreamCodec):
    name = 'minmax8'

    def encode(self, data, meta):
        spec, q = quantize_minmax(np.asarray(data, dtype=np.float64))
        meta['min'] = spec.min
        meta['max'] = spec.max
        return q

    def decode(self, data, meta):
        return QuantSpec(meta['min'], meta['max']).dequantize(data)


class PruneCodec(StreamCodec):
    name = 'prune'

    def encode(self, data, meta):
        flat = np.asarray(data).reshape(-1)
        bitmap, survivors = prune_small(flat, meta.setdefault('threshold', HASH_PRUNE_THRESHOLD))
        meta['count'] = int(flat.size)
        meta['aux'] = bitmap
        return survivors

    def decode(self, data, meta):
        return unprune(meta['aux'], data, meta['count'])


class HuffmanCodec(StreamCodec):
    name = 'huffman'

    def encode(self, data, meta):
        return np.frombuffer(pack_huffman(data), dtype=np.uint8)

    def decode(self, data, meta):
        return unpack_huffman(data.tobytes())


class DeflateCodec(StreamCodec):
    name = 'deflate'

    def encode(self, data, meta):
        meta['dtype'] = data.dtype.str
        return np.frombuffer(deflate_wrap(np.ascontiguousarray(data).tobytes()), dtype=np.uint8)

    def decode(self, data, meta):
        return np.frombuffer(deflate_unwrap(data.tobytes()), dtype=np.dtype(meta['dtype']))


class StreamCodecFactory:
    """
    Factory: codec strategies by name
    """

    _codecs = {
        'half': HalfCodec,
        'float': FloatCodec,
        'index': IndexCodec,
        'minmax8': MinMax8Codec,
        'prune': PruneCodec,
        'huffman': HuffmanCodec,
        'deflate': DeflateCodec,
    }

    @classmethod
    def create_codec(cls, name: str) -> StreamCodec:
        if name not in cls._codecs:
            raise CodecError(f"Unsupported stream codec: {name}")
        return cls._codecs[name]()

    @classmethod
    def get_available_codecs(cls) -> List[str]:
        return list(cls._codecs.keys())

    @classmethod
    def register_codec(cls, name: str, codec_class: type):
        cls._codecs[name] = codec_class


def encode_stream(values: np.ndarray, chain: List[str]) -> Tuple[List[Dict[str, Any]], bytes, bytes]:
    """Run a codec chain; returns (stage records, aux bytes, payload)."""
    data = np.asarray(values)
    stages = []
    aux = b''
    for name in chain:
        meta = {'codec': name}
        data = StreamCodecFactory.create_codec(name).encode(data, meta)
        aux += meta.pop('aux', b'')
        stages.append(meta)
    stages.append({'stored_dtype': data.dtype.str})
    return stages, aux, np.ascontiguousarray(data).tobytes()


def decode_stream(stages: List[Dict[str, Any]], aux: bytes, payload: bytes) -> np.ndarray:
    data = np.frombuffer(payload, dtype=np.dtype(stages[-1]['stored_dtype']))
    for meta in reversed(stages[:-1]):
        if meta['codec'] == 'prune':
            meta = {**meta, 'aux': aux}
        data = StreamCodecFactory.create_codec(meta['codec']).decode(data, meta)
    return data


# -- size accounting ----------------------------------------------------------------

class PackingObserver(ABC):
    """
    Observer: notified for every stream written to a container
    """

    @abstractmethod
    def on_stream_packed(self, stream: Dict[str, Any]):
        pass


class SizeAccountingObserver(PackingObserver):
    """
    Observer Implementation: bytes per Gaussian attribute
    """

    def __init__(self):
        self.sizes: Dict[str, int] = {}

    def on_stream_packed(self, stream: Dict[str, Any]):
        total = stream['size'] + stream['aux_size']
        self.sizes[stream['attribute']] = self.sizes.get(stream['attribute'], 0) + total
        logger.info(f"Packed stream {stream['name']}: {total} bytes")

    def get_stats(self) -> Dict[str, int]:
        return dict(self.sizes)


# -- container ------------------------------------------------------------------------

@dataclass
class CompactContainer:
    manifest: Dict[str, Any]
    streams: List[Tuple[bytes, bytes]] = field(default_factory=list)

    @property
    def header_size(self) -> int:
        return HEADER.size + len(self._manifest_bytes())

    def _manifest_bytes(self) -> bytes:
        return json.dumps(self.manifest, sort_keys=True, separators=(',', ':')).encode('utf-8')

    def to_bytes(self) -> bytes:
        options = settings.COMPACT_GS
        manifest = self._manifest_bytes()
        parts = [HEADER.pack(options['CONTAINER_MAGIC'], options['CONTAINER_VERSION'], len(manifest)), manifest]
        for aux, payload in self.streams:
            parts.append(aux)
            parts.append(payload)
        return b''.join(parts)

    @classmethod
    def from_bytes(cls, blob: bytes) -> 'CompactContainer':
        options = settings.COMPACT_GS
        if len(blob) < HEADER.size:
            raise ContainerError("Container is shorter than its header")
        magic, version, manifest_size = HEADER.unpack_from(blob)
        if magic != options['CONTAINER_MAGIC']:
            raise ContainerError(f"Bad container magic {magic!r}")
        if version != options['CONTAINER_VERSION']:
            raise ContainerError(f"Unsupported container version {version}",
                                 {'expected': options['CONTAINER_VERSION'], 'found': version})
        start = HEADER.size + manifest_size
        try:
            manifest = json.loads(blob[HEADER.size:start].decode('utf-8'))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ContainerError(f"Unreadable manifest: {exc}") from exc
        serializer = ManifestSerializer(data=manifest)
        if not serializer.is_valid():
            raise ContainerError("Invalid container manifest", {'errors': serializer.errors})
        if manifest['version'] != version:
            raise ContainerError("Manifest version does not match header",
                                 {'header': version, 'manifest': manifest['version']})
        streams = []
        offset = start
        for record in manifest['streams']:
            aux_end = offset + record['aux_size']
            end = aux_end + record['size']
            streams.append((blob[offset:aux_end], blob[aux_end:end]))
            offset = end
        if offset != len(blob):
            raise ContainerError("Stream sizes do not match container size",
                                 {'expected': offset, 'actual': len(blob)})
        return cls(manifest=manifest, streams=streams)

    def size_by_attribute(self) -> Dict[str, int]:
        sizes: Dict[str, int] = {}
        for record in self.manifest['streams']:
            sizes[record['attribute']] = sizes.get(record['attribute'], 0) + record['size'] + record['aux_size']
        return sizes


def write_container(container: CompactContainer, path: Union[str, Path]) -> int:
    blob = container.to_bytes()
    Path(path).write_bytes(blob)
    logger.info(f"Wrote {len(blob)} byte container to {path}")
    return len(blob)


def read_container(path: Union[str, Path]) -> CompactContainer:
    return CompactContainer.from_bytes(Path(path).read_bytes())


# -- pack / unpack ----------------------------------------------------------------------

def _np(t: torch.Tensor) -> np.ndarray:
    return t.detach().cpu().numpy().astype(np.float64)


def _module_vector(module: torch.nn.Module) -> np.ndarray:
    return np.concatenate([_np(p).reshape(-1) for p in module.parameters()])


def _load_module_vector(module: torch.nn.Module, values: np.ndarray) -> None:
    offset = 0
    with torch.no_grad():
        for p in module.parameters():
            n = p.numel()
            p.copy_(torch.from_numpy(values[offset:offset + n].reshape(tuple(p.shape))))
            offset += n
    module.requires_grad_(False)


class ContainerWriter:
    """Collects streams for one container and notifies packing observers."""

    def __init__(self, level: str, half_precision: bool = True):
        if level not in LEVELS:
            raise CodecError(f"Unknown packing level {level}")
        self.level = level
        self.float_codec = 'half' if half_precision else 'float'
        self.records: List[Dict[str, Any]] = []
        self.payloads: List[Tuple[bytes, bytes]] = []
        self._observers: List[PackingObserver] = []

    def add_observer(self, observer: PackingObserver):
        self._observers.append(observer)

    def _chain(self, kind: str) -> List[str]:
        pp = self.level == 'ours_pp'
        chains = {
            'float': [self.float_codec],
            'scalar': [self.float_codec, 'minmax8', 'huffman'] if pp else [self.float_codec],
            'index': ['index', 'huffman'] if pp else ['index'],
            'hash': [self.float_codec, 'prune', 'minmax8', 'huffman'] if pp else [self.float_codec],
        }
        chain = chains[kind]
        return chain + ['deflate'] if pp else chain

    def add(self, name: str, attribute: str, kind: str, values: np.ndarray) -> None:
        values = np.asarray(values)
        stages, aux, payload = encode_stream(values.reshape(-1), self._chain(kind))
        record = {
            'name': name,
            'attribute': attribute,
            'shape': list(values.shape),
            'stages': stages,
            'aux_size': len(aux),
            'size': len(payload),
        }
        self.records.append(record)
        self.payloads.append((aux, payload))
        for observer in self._observers:
            observer.on_stream_packed(record)


def pack(model: TrainedModel, level: str = 'ours', half_precision: bool = True,
         observer: Optional[PackingObserver] = None) -> CompactContainer:
    """Serialize a trained (pruned) model; masks are never stored."""
    writer = ContainerWriter(level, half_precision)
    if observer is not None:
        writer.add_observer(observer)
    if level == 'ours_pp':
        model, _ = morton_sort(model)
    g = model.gaussians
    dynamic = model.mode == 'dynamic'

    writer.add('position', 'position', 'float', _np(g.position))
    writer.add('opacity', 'opacity', 'scalar', _np(g.opacity))
    if dynamic:
        writer.add('t_center', 'temporal', 'scalar', _np(g.t_center))
        writer.add('log_t_scale', 'temporal', 'scalar', _np(g.log_t_scale))
        writer.add('motion', 'temporal', 'float', _np(g.motion))

    raw = {
        'scale': _np(g.log_scale),
        'rotation': _np(g.rotation),
    }
    if dynamic:
        raw['rotation_coeffs'] = _np(g.rotation_motion).reshape(-1, 4)
        raw['temporal_color'] = _np(g.features[:, -3:])
    attribute_of = {'scale': 'scale', 'rotation': 'rotation',
                    'rotation_coeffs': 'temporal', 'temporal_color': 'color'}
    for name, values in raw.items():
        book = model.books.get(name)
        if book is not None and book.indices is not None and book.indices.shape[0] == g.count:
            writer.add(f'{name}_indices', attribute_of[name], 'index', book.indices.numpy())
            writer.add(f'{name}_codebook', attribute_of[name], 'float', _np(book.codes))
        else:
            writer.add(name, attribute_of[name], 'float', values)

    if dynamic and not g.uses_field_features:
        writer.add('features', 'color', 'float', _np(g.features[:, :6]))
    if not dynamic and model.field is None:
        writer.add('sh', 'color', 'float', _np(g.sh))
    if model.field is not None:
        writer.add('field_hash', 'field_hash', 'hash', _np(model.field.table))
        writer.add('field_mlp', 'field_mlp', 'float', _module_vector(model.field.mlp))
    if model.phi is not None:
        writer.add('phi', 'phi', 'float', _module_vector(model.phi))

    background = model.background.tolist() if model.background is not None else None
    manifest = {
        'version': settings.COMPACT_GS['CONTAINER_VERSION'],
        'mode': model.mode,
        'level': level,
        'count': g.count,
        'background': background,
        'codebooks': {name: {'dim': b.dim, 'stages': b.stages, 'size': b.size}
                      for name, b in model.books.items()
                      if b.indices is not None and b.indices.shape[0] == g.count},
        'field': model.field.config() if model.field is not None else None,
        'phi': {'hidden': model.phi.hidden, 'layers': model.phi.layers} if model.phi is not None else None,
        'streams': writer.records,
    }
    logger.info(f"Packed {g.count} Gaussians at level {level}")
    return CompactContainer(manifest=manifest, streams=writer.payloads)


def unpack(container: CompactContainer) -> TrainedModel:
    manifest = container.manifest
    if manifest.get('version') != settings.COMPACT_GS['CONTAINER_VERSION']:
        raise ContainerError(f"Unsupported manifest version {manifest.get('version')}")
    arrays = {}
    for record, (aux, payload) in zip(manifest['streams'], container.streams):
        arrays[record['name']] = decode_stream(record['stages'], aux, payload).reshape(record['shape'])
    n = manifest['count']

    def tensor(name):
        return torch.from_numpy(np.array(arrays[name], dtype=np.float64))

    books = {}
    values = {}
    for name, shape in manifest['codebooks'].items():
        book = RvqCodebook(shape['dim'], shape['stages'], shape['size'])
        with torch.no_grad():
            book.codes.copy_(tensor(f'{name}_codebook'))
        book.requires_grad_(False)
        indices = torch.from_numpy(np.array(arrays[f'{name}_indices'], dtype=np.int64)).reshape(n, shape['stages'])
        book.indices = indices
        book.usage = torch.stack([torch.bincount(indices[:, s], minlength=book.size)
                                  for s in range(book.stages)])
        values[name] = book.reconstruct(indices).detach()
        books[name] = book
    for name in ('scale', 'rotation', 'rotation_coeffs', 'temporal_color'):
        if name not in values and name in arrays:
            values[name] = tensor(name)

    field_model = None
    if manifest['field'] is not None:
        field_model = ColorField(**manifest['field'])
        with torch.no_grad():
            field_model.table.copy_(tensor('field_hash').reshape(field_model.table.shape))
        _load_module_vector(field_model.mlp, arrays['field_mlp'])

    opacity = tensor('opacity').clamp(0.0, 1.0)
    if manifest['mode'] == 'dynamic':
        phi = PhiMlp(**manifest['phi'])
        _load_module_vector(phi, arrays['phi'])
        temporal = values['temporal_color'].reshape(n, 3)
        features = temporal if field_model is not None else torch.cat([tensor('features').reshape(n, 6), temporal], 1)
        gaussians = DynGaussianSet(
            position=tensor('position').reshape(n, 3),
            rotation=values['rotation'].reshape(n, 4),
            log_scale=values['scale'].reshape(n, 3),
            opacity_logit=torch.logit(opacity).reshape(n),
            features=features,
            motion=tensor('motion').reshape(n, 3, 3),
            rotation_motion=values['rotation_coeffs'].reshape(n, 1, 4),
            t_center=tensor('t_center').reshape(n),
            log_t_scale=tensor('log_t_scale').reshape(n),
        )
    else:
        phi = None
        gaussians = GaussianSet(
            position=tensor('position').reshape(n, 3),
            opacity_logit=torch.logit(opacity).reshape(n),
            log_scale=values['scale'].reshape(n, 3),
            rotation=values['rotation'].reshape(n, 4),
            sh=tensor('sh').reshape(n, SH_COEFFS, 3) if 'sh' in arrays else None,
            color_source=ColorSource.SH if 'sh' in arrays else ColorSource.FIELD,
        )
    background = manifest.get('background')
    logger.info(f"Unpacked {n} Gaussians from a {manifest['level']} container")
    return TrainedModel(
        mode=manifest['mode'], gaussians=gaussians, field=field_model, phi=phi, books=books,
        background=torch.as_tensor(background, dtype=DTYPE) if background is not None else None,
    )


# -- storage report ----------------------------------------------------------------------

def baseline_bytes(count: int, mode: str = 'static') -> int:
    floats = BASELINE_FLOATS_DYNAMIC if mode == 'dynamic' else BASELINE_FLOATS_STATIC
    return 4 * floats * count


def storage_report(container: CompactContainer) -> Dict[str, Any]:
    """Bytes per attribute next to the float32 baseline for the same count."""
    sizes = container.size_by_attribute()
    blob_size = len(container.to_bytes())
    n = container.manifest['count']
    mode = container.manifest['mode']
    return {
        'level': container.manifest['level'],
        'mode': mode,
        'count': n,
        'header': container.header_size,
        'attributes': sizes,
        'streams_total': sum(sizes.values()),
        'total': blob_size,
        'baseline': baseline_bytes(n, mode),
        'baseline_per_attribute': baseline_attribute_bytes(n, mode),
    }


def baseline_attribute_bytes(count: int, mode: str = 'static') -> Dict[str, int]:
    floats = {'position': 3, 'scale': 3, 'rotation': 4, 'opacity': 1}
    if mode == 'dynamic':
        floats.update({'color': 9, 'temporal': 15})
    else:
        floats['color'] = 48
    return {name: 4 * n * count for name, n in floats.items()}
