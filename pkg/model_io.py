"""Model manifest + tensor blob formats, dataset loaders and synthetic data.

Blob layout (all integers little-endian):

    b"DPT1" | u32 record count
    per record: u16 name length | name (UTF-8) | u8 ndim | ndim x u32 dims
                | u64 offset | u64 byte length
    zero padding up to a multiple of 8
    payload: float32 LE records, each at an 8-byte aligned offset

The manifest is JSON written with sorted keys, so saving a loaded model
reproduces both files byte for byte.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import struct
from collections.abc import MutableMapping
from dataclasses import dataclass, replace
from typing import Iterator, Mapping

import numpy as np

from errors import (
    BadRecordSize,
    ChecksumMismatch,
    DatasetError,
    IoError,
    MissingFile,
    ParseError,
)
from netgraph import NetworkGraph, build_graph

logger = logging.getLogger(__name__)

MAGIC = b'DPT1'
DTYPE = '<f4'
RNG_NAME = 'numpy.PCG64'

CIFAR_RECORD = 1 + 3 * 32 * 32
CIFAR_TRAIN_FILES = [f'data_batch_{i}.bin' for i in range(1, 6)]
CIFAR_TEST_FILES = ['test_batch.bin']


def make_rng(*seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(list(seed)))


@dataclass(frozen=True)
class TensorRecord:
    dtype: str
    shape: tuple[int, ...]
    offset: int
    length: int


def _align8(n: int) -> int:
    return (n + 7) & ~7


class TensorStore(MutableMapping):
    """Named float32 tensors, kept in insertion order."""

    def __init__(self, arrays: Mapping[str, np.ndarray] | None = None):
        self._arrays: dict[str, np.ndarray] = {}
        self.sha256: str | None = None
        for name, arr in (arrays or {}).items():
            self[name] = arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self._arrays[name]

    def __setitem__(self, name: str, arr) -> None:
        self._arrays[name] = np.array(arr, dtype=np.float32, order='C')

    def __delitem__(self, name: str) -> None:
        del self._arrays[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._arrays)

    def __len__(self) -> int:
        return len(self._arrays)

    def shape(self, name: str) -> tuple[int, ...]:
        return self._arrays[name].shape

    def copy(self) -> 'TensorStore':
        dup = TensorStore({k: v.copy() for k, v in self._arrays.items()})
        dup.sha256 = self.sha256
        return dup

    @property
    def index(self) -> dict[str, TensorRecord]:
        out, offset = {}, 0
        for name, arr in self._arrays.items():
            out[name] = TensorRecord(DTYPE, arr.shape, offset, arr.nbytes)
            offset = _align8(offset + arr.nbytes)
        return out

    def to_bytes(self) -> bytes:
        index = self.index
        head = [MAGIC, struct.pack('<I', len(index))]
        for name, rec in index.items():
            raw = name.encode('utf-8')
            head.append(struct.pack('<H', len(raw)) + raw)
            head.append(struct.pack('<B', len(rec.shape)))
            head.append(struct.pack(f'<{len(rec.shape)}I', *rec.shape))
            head.append(struct.pack('<QQ', rec.offset, rec.length))
        header = b''.join(head)
        header += b'\0' * (_align8(len(header)) - len(header))
        payload = bytearray()
        for name, rec in index.items():
            payload += b'\0' * (rec.offset - len(payload))
            payload += self._arrays[name].astype(DTYPE).tobytes()
        payload += b'\0' * (_align8(len(payload)) - len(payload))
        return header + bytes(payload)

    @classmethod
    def from_bytes(cls, data: bytes) -> 'TensorStore':
        try:
            if data[:4] != MAGIC:
                raise ParseError('blob does not start with DPT1 magic')
            (count,), pos = struct.unpack_from('<I', data, 4), 8
            records = []
            for _ in range(count):
                (nlen,) = struct.unpack_from('<H', data, pos)
                name = data[pos + 2:pos + 2 + nlen].decode('utf-8')
                pos += 2 + nlen
                (ndim,) = struct.unpack_from('<B', data, pos)
                shape = struct.unpack_from(f'<{ndim}I', data, pos + 1)
                pos += 1 + 4 * ndim
                offset, length = struct.unpack_from('<QQ', data, pos)
                pos += 16
                records.append((name, TensorRecord(DTYPE, tuple(shape), offset, length)))
        except struct.error as e:
            raise ChecksumMismatch(f'blob header truncated: {e}') from e
        base = _align8(pos)
        store = cls()
        for name, rec in records:
            start = base + rec.offset
            if rec.offset % 8 or start + rec.length > len(data):
                raise ChecksumMismatch(f'record {name!r} lies outside the blob payload')
            if rec.length != 4 * int(np.prod(rec.shape, dtype=np.int64)):
                raise ParseError(f'record {name!r}: byte length does not match shape {rec.shape}')
            arr = np.frombuffer(data, dtype=DTYPE, count=rec.length // 4, offset=start)
            store[name] = arr.reshape(rec.shape)
        return store


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _read_bytes(path: str) -> bytes:
    if not os.path.exists(path):
        raise MissingFile(path)
    with open(path, 'rb') as fh:
        return fh.read()


def load_manifest(path: str) -> dict:
    try:
        with open(path, 'r', encoding='utf-8') as fh:
            manifest = json.load(fh)
    except FileNotFoundError as e:
        raise MissingFile(path) from e
    except json.JSONDecodeError as e:
        raise ParseError(f'{path}: {e}') from e
    if not isinstance(manifest, dict) or not isinstance(manifest.get('layers'), list):
        raise ParseError(f'{path}: manifest needs a "layers" list')
    for i, layer in enumerate(manifest['layers']):
        if not isinstance(layer, dict) or 'id' not in layer or 'kind' not in layer:
            raise ParseError(f'{path}: layer #{i} needs "id" and "kind"')
    return manifest


def override_group_mapping(manifest: dict, mapping: str) -> dict:
    out = dict(manifest)
    out['layers'] = [dict(l, group_mapping=mapping) if l.get('kind') == 'Conv2D' else l
                     for l in manifest['layers']]
    return out


def load_model(manifest_path: str, blob_path: str,
               group_mapping: str | None = None) -> tuple[NetworkGraph, TensorStore]:
    manifest = load_manifest(manifest_path)
    data = _read_bytes(blob_path)
    digest = sha256_bytes(data)
    expected = manifest.get('blob_sha256')
    if expected and expected != digest:
        raise ChecksumMismatch(f'{blob_path}: sha256 {digest[:12]}... does not match manifest {expected[:12]}...')
    store = TensorStore.from_bytes(data)
    store.sha256 = digest
    if group_mapping:
        manifest = override_group_mapping(manifest, group_mapping)
    graph = build_graph(manifest, store)
    logger.info('loaded %s: %d layers, %d tensors', manifest_path, len(graph), len(store))
    return graph, store


def save_model(graph: NetworkGraph, store: TensorStore, manifest_path: str, blob_path: str) -> str:
    data = store.to_bytes()
    digest = sha256_bytes(data)
    manifest = graph.to_manifest()
    manifest['blob_sha256'] = digest
    try:
        for path in (manifest_path, blob_path):
            folder = os.path.dirname(os.path.abspath(path))
            os.makedirs(folder, exist_ok=True)
        with open(blob_path, 'wb') as fh:
            fh.write(data)
        with open(manifest_path, 'w', encoding='utf-8', newline='\n') as fh:
            fh.write(json.dumps(manifest, sort_keys=True, indent=2) + '\n')
    except OSError as e:
        raise IoError(str(e)) from e
    store.sha256 = digest
    return digest


@dataclass
class DatasetHandle:
    images: np.ndarray          # N x C x H x W, float32 in [0, 1]
    labels: np.ndarray          # N, int64
    split: str
    num_classes: int

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DatasetError(f'{len(self.images)} images but {len(self.labels)} labels')
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DatasetError(f'labels outside [0, {self.num_classes})')

    def __len__(self):
        return len(self.labels)

    def batches(self, batch_size: int) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        for start in range(0, len(self), batch_size):
            yield self.images[start:start + batch_size], self.labels[start:start + batch_size]

    def sample(self, n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
        """A fixed random subset of at most n items."""
        n = min(n, len(self))
        idx = np.sort(make_rng(seed, 17).choice(len(self), size=n, replace=False))
        return self.images[idx], self.labels[idx]

    def truncate(self, n: int | None) -> 'DatasetHandle':
        if n is None:
            return self
        return DatasetHandle(self.images[:n], self.labels[:n], self.split, self.num_classes)


def _read_cifar_file(path: str) -> tuple[np.ndarray, np.ndarray]:
    raw = np.frombuffer(_read_bytes(path), dtype=np.uint8)
    if raw.size % CIFAR_RECORD:
        raise BadRecordSize(f'{path}: {raw.size} bytes is not a multiple of {CIFAR_RECORD}')
    records = raw.reshape(-1, CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64)
    images = (records[:, 1:].reshape(-1, 3, 32, 32) / np.float32(255.0)).astype(np.float32)
    return images, labels


def _read_cifar_split(directory: str, files: list[str], split: str, limit: int | None) -> DatasetHandle:
    images, labels, total = [], [], 0
    for name in files:
        if limit is not None and total >= limit:
            break
        x, y = _read_cifar_file(os.path.join(directory, name))
        images.append(x)
        labels.append(y)
        total += len(y)
    ds = DatasetHandle(np.concatenate(images), np.concatenate(labels), split, 10)
    return ds.truncate(limit)


def load_cifar10(directory: str, subset: int | None = None,
                 test_subset: int | None = None) -> tuple[DatasetHandle, DatasetHandle]:
    """CIFAR-10 binary version; `subset` keeps the first N training records
    of the concatenated batches, `test_subset` the first N test records."""
    for name in CIFAR_TRAIN_FILES + CIFAR_TEST_FILES:
        if not os.path.exists(os.path.join(directory, name)):
            raise MissingFile(os.path.join(directory, name))
    train = _read_cifar_split(directory, CIFAR_TRAIN_FILES, 'train', subset)
    test = _read_cifar_split(directory, CIFAR_TEST_FILES, 'test', test_subset)
    logger.info('CIFAR-10 from %s: %d train, %d test', directory, len(train), len(test))
    return train, test


@dataclass(frozen=True)
class SynthSpec:
    classes: int = 10
    channels: int = 3
    height: int = 16
    width: int = 16
    size: int = 1000
    blobs: int = 3
    noise: float = 0.1
    shift: int = 2


def _prototypes(seed: int, spec: SynthSpec) -> np.ndarray:
    rng = make_rng(seed, 0)
    yy, xx = np.mgrid[0:spec.height, 0:spec.width].astype(np.float64)
    protos = np.zeros((spec.classes, spec.channels, spec.height, spec.width))
    for c in range(spec.classes):
        for _ in range(spec.blobs):
            cy, cx = rng.uniform(0, spec.height), rng.uniform(0, spec.width)
            sigma = rng.uniform(1.5, max(2.0, 0.3 * max(spec.height, spec.width)))
            amp = rng.uniform(0.0, 1.0, size=spec.channels)
            bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))
            protos[c] += amp[:, None, None] * bump
    return np.clip(protos, 0.0, 1.0)


def synth_dataset(seed: int, spec: SynthSpec = SynthSpec(), split: str = 'train') -> DatasetHandle:
    """Gaussian class blobs rendered as images, bit-identical for a given seed.
    Train and test splits of one seed share class prototypes."""
    if spec.classes <= 0:
        raise DatasetError('synthetic dataset needs at least one class')
    if spec.size <= 0:
        raise DatasetError('synthetic dataset needs a positive size')
    protos = _prototypes(seed, spec)
    rng = make_rng(seed, 1 if split == 'train' else 2)
    labels = rng.integers(0, spec.classes, size=spec.size)
    contrast = rng.uniform(0.8, 1.2, size=spec.size)
    shifts = rng.integers(-spec.shift, spec.shift + 1, size=(spec.size, 2))
    noise = rng.normal(0.0, spec.noise, size=(spec.size, spec.channels, spec.height, spec.width))
    images = np.empty((spec.size, spec.channels, spec.height, spec.width))
    for n in range(spec.size):
        img = np.roll(protos[labels[n]], tuple(shifts[n]), axis=(1, 2))
        images[n] = contrast[n] * img + noise[n]
    images = np.clip(images, 0.0, 1.0).astype(np.float32)
    return DatasetHandle(images, labels.astype(np.int64), split, spec.classes)


def synth_splits(seed: int, spec: SynthSpec = SynthSpec(),
                 test_size: int | None = None) -> tuple[DatasetHandle, DatasetHandle]:
    test_spec = spec if test_size is None else replace(spec, size=test_size)
    return synth_dataset(seed, spec, 'train'), synth_dataset(seed, test_spec, 'test')
