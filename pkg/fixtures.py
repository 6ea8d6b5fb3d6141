"""Named fixture networks, seeded random graphs and fixture training.

Every builder returns a `(manifest, store)` pair ready for `build_graph`.
Weights are He-normal, biases zero, BatchNorm starts as the identity.
Training hyperparameters per fixture come from csv_files/fixture_training.csv.
"""
from __future__ import annotations

import logging
import os
from typing import Callable

import numpy as np
import pandas as pd

from engine import TrainConfig, evaluate_accuracy, train_sgd
from errors import DatasetError, GraphError
from model_io import DatasetHandle, SynthSpec, TensorStore, make_rng, synth_splits
from netgraph import (
    ADD,
    AVGPOOL,
    BATCHNORM,
    BIAS,
    CONV,
    FC,
    FLATTEN,
    GLOBALPOOL,
    GROUP_MAPPINGS,
    INPUT,
    LOSS,
    MAXPOOL,
    RELU,
    NetworkGraph,
    absorb_activations,
    build_graph,
)

logger = logging.getLogger(__name__)

HERE = os.path.dirname(os.path.abspath(__file__))
TRAINING_CSV = os.path.join(HERE, 'csv_files', 'fixture_training.csv')


class ManifestBuilder:
    """Appends layers in order, tracking (channels, height, width, flat) per
    layer so that parameter tensors get their declared shapes."""

    def __init__(self, name: str, seed: int = 0):
        self.name = name
        self.rng = make_rng(seed, 3)
        self.layers: list[dict] = []
        self.store = TensorStore()
        self.shape: dict[str, tuple[int, int, int, bool]] = {}

    def _add(self, layer: dict, shape) -> str:
        self.layers.append(layer)
        self.shape[layer['id']] = shape
        return layer['id']

    def _he(self, name: str, shape: tuple[int, ...], fan_in: int):
        self.store[name] = self.rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)

    def input(self, lid: str, channels: int, height: int, width: int) -> str:
        return self._add({'id': lid, 'kind': INPUT, 'inputs': [], 'out_channels': channels,
                          'height': height, 'width': width}, (channels, height, width, False))

    def conv(self, lid: str, src: str, out: int, kernel: int = 3, stride: int = 1,
             pad: int | None = None, groups: int = 1, mapping: str = 'interleaved',
             bias: bool = False) -> str:
        c, h, w, _ = self.shape[src]
        pad = kernel // 2 if pad is None else pad
        m_in = c // groups
        params = {'weight': f'{lid}.weight'}
        self._he(params['weight'], (out, m_in, kernel, kernel), m_in * kernel * kernel)
        if bias:
            params['bias'] = f'{lid}.bias'
            self.store[params['bias']] = np.zeros(out)
        ho = (h + 2 * pad - kernel) // stride + 1
        wo = (w + 2 * pad - kernel) // stride + 1
        return self._add({'id': lid, 'kind': CONV, 'inputs': [src], 'in_channels': c,
                          'out_channels': out, 'kernel': kernel, 'stride': stride, 'pad': pad,
                          'groups': groups, 'group_mapping': mapping, 'params': params},
                         (out, ho, wo, False))

    def fc(self, lid: str, src: str, out: int, bias: bool = True) -> str:
        c, h, w, flat = self.shape[src]
        width = h * w if flat else 1
        params = {'weight': f'{lid}.weight'}
        self._he(params['weight'], (out, c * width), c * width)
        if bias:
            params['bias'] = f'{lid}.bias'
            self.store[params['bias']] = np.zeros(out)
        return self._add({'id': lid, 'kind': FC, 'inputs': [src], 'in_channels': c,
                          'out_channels': out, 'params': params}, (out, 1, 1, True))

    def bn(self, lid: str, src: str) -> str:
        c = self.shape[src][0]
        params = {role: f'{lid}.{role}' for role in ('gamma', 'beta', 'mean', 'var')}
        for role, value in (('gamma', 1.0), ('beta', 0.0), ('mean', 0.0), ('var', 1.0)):
            self.store[params[role]] = np.full(c, value)
        return self._add({'id': lid, 'kind': BATCHNORM, 'inputs': [src], 'eps': 1e-5,
                          'params': params}, self.shape[src])

    def bias(self, lid: str, src: str) -> str:
        self.store[f'{lid}.bias'] = np.zeros(self.shape[src][0])
        return self._add({'id': lid, 'kind': BIAS, 'inputs': [src],
                          'params': {'bias': f'{lid}.bias'}}, self.shape[src])

    def relu(self, lid: str, src: str) -> str:
        return self._add({'id': lid, 'kind': RELU, 'inputs': [src]}, self.shape[src])

    def pool(self, lid: str, src: str, kernel: int = 2, kind: str = MAXPOOL) -> str:
        c, h, w, _ = self.shape[src]
        return self._add({'id': lid, 'kind': kind, 'inputs': [src], 'kernel': kernel, 'stride': kernel},
                         (c, h // kernel, w // kernel, False))

    def gap(self, lid: str, src: str) -> str:
        return self._add({'id': lid, 'kind': GLOBALPOOL, 'inputs': [src]}, (self.shape[src][0], 1, 1, False))

    def flatten(self, lid: str, src: str) -> str:
        c, h, w, _ = self.shape[src]
        return self._add({'id': lid, 'kind': FLATTEN, 'inputs': [src]}, (c, h, w, True))

    def add(self, lid: str, *srcs: str) -> str:
        return self._add({'id': lid, 'kind': ADD, 'inputs': list(srcs)}, self.shape[srcs[0]])

    def loss(self, lid: str, src: str) -> str:
        return self._add({'id': lid, 'kind': LOSS, 'inputs': [src]}, self.shape[src])

    def build(self) -> tuple[dict, TensorStore]:
        return {'format': 'domino-manifest/1', 'name': self.name, 'layers': self.layers}, self.store


def linear_toy(seed: int = 0, size: int = 8) -> tuple[dict, TensorStore]:
    b = ManifestBuilder('linear-toy', seed)
    x = b.input('data', 3, size, size)
    x = b.relu('a_relu', b.bias('a_bias', b.conv('a', x, 4)))
    x = b.relu('b_relu', b.conv('b', x, 6))
    x = b.flatten('flat', b.gap('gap', x))
    b.loss('loss', b.fc('fc', x, 3))
    return b.build()


def resblock_toy(seed: int = 0, size: int = 16) -> tuple[dict, TensorStore]:
    b = ManifestBuilder('resblock-toy', seed)
    x = b.input('data', 3, size, size)
    a = b.bn('A_bn', b.conv('A', x, 24))
    s = b.bn('B_bn', b.conv('B', x, 24, kernel=1))
    x = b.pool('pool1', b.relu('add1_relu', b.add('add1', a, s)))
    c = b.relu('C_relu', b.bn('C_bn', b.conv('C', x, 48)))
    d = b.bn('D_bn', b.conv('D', c, 48))
    x = b.relu('add2_relu', b.add('add2', c, d))
    x = b.flatten('flat', b.gap('gap', x))
    b.loss('loss', b.fc('fc', x, 10))
    return b.build()


def spine_toy(seed: int = 0, size: int = 8) -> tuple[dict, TensorStore]:
    b = ManifestBuilder('spine-toy', seed)
    x = b.input('data', 3, size, size)
    s = b.relu('S_relu', b.conv('S', x, 4))
    x1 = b.conv('X1', s, 4)
    j1 = b.relu('add1_relu', b.add('add1', s, x1))
    x2 = b.conv('X2', j1, 4)
    x = b.add('add2', j1, x2)
    x = b.flatten('flat', b.gap('gap', x))
    b.loss('loss', b.fc('fc', x, 3))
    return b.build()


def grouped_toy(seed: int = 0, size: int = 16, mapping: str = 'interleaved') -> tuple[dict, TensorStore]:
    b = ManifestBuilder('grouped-toy', seed)
    x = b.input('data', 3, size, size)
    x = b.relu('P_relu', b.bn('P_bn', b.conv('P', x, 16)))
    x = b.relu('G_relu', b.bn('G_bn', b.conv('G', x, 32, groups=2, mapping=mapping)))
    x = b.pool('pool', x)
    x = b.relu('H_relu', b.conv('H', x, 32, groups=4, mapping=mapping))
    x = b.flatten('flat', b.gap('gap', x))
    b.loss('loss', b.fc('fc', x, 10))
    return b.build()


def group_pair(seed: int = 0, size: int = 8, mapping: str = 'interleaved') -> tuple[dict, TensorStore]:
    """prev (4 outputs) feeding a g=2 convolution with two slots per group."""
    b = ManifestBuilder('group-pair', seed)
    x = b.input('data', 3, size, size)
    x = b.relu('prev_relu', b.conv('prev', x, 4))
    x = b.conv('l', x, 4, groups=2, mapping=mapping)
    x = b.flatten('flat', b.gap('gap', x))
    b.loss('loss', b.fc('fc', x, 3))
    return b.build()


def mixed_toy(seed: int = 0) -> tuple[dict, TensorStore]:
    """Small net touching every layer kind, sized for finite differences."""
    b = ManifestBuilder('mixed-toy', seed)
    x = b.input('data', 2, 6, 6)
    x = b.relu('c1_relu', b.bn('c1_bn', b.conv('c1', x, 4, bias=True)))
    x = b.pool('avg', b.conv('g', x, 4, groups=2), kind=AVGPOOL)
    x = b.add('join', x, b.conv('c3', x, 4, kernel=1))
    x = b.flatten('flat', b.pool('max', x))
    b.loss('loss', b.bias('fc_bias', b.fc('fc', x, 3, bias=False)))
    return b.build()


def _activations(b: ManifestBuilder, rng: np.random.Generator, src: str, tag: str) -> str:
    ops = [op for op in ('bn', 'bias', 'relu') if rng.random() < 0.5]
    rng.shuffle(ops)
    for op in ops:
        src = getattr(b, op)(f'{tag}_{op}', src)
    return src


def random_manifest(rng: np.random.Generator, name: str = 'random') -> tuple[dict, TensorStore]:
    """3-8 weight-bearing layers with at least one join, split or grouped conv.

    Channel counts are drawn from {2, 4, 8}; groups from {2, 4} with a random
    slot mapping; zero-preserving activations are sprinkled between layers.
    """
    b = ManifestBuilder(name, int(rng.integers(2 ** 31)))
    convs = int(rng.integers(2, 8))
    forced = rng.choice(['join', 'split', 'group'])
    forced_at = int(rng.integers(1, convs)) if convs > 1 else 0
    size = int(rng.choice([6, 8]))
    x = b.input('data', int(rng.choice([2, 3, 4])), size, size)
    tensors = [x]   # candidates for splits and joins, (channels, h) read from b.shape
    for i in range(convs):
        lid = f'conv{i}'
        c = b.shape[x][0]
        want = rng.choice(['chain', 'join', 'split', 'group'], p=[0.4, 0.2, 0.2, 0.2])
        if i == forced_at:
            want = forced
        src = x
        if want == 'split' and len(tensors) > 1:
            src = tensors[int(rng.integers(len(tensors) - 1))]
            c = b.shape[src][0]
        groups = 1
        if want == 'group':
            options = [g for g in (2, 4) if c % g == 0]
            groups = int(rng.choice(options)) if options else 1
        out = int(rng.choice([o for o in (2, 4, 8) if o % groups == 0]))
        partners = [t for t in tensors[1:] if b.shape[t][1] == b.shape[src][1] and t != src]
        if want == 'join' and partners:
            partner = partners[int(rng.integers(len(partners)))]
            out = b.shape[partner][0]
        elif want == 'join':
            partner = src
            if b.shape[src][0] != out:
                out = b.shape[src][0]
            groups = 1
        else:
            partner = None
        y = b.conv(lid, src, out, kernel=int(rng.choice([1, 3])), groups=groups,
                   mapping=str(rng.choice(GROUP_MAPPINGS)), bias=bool(rng.random() < 0.3))
        y = _activations(b, rng, y, lid)
        if partner is not None:
            y = b.add(f'join{i}', partner, y)
            if rng.random() < 0.5:
                y = b.relu(f'join{i}_relu', y)
        if rng.random() < 0.15 and b.shape[y][1] >= 4 and want == 'chain':
            y = b.pool(f'pool{i}', y, kind=str(rng.choice([MAXPOOL, AVGPOOL])))
        tensors.append(y)
        x = y
    if rng.random() < 0.5:
        x = b.gap('gap', x)
    x = b.flatten('flat', x)
    x = _activations(b, rng, b.fc('fc', x, 3), 'fc')
    b.loss('loss', x)
    return b.build()


def has_coupling(graph: NetworkGraph) -> bool:
    """True when the graph holds a join, a split or a grouped convolution."""
    if graph.joins():
        return True
    if any(l.kind == CONV and l.groups > 1 for l in graph.layers):
        return True
    absorbed = absorb_activations(graph)
    return any(len(absorbed.consumers(l.id)) > 1 for l in absorbed.layers)


FIXTURES: dict[str, Callable[..., tuple[dict, TensorStore]]] = {
    'linear-toy': linear_toy,
    'resblock-toy': resblock_toy,
    'spine-toy': spine_toy,
    'grouped-toy': grouped_toy,
    'group-pair': group_pair,
    'mixed-toy': mixed_toy,
}


def build_fixture(name: str, seed: int = 0, size: int | None = None) -> tuple[NetworkGraph, TensorStore]:
    """Fixture `name` with weights drawn from `seed`; `size` overrides the
    input height and width of the global-pooling fixtures."""
    if name not in FIXTURES:
        raise GraphError(f'unknown fixture {name!r}; choose from {", ".join(FIXTURES)}')
    try:
        manifest, store = FIXTURES[name](seed) if size is None else FIXTURES[name](seed, size=size)
    except TypeError:
        raise GraphError(f'fixture {name!r} has a fixed input size') from None
    return build_graph(manifest, store), store


def load_training_table(path: str = TRAINING_CSV) -> pd.DataFrame:
    table = pd.read_csv(path)
    return table.set_index('fixture')


def training_plan(name: str, seed: int, path: str = TRAINING_CSV) -> tuple[TrainConfig, int, int]:
    """(TrainConfig, train size, test size) for a fixture."""
    table = load_training_table(path)
    if name not in table.index:
        raise DatasetError(f'no training row for fixture {name!r} in {path}')
    row = table.loc[name]
    cfg = TrainConfig(epochs=int(row['epochs']), lr=float(row['lr']), momentum=float(row['momentum']),
                      batch_size=int(row['batch_size']), weight_decay=float(row['weight_decay']),
                      seed=seed)
    return cfg, int(row['train_size']), int(row['test_size'])


def accuracy_floor(name: str, path: str = TRAINING_CSV) -> float | None:
    """Test accuracy a trained fixture must reach before it is worth pruning."""
    table = load_training_table(path)
    if name not in table.index or 'min_accuracy' not in table.columns:
        return None
    value = table.loc[name, 'min_accuracy']
    return None if pd.isna(value) else float(value)


def synth_for(graph: NetworkGraph, seed: int, train_size: int, test_size: int):
    """Synthetic splits shaped to a graph's input and class count."""
    shape = graph.shapes[graph.input_layer.id]
    classes = graph.shapes[graph.loss_layer.id].channels
    spec = SynthSpec(classes=classes, channels=shape.channels, height=shape.height,
                     width=shape.width, size=train_size)
    return synth_splits(seed, spec, test_size)


def train_fixture(name: str, seed: int, train: DatasetHandle | None = None,
                  test: DatasetHandle | None = None,
                  progress: bool = False,
                  size: int | None = None) -> tuple[NetworkGraph, TensorStore, DatasetHandle, DatasetHandle]:
    """Build fixture `name` with weights drawn from `seed` and train it from
    scratch. Without explicit splits, synthetic data from the same seed is used."""
    graph, store = build_fixture(name, seed, size)
    cfg, train_size, test_size = training_plan(name, seed)
    if train is None or test is None:
        train, test = synth_for(graph, seed, train_size, test_size)
    history = train_sgd(graph, store, train, cfg, progress=progress)
    acc = evaluate_accuracy(graph, test)
    logger.info('%s seed %d: final loss %.4f, test accuracy %.4f', name, seed, history[-1], acc)
    return graph, store, train, test
