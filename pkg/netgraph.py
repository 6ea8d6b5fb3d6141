"""In-memory dataflow graph of a convolutional network.

A network is a DAG of `LayerNode`s drawn from a closed set of kinds.
`build_graph` validates a manifest against a tensor store and infers every
layer's output shape; `absorb_activations` collapses the zero-preserving
activation chains so that only weight-bearing layers, joins, the input and
the loss remain connected, registering per-channel bias parameters against
the producer they follow.
"""
from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING, Any, Iterable, Mapping

import numpy as np
from toposort import CircularDependencyError, toposort

from errors import (
    CycleDetected,
    DanglingTensorRef,
    GraphError,
    JoinArityMismatch,
    ShapeMismatch,
    UnsupportedActivation,
    UnsupportedLayer,
)

if TYPE_CHECKING:
    from model_io import TensorStore

logger = logging.getLogger(__name__)

INPUT = 'Input'
CONV = 'Conv2D'
FC = 'FullyConnected'
ADD = 'EltwiseAdd'
RELU = 'ReLU'
BATCHNORM = 'BatchNorm'
BIAS = 'Bias'
MAXPOOL = 'MaxPool'
AVGPOOL = 'AvgPool'
GLOBALPOOL = 'GlobalAvgPool'
FLATTEN = 'Flatten'
LOSS = 'SoftmaxLoss'

KINDS = (INPUT, CONV, FC, ADD, RELU, BATCHNORM, BIAS, MAXPOOL, AVGPOOL,
         GLOBALPOOL, FLATTEN, LOSS)
WEIGHTED = (CONV, FC)
STRUCTURAL = (INPUT, CONV, FC, ADD, LOSS)
# zero in, zero out; BatchNorm and Bias only once their parameters are zeroed
ABSORBABLE = (RELU, BATCHNORM, BIAS, MAXPOOL, AVGPOOL, GLOBALPOOL, FLATTEN)
BIASED = (BATCHNORM, BIAS)

GROUP_MAPPINGS = ('interleaved', 'strided')
# older manifests call the strided layout 'blocked'
MAPPING_ALIASES = {'blocked': 'strided'}

REQUIRED_PARAMS = {
    CONV: ('weight',),
    FC: ('weight',),
    BATCHNORM: ('gamma', 'beta', 'mean', 'var'),
    BIAS: ('bias',),
}
OPTIONAL_PARAMS = {
    CONV: ('bias',),
    FC: ('bias',),
}


class Side(str, enum.Enum):
    OUTPUT = 'out'
    INPUT_SLOT = 'in'


@dataclass(frozen=True, order=True)
class ChannelRef:
    """One channel position: the output side or an input slot of a layer."""
    layer: str
    side: Side
    index: int

    def __str__(self):
        return f'{self.side.value}({self.layer},{self.index})'


def out_ref(layer: str, index: int) -> ChannelRef:
    return ChannelRef(layer, Side.OUTPUT, index)


def slot_ref(layer: str, index: int) -> ChannelRef:
    return ChannelRef(layer, Side.INPUT_SLOT, index)


@dataclass(frozen=True)
class TensorShape:
    """Per-sample shape. Flat tensors keep the spatial extent they came from
    so that every flattened source channel still owns a block of features."""
    channels: int
    height: int = 1
    width: int = 1
    flat: bool = False

    @property
    def slot_width(self) -> int:
        return self.height * self.width if self.flat else 1

    @property
    def pixels(self) -> int:
        return self.height * self.width

    def array_shape(self) -> tuple[int, ...]:
        if self.flat:
            return (self.channels * self.height * self.width,)
        return (self.channels, self.height, self.width)


@dataclass(frozen=True)
class LayerNode:
    id: str
    kind: str
    inputs: tuple[str, ...] = ()
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 1
    stride: int = 1
    pad: int = 0
    groups: int = 1
    group_mapping: str = 'interleaved'
    height: int = 0
    width: int = 0
    eps: float = 1e-5
    params: Mapping[str, str] = field(default_factory=dict)

    @property
    def weight_ref(self) -> str | None:
        return self.params.get('weight')

    @property
    def bias_ref(self) -> str | None:
        return self.params.get('bias')

    @property
    def m_in(self) -> int:
        """Input slots per group (the second weight axis)."""
        if self.kind == CONV:
            return self.in_channels // self.groups
        return self.in_channels

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> 'LayerNode':
        known = {f for f in cls.__dataclass_fields__}
        kwargs = {k: v for k, v in d.items() if k in known}
        kwargs['inputs'] = tuple(d.get('inputs', ()))
        kwargs['params'] = dict(d.get('params', {}))
        if 'group_mapping' in kwargs:
            kwargs['group_mapping'] = MAPPING_ALIASES.get(kwargs['group_mapping'], kwargs['group_mapping'])
        return cls(**kwargs)

    def to_dict(self) -> dict:
        d: dict[str, Any] = {'id': self.id, 'kind': self.kind, 'inputs': list(self.inputs)}
        if self.kind == INPUT:
            d.update(out_channels=self.out_channels, height=self.height, width=self.width)
        if self.kind in WEIGHTED:
            d.update(in_channels=self.in_channels, out_channels=self.out_channels)
        if self.kind == CONV:
            d.update(kernel=self.kernel, stride=self.stride, pad=self.pad,
                     groups=self.groups, group_mapping=self.group_mapping)
        if self.kind in (MAXPOOL, AVGPOOL):
            d.update(kernel=self.kernel, stride=self.stride)
        if self.kind == BATCHNORM:
            d['eps'] = self.eps
        if self.params:
            d['params'] = dict(self.params)
        return d


def group_table(layer: LayerNode) -> np.ndarray:
    """(groups, m_in) array: which input channel feeds slot s of group r.

    interleaved: group r reads the contiguous channels r*m_in .. r*m_in + m_in - 1
    (the usual grouped-conv layout), so slot s interleaves across groups and is
    shared by channels s, s + m_in, s + 2*m_in, ...
    strided: group r reads every g-th channel r, r + g, r + 2*g, ..., so slot s
    is shared by the adjacent channels s*g .. s*g + g - 1.
    """
    g, m = layer.groups, layer.m_in
    if layer.group_mapping == 'strided':
        return np.arange(g * m).reshape(m, g).T.copy()
    return np.arange(g * m).reshape(g, m)


class NetworkGraph:
    """Validated, immutable network topology plus a reference to its tensors.

    After `absorb_activations` the graph only holds structural layers;
    `edge_chains[(layer, k)]` lists the absorbed layers applied to the k-th
    input of `layer`, and `channel_params[producer]` the per-channel
    parameter tensors registered against that producer's output channels.
    """

    def __init__(self, layers: Iterable[LayerNode], store: 'TensorStore',
                 shapes: Mapping[str, TensorShape],
                 edge_chains: Mapping[tuple[str, int], tuple[LayerNode, ...]] | None = None,
                 channel_params: Mapping[str, tuple[str, ...]] | None = None,
                 absorbed: bool = False, name: str = ''):
        self.layers = tuple(layers)
        self.store = store
        self.shapes = dict(shapes)
        self.edge_chains = dict(edge_chains or {})
        self.channel_params = dict(channel_params or {})
        self.absorbed = absorbed
        self.name = name
        self._by_id = {l.id: l for l in self.layers}
        self._pos = {l.id: i for i, l in enumerate(self.layers)}
        consumers: dict[str, list[str]] = {l.id: [] for l in self.layers}
        for l in self.layers:
            for src in l.inputs:
                if l.id not in consumers[src]:
                    consumers[src].append(l.id)
        self._consumers = {k: tuple(v) for k, v in consumers.items()}

    def __len__(self):
        return len(self.layers)

    def __iter__(self):
        return iter(self.layers)

    def __contains__(self, layer_id):
        return layer_id in self._by_id

    def layer(self, layer_id: str) -> LayerNode:
        return self._by_id[layer_id]

    def position(self, layer_id: str) -> int:
        return self._pos[layer_id]

    def consumers(self, layer_id: str) -> tuple[str, ...]:
        return self._consumers[layer_id]

    @property
    def order(self) -> list[str]:
        return [l.id for l in self.layers]

    @property
    def input_layer(self) -> LayerNode:
        return next(l for l in self.layers if l.kind == INPUT)

    @property
    def loss_layer(self) -> LayerNode:
        return next(l for l in self.layers if l.kind == LOSS)

    def weighted_layers(self) -> list[LayerNode]:
        return [l for l in self.layers if l.kind in WEIGHTED]

    def joins(self) -> list[LayerNode]:
        return [l for l in self.layers if l.kind == ADD]

    def input_shape(self, layer_id: str, k: int = 0) -> TensorShape:
        """Shape arriving at the k-th input of a layer, after any absorbed chain."""
        layer = self._by_id[layer_id]
        chain = self.edge_chains.get((layer_id, k))
        if chain:
            return self.shapes[chain[-1].id]
        return self.shapes[layer.inputs[k]]

    def slot_width(self, layer_id: str) -> int:
        return self.input_shape(layer_id).slot_width

    def weight(self, layer_id: str, store: 'TensorStore | None' = None) -> np.ndarray:
        store = store if store is not None else self.store
        return store[self._by_id[layer_id].weight_ref]

    def sort_key(self, ref: ChannelRef) -> tuple[int, int, int]:
        return (self._pos[ref.layer], 0 if ref.side == Side.OUTPUT else 1, ref.index)

    def with_store(self, store: 'TensorStore') -> 'NetworkGraph':
        g = NetworkGraph(self.layers, store, self.shapes, self.edge_chains,
                         self.channel_params, self.absorbed, self.name)
        return g

    def to_manifest(self) -> dict:
        if self.absorbed:
            raise GraphError('absorbed graphs are analysis views and cannot be saved')
        return {
            'format': 'domino-manifest/1',
            'name': self.name,
            'layers': [l.to_dict() for l in self.layers],
        }


def _topological_order(layers: list[LayerNode]) -> list[LayerNode]:
    pos = {l.id: i for i, l in enumerate(layers)}
    deps = {l.id: set(l.inputs) for l in layers}
    try:
        batches = list(toposort(deps))
    except CircularDependencyError as e:
        raise CycleDetected(f'graph has a cycle through {sorted(e.data)}') from e
    by_id = {l.id: l for l in layers}
    ordered = []
    for batch in batches:
        ordered.extend(by_id[i] for i in sorted(batch, key=pos.__getitem__))
    return ordered


def _check_param(store, layer: LayerNode, role: str, shape: tuple[int, ...]):
    name = layer.params.get(role)
    if name is None:
        raise DanglingTensorRef(f'{layer.id}: missing {role} tensor reference')
    if name not in store:
        raise DanglingTensorRef(f'{layer.id}: tensor {name!r} not found in store')
    actual = tuple(store.shape(name))
    if actual != tuple(shape):
        raise ShapeMismatch(f'{layer.id}: {role} tensor {name!r} has shape {actual}, expected {tuple(shape)}',
                            (layer.id,))


def _pool_extent(size: int, kernel: int, stride: int, pad: int = 0) -> int:
    return (size + 2 * pad - kernel) // stride + 1


def _infer_shape(layer: LayerNode, ins: list[TensorShape], store) -> TensorShape:
    kind = layer.kind
    src = layer.inputs[0] if layer.inputs else ''
    if kind == INPUT:
        if min(layer.out_channels, layer.height, layer.width) <= 0:
            raise ShapeMismatch(f'{layer.id}: input dimensions must be positive', (layer.id,))
        return TensorShape(layer.out_channels, layer.height, layer.width)
    x = ins[0]
    if kind == CONV:
        if x.flat:
            raise ShapeMismatch(f'{layer.id}: Conv2D needs a spatial input', (src, layer.id))
        if layer.in_channels != x.channels:
            raise ShapeMismatch(f'{layer.id}: declares {layer.in_channels} input channels, '
                                f'{src} produces {x.channels}', (src, layer.id))
        if layer.groups < 1 or layer.in_channels % layer.groups or layer.out_channels % layer.groups:
            raise ShapeMismatch(f'{layer.id}: channels not divisible by groups={layer.groups}', (layer.id,))
        if layer.group_mapping not in GROUP_MAPPINGS:
            raise GraphError(f'{layer.id}: unknown group mapping {layer.group_mapping!r}')
        if min(layer.out_channels, layer.kernel, layer.stride) <= 0 or layer.pad < 0:
            raise ShapeMismatch(f'{layer.id}: declared dimensions must be positive', (layer.id,))
        h = _pool_extent(x.height, layer.kernel, layer.stride, layer.pad)
        w = _pool_extent(x.width, layer.kernel, layer.stride, layer.pad)
        if h <= 0 or w <= 0:
            raise ShapeMismatch(f'{layer.id}: kernel larger than padded input', (src, layer.id))
        _check_param(store, layer, 'weight', (layer.out_channels, layer.m_in, layer.kernel, layer.kernel))
        if layer.bias_ref is not None:
            _check_param(store, layer, 'bias', (layer.out_channels,))
        return TensorShape(layer.out_channels, h, w)
    if kind == FC:
        if not x.flat:
            raise ShapeMismatch(f'{layer.id}: FullyConnected needs a flat input (insert Flatten)', (src, layer.id))
        if layer.in_channels != x.channels or layer.out_channels <= 0:
            raise ShapeMismatch(f'{layer.id}: declares {layer.in_channels} input slots, '
                                f'{src} produces {x.channels}', (src, layer.id))
        _check_param(store, layer, 'weight', (layer.out_channels, layer.in_channels * x.slot_width))
        if layer.bias_ref is not None:
            _check_param(store, layer, 'bias', (layer.out_channels,))
        return TensorShape(layer.out_channels, flat=True)
    if kind == ADD:
        for other, shape in zip(layer.inputs[1:], ins[1:]):
            if shape != x:
                raise JoinArityMismatch(f'{layer.id}: {src} produces {x} but {other} produces {shape}')
        return x
    if kind == RELU:
        return x
    if kind in BIASED:
        for role in REQUIRED_PARAMS[kind]:
            _check_param(store, layer, role, (x.channels,))
        return x
    if kind in (MAXPOOL, AVGPOOL):
        if x.flat:
            raise ShapeMismatch(f'{layer.id}: pooling needs a spatial input', (src, layer.id))
        if layer.pad:
            raise UnsupportedLayer(f'{layer.id}: padded pooling is not supported')
        h = _pool_extent(x.height, layer.kernel, layer.stride)
        w = _pool_extent(x.width, layer.kernel, layer.stride)
        if h <= 0 or w <= 0:
            raise ShapeMismatch(f'{layer.id}: pooling window larger than input', (src, layer.id))
        return TensorShape(x.channels, h, w)
    if kind == GLOBALPOOL:
        if x.flat:
            raise ShapeMismatch(f'{layer.id}: pooling needs a spatial input', (src, layer.id))
        return TensorShape(x.channels, 1, 1)
    if kind == FLATTEN:
        if x.flat:
            return x
        return TensorShape(x.channels, x.height, x.width, flat=True)
    if kind == LOSS:
        if not x.flat or x.slot_width != 1:
            raise ShapeMismatch(f'{layer.id}: SoftmaxLoss needs flat logits', (src, layer.id))
        return x
    raise UnsupportedLayer(f'{layer.id}: unsupported layer kind {kind!r}')


def build_graph(manifest: Mapping[str, Any], store: 'TensorStore') -> NetworkGraph:
    """Validate a manifest against a tensor store. Raises a `GraphError`
    subclass on the first violation; no partial graph is returned."""
    raw = manifest.get('layers')
    if not raw:
        raise GraphError('manifest has no layers')
    layers = [l if isinstance(l, LayerNode) else LayerNode.from_dict(l) for l in raw]

    seen = set()
    for l in layers:
        if l.kind not in KINDS:
            raise UnsupportedLayer(f'{l.id}: unsupported layer kind {l.kind!r}')
        if l.id in seen:
            raise GraphError(f'duplicate layer id {l.id!r}')
        seen.add(l.id)
    for l in layers:
        for src in l.inputs:
            if src not in seen:
                raise GraphError(f'{l.id}: unknown predecessor {src!r}')
        if l.kind == INPUT and l.inputs:
            raise GraphError(f'{l.id}: Input takes no predecessors')
        if l.kind == ADD and len(l.inputs) < 2:
            raise JoinArityMismatch(f'{l.id}: EltwiseAdd needs at least two predecessors')
        if l.kind not in (INPUT, ADD) and len(l.inputs) != 1:
            raise GraphError(f'{l.id}: {l.kind} takes exactly one predecessor, got {len(l.inputs)}')
    if sum(l.kind == INPUT for l in layers) != 1:
        raise GraphError('graph needs exactly one Input layer')
    if sum(l.kind == LOSS for l in layers) != 1:
        raise GraphError('graph needs exactly one SoftmaxLoss layer')

    ordered = _topological_order(layers)
    shapes: dict[str, TensorShape] = {}
    for l in ordered:
        shapes[l.id] = _infer_shape(l, [shapes[s] for s in l.inputs], store)

    graph = NetworkGraph(ordered, store, shapes, name=manifest.get('name', ''))
    if graph.consumers(graph.loss_layer.id):
        raise GraphError(f'{graph.loss_layer.id}: SoftmaxLoss must be terminal')
    logger.debug('built graph %r: %d layers, %d joins', graph.name, len(graph), len(graph.joins()))
    return graph


def absorb_activations(graph: NetworkGraph) -> NetworkGraph:
    """Collapse activation chains so structural layers connect directly."""
    if graph.absorbed:
        return graph
    for l in graph.layers:
        if l.kind not in STRUCTURAL and l.kind not in ABSORBABLE:
            raise UnsupportedActivation(f'{l.id}: cannot absorb {l.kind}')

    new_layers = []
    chains: dict[tuple[str, int], tuple[LayerNode, ...]] = {}
    registered: dict[str, list[str]] = {}
    for l in graph.layers:
        if l.kind not in STRUCTURAL:
            continue
        sources = []
        for k, src in enumerate(l.inputs):
            chain = []
            node = graph.layer(src)
            while node.kind not in STRUCTURAL:
                chain.append(node)
                node = graph.layer(node.inputs[0])
            chain.reverse()
            sources.append(node.id)
            if chain:
                chains[(l.id, k)] = tuple(chain)
            names = registered.setdefault(node.id, [])
            for op in chain:
                if op.kind in BIASED:
                    for role in REQUIRED_PARAMS[op.kind]:
                        if op.params[role] not in names:
                            names.append(op.params[role])
        new_layers.append(replace(l, inputs=tuple(sources)))

    shapes = {l.id: graph.shapes[l.id] for l in graph.layers}
    absorbed = NetworkGraph(new_layers, graph.store, shapes, chains,
                            {k: tuple(v) for k, v in registered.items() if v},
                            absorbed=True, name=graph.name)
    logger.debug('absorbed %d activation layers', len(graph) - len(absorbed))
    return absorbed
