"""Channel-level dependency analysis.

The successor relation links every output channel to the input slots that
read it, looking through joins (EltwiseAdd) and splits (several consumers).
Output channels that share an input slot must be pruned together; those
classes are kept in a disjoint-set forest built once per graph, so closure
queries during a campaign are lookups.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Iterable, Iterator

from errors import AlreadyPruned, UnprunableChannel
from netgraph import (
    ADD,
    CONV,
    FC,
    INPUT,
    WEIGHTED,
    ChannelRef,
    LayerNode,
    NetworkGraph,
    Side,
    absorb_activations,
    group_table,
    out_ref,
    slot_ref,
)

logger = logging.getLogger(__name__)

SLOT_MAPPINGS: dict[str, Callable[[LayerNode, int], int]] = {
    'interleaved': lambda layer, j: j % layer.m_in,
    'strided': lambda layer, j: j // layer.groups,
}


def slot_for(layer: LayerNode, channel: int) -> int:
    """Input slot of `layer` that reads incoming channel `channel`."""
    if layer.kind == CONV:
        return SLOT_MAPPINGS[layer.group_mapping](layer, channel)
    return channel


class DisjointSet:
    def __init__(self, items: Iterable = ()):
        self.parent = {x: x for x in items}
        self.rank = {x: 0 for x in self.parent}

    def find(self, x):
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return ra
        if self.rank[ra] < self.rank[rb]:
            ra, rb = rb, ra
        self.parent[rb] = ra
        if self.rank[ra] == self.rank[rb]:
            self.rank[ra] += 1
        return ra


@dataclass(frozen=True, order=True)
class WeightSlice:
    """axis 0: W[index, ...] (an output channel); axis 1: the input slot
    `index` (W[:, index] for convolutions, a column block for FC layers)."""
    layer: str
    axis: int
    index: int


@dataclass(frozen=True, order=True)
class ParamSlice:
    tensor: str
    index: int


@dataclass(frozen=True)
class PruneSet:
    seed: ChannelRef
    coparents: frozenset[ChannelRef]
    siblings: frozenset[ChannelRef]
    weight_slices: tuple[WeightSlice, ...]
    bias_params: tuple[ParamSlice, ...]

    @property
    def set_size(self) -> int:
        return len(self.coparents)


class DependencyGraph:
    def __init__(self, graph: NetworkGraph,
                 succ: dict[ChannelRef, frozenset[ChannelRef]],
                 passthrough: dict[ChannelRef, frozenset[tuple[str, int]]]):
        self.graph = graph
        self.succ_edges = succ
        self.passthrough = passthrough

        owners: dict[ChannelRef, list[ChannelRef]] = {}
        for o, slots in succ.items():
            for s in slots:
                owners.setdefault(s, []).append(o)
        self.slot_producers = {s: tuple(sorted(v, key=graph.sort_key)) for s, v in owners.items()}

        self._sets = DisjointSet(succ)
        for producers in self.slot_producers.values():
            for other in producers[1:]:
                self._sets.union(producers[0], other)
        members: dict[ChannelRef, list[ChannelRef]] = {}
        for o in succ:
            members.setdefault(self._sets.find(o), []).append(o)
        self._classes = {root: tuple(sorted(v, key=graph.sort_key)) for root, v in members.items()}

    def succ(self, ref: ChannelRef) -> frozenset[ChannelRef]:
        return self.succ_edges[ref]

    def class_of(self, ref: ChannelRef) -> tuple[ChannelRef, ...]:
        return self._classes[self._sets.find(ref)]

    def classes(self) -> list[tuple[ChannelRef, ...]]:
        return sorted(self._classes.values(), key=lambda c: self.graph.sort_key(c[0]))

    def is_pinned(self, ref: ChannelRef) -> bool:
        """Classes reaching back to the network input cannot be pruned."""
        return any(self.graph.layer(x.layer).kind == INPUT for x in self.class_of(ref))


def _walk(graph: NetworkGraph, layer_id: str, index: int,
          slots: set[ChannelRef], joins: set[tuple[str, int]]):
    for consumer_id in graph.consumers(layer_id):
        consumer = graph.layer(consumer_id)
        if consumer.kind == ADD:
            if (consumer_id, index) not in joins:
                joins.add((consumer_id, index))
                _walk(graph, consumer_id, index, slots, joins)
        elif consumer.kind in WEIGHTED:
            slots.add(slot_ref(consumer_id, slot_for(consumer, index)))


def build_dependency(graph: NetworkGraph) -> DependencyGraph:
    graph = absorb_activations(graph)
    succ, passthrough = {}, {}
    for layer in graph.layers:
        if layer.kind != INPUT and layer.kind not in WEIGHTED:
            continue
        for i in range(graph.shapes[layer.id].channels):
            slots: set[ChannelRef] = set()
            joins: set[tuple[str, int]] = set()
            _walk(graph, layer.id, i, slots, joins)
            ref = out_ref(layer.id, i)
            succ[ref] = frozenset(slots)
            passthrough[ref] = frozenset(joins)
    dep = DependencyGraph(graph, succ, passthrough)
    logger.debug('dependency graph: %d output channels, %d classes', len(succ), len(dep.classes()))
    return dep


def coparents_closure(dep: DependencyGraph, seed: ChannelRef) -> set[ChannelRef]:
    if seed.side != Side.OUTPUT:
        raise UnprunableChannel(f'{seed} is not an output channel')
    return set(dep.class_of(seed))


def siblings_closure(dep: DependencyGraph, seed: ChannelRef) -> set[ChannelRef]:
    slots: set[ChannelRef] = set()
    for x in coparents_closure(dep, seed):
        slots |= dep.succ(x)
    return slots


def _materialize(graph: NetworkGraph, seed: ChannelRef, coparents: set[ChannelRef],
                 siblings: set[ChannelRef], joins: set[tuple[str, int]]) -> PruneSet:
    slices = [WeightSlice(x.layer, 0, x.index) for x in coparents]
    slices += [WeightSlice(s.layer, 1, s.index) for s in siblings]
    slices.sort(key=lambda w: (graph.position(w.layer), w.axis, w.index))
    params = set()
    for x in coparents:
        layer = graph.layer(x.layer)
        if layer.bias_ref is not None:
            params.add(ParamSlice(layer.bias_ref, x.index))
        for name in graph.channel_params.get(x.layer, ()):
            params.add(ParamSlice(name, x.index))
    for join_id, index in joins:
        for name in graph.channel_params.get(join_id, ()):
            params.add(ParamSlice(name, index))
    return PruneSet(seed, frozenset(coparents), frozenset(siblings),
                    tuple(slices), tuple(sorted(params)))


def prune_set(dep: DependencyGraph, seed: ChannelRef,
              pruned: Iterable[ChannelRef] = ()) -> PruneSet:
    if seed in set(pruned):
        raise AlreadyPruned(f'{seed} is already pruned')
    if seed not in dep.succ_edges:
        raise UnprunableChannel(f'{seed} is not an output channel of a weight-bearing layer')
    if dep.is_pinned(seed):
        raise UnprunableChannel(f'{seed} is coupled to the network input')
    coparents = coparents_closure(dep, seed)
    joins = set()
    for x in coparents:
        joins |= dep.passthrough[x]
    return _materialize(dep.graph, seed, coparents, siblings_closure(dep, seed), joins)


def _naive_successors(graph: NetworkGraph, layer_id: str, index: int):
    slots, joins = set(), set()
    stack = [layer_id]
    while stack:
        node = stack.pop()
        for consumer_id in graph.consumers(node):
            consumer = graph.layer(consumer_id)
            if consumer.kind == ADD:
                if (consumer_id, index) not in joins:
                    joins.add((consumer_id, index))
                    stack.append(consumer_id)
            elif consumer.kind == CONV:
                table = group_table(consumer)
                for s in range(consumer.m_in):
                    if index in table[:, s]:
                        slots.add(slot_ref(consumer_id, s))
            elif consumer.kind == FC:
                slots.add(slot_ref(consumer_id, index))
    return slots, joins


def naive_successor_table(graph: NetworkGraph) -> dict[ChannelRef, tuple[set, set]]:
    graph = absorb_activations(graph)
    outputs = [out_ref(l.id, i) for l in graph.layers if l.kind in WEIGHTED or l.kind == INPUT
               for i in range(graph.shapes[l.id].channels)]
    return {o: _naive_successors(graph, o.layer, o.index) for o in outputs}


def oracle_prune_set(graph: NetworkGraph, seed: ChannelRef, table=None) -> PruneSet:
    """prune_set recomputed by iterating the zero-propagation rule to a
    fixpoint: a pruned output zeroes every slot it reaches, and a zeroed slot
    forces every output feeding it. Test oracle only; quadratic."""
    graph = absorb_activations(graph)
    table = naive_successor_table(graph) if table is None else table
    outputs = list(table)

    marked_out, marked_in, joins = {seed}, set(), set()
    changed = True
    while changed:
        changed = False
        for o in list(marked_out):
            slots, through = table[o]
            joins |= through
            if not slots <= marked_in:
                marked_in |= slots
                changed = True
        for o in outputs:
            if o not in marked_out and table[o][0] & marked_in:
                marked_out.add(o)
                changed = True
    return _materialize(graph, seed, marked_out, marked_in, joins)


def describe_classes(dep: DependencyGraph) -> Iterator[dict]:
    """One record per coparent class, in graph order."""
    for members in dep.classes():
        if dep.graph.layer(members[0].layer).kind == INPUT and len(members) == 1:
            continue
        seed = members[0]
        siblings = sorted(siblings_closure(dep, seed), key=dep.graph.sort_key)
        joins = set()
        for x in members:
            joins |= dep.passthrough[x]
        pset = _materialize(dep.graph, seed, set(members), set(siblings), joins)
        yield {
            'seed': str(seed),
            'coparents': [str(x) for x in members],
            'siblings': [str(s) for s in siblings],
            'slices': len(pset.weight_slices),
            'pinned': dep.is_pinned(seed),
        }
