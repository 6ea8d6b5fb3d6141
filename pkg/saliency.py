"""Base channel saliency metrics.

Output channel i of a layer selects W[i, ...]; input slot j selects W[:, j]
(for FullyConnected layers, the block of columns fed by source channel j).
Feature-map metrics read the layer's output map i, or the map(s) arriving at
slot j. Every raw score comes with an element count for -avg scaling.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from engine import BatchResult
from errors import MissingActivations, MissingGradients, PrunedChannel, ZeroCount
from netgraph import CONV, ChannelRef, NetworkGraph, Side, group_table, out_ref, slot_ref

logger = logging.getLogger(__name__)

L1 = 'l1'
TAYLOR_W = 'taylor-w'
TAYLOR_F = 'taylor-f'
METRICS = (L1, TAYLOR_W, TAYLOR_F)


@dataclass(frozen=True)
class MetricConfig:
    base: str = L1
    averaged: bool = False
    saliency_batch: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.base not in METRICS:
            raise ValueError(f'unknown metric {self.base!r}; choose from {", ".join(METRICS)}')

    @property
    def needs_gradients(self) -> bool:
        return self.base != L1

    @property
    def name(self) -> str:
        return self.base + ('-avg' if self.averaged else '')


@dataclass
class SaliencyVector:
    scores: dict[ChannelRef, float] = field(default_factory=dict)
    counts: dict[ChannelRef, int] = field(default_factory=dict)

    def __len__(self):
        return len(self.scores)

    def __contains__(self, ref):
        return ref in self.scores


def _weight_slice(graph: NetworkGraph, w: np.ndarray, ref: ChannelRef) -> np.ndarray:
    if ref.side == Side.OUTPUT:
        return w[ref.index]
    if graph.layer(ref.layer).kind == CONV:
        return w[:, ref.index]
    width = graph.slot_width(ref.layer)
    return w[:, ref.index * width:(ref.index + 1) * width]


def _check(ref: ChannelRef, pruned: Iterable[ChannelRef]):
    if ref in pruned:
        raise PrunedChannel(f'{ref} is pruned')


def saliency_l1(graph: NetworkGraph, ref: ChannelRef, pruned=frozenset(),
                params: Mapping[str, np.ndarray] | None = None) -> tuple[float, int]:
    _check(ref, pruned)
    w = np.asarray(graph.weight(ref.layer, params), dtype=np.float64)
    sl = _weight_slice(graph, w, ref)
    return float(np.abs(sl).sum()), sl.size


def saliency_taylor_weights(graph: NetworkGraph, grads: BatchResult | None, ref: ChannelRef,
                            pruned=frozenset(),
                            params: Mapping[str, np.ndarray] | None = None) -> tuple[float, int]:
    _check(ref, pruned)
    name = graph.layer(ref.layer).weight_ref
    if grads is None or name not in grads.grads_w:
        raise MissingGradients(f'no weight gradient for {name!r}')
    w = np.asarray(graph.weight(ref.layer, params), dtype=np.float64)
    sl = _weight_slice(graph, w, ref)
    g = _weight_slice(graph, grads.grads_w[name], ref)
    return float(abs((sl * g).sum())), sl.size


def _fmaps(graph: NetworkGraph, result: BatchResult, ref: ChannelRef) -> tuple[np.ndarray, np.ndarray]:
    """Activation and gradient maps selected by `ref`, shaped (batch, maps, pixels)."""
    layer = graph.layer(ref.layer)
    if ref.side == Side.OUTPUT:
        a, g = result.activations.get(ref.layer), result.grads_a.get(ref.layer)
        if a is None or g is None:
            raise MissingActivations(f'no stored output map for {ref.layer}')
        a, g = a[:, ref.index], g[:, ref.index]
    else:
        a, g = result.inputs.get((ref.layer, 0)), result.grads_in.get((ref.layer, 0))
        if a is None or g is None:
            raise MissingActivations(f'no stored input map for {ref.layer}')
        if layer.kind == CONV:
            maps = group_table(layer)[:, ref.index]
            a, g = a[:, maps], g[:, maps]
        else:
            width = graph.slot_width(ref.layer)
            a = a[:, ref.index * width:(ref.index + 1) * width]
            g = g[:, ref.index * width:(ref.index + 1) * width]
    n = len(a)
    return a.reshape(n, -1).astype(np.float64), g.reshape(n, -1).astype(np.float64)


def saliency_taylor_fmaps(graph: NetworkGraph, result: BatchResult | None, ref: ChannelRef,
                          pruned=frozenset()) -> tuple[float, int]:
    """|sum over batch and pixels of a * dL/da| / batch size; the count is the
    number of pixels per sample across the selected map(s)."""
    _check(ref, pruned)
    if result is None:
        raise MissingActivations('feature-map saliency needs a forward/backward pass')
    a, g = _fmaps(graph, result, ref)
    return float(abs((a * g).sum()) / len(a)), a.shape[1]


def apply_averaging(raw: float, count: int, averaged: bool) -> float:
    if count <= 0:
        raise ZeroCount('cannot average over zero elements')
    return raw / count if averaged else raw


def combine(raws: Iterable[float], counts: Iterable[int], averaged: bool) -> float:
    """(S(a) + S(b) + ...) / (N_a + N_b + ...) when averaged, the plain sum otherwise."""
    return apply_averaging(float(sum(raws)), int(sum(counts)), averaged)


def candidate_refs(graph: NetworkGraph) -> list[ChannelRef]:
    """Every output channel and input slot of the weight-bearing layers."""
    refs = []
    for layer in graph.weighted_layers():
        refs.extend(out_ref(layer.id, i) for i in range(layer.out_channels))
        refs.extend(slot_ref(layer.id, j) for j in range(layer.m_in))
    return refs


def compute_raw(graph: NetworkGraph, cfg: MetricConfig, result: BatchResult | None = None,
                skip: Iterable[ChannelRef] = (), params: Mapping[str, np.ndarray] | None = None,
                refs: Iterable[ChannelRef] | None = None) -> SaliencyVector:
    """Raw saliency and count for every ref (default: all candidates) not in `skip`."""
    skip = set(skip)
    vec = SaliencyVector()
    for ref in refs if refs is not None else candidate_refs(graph):
        if ref in skip:
            continue
        if cfg.base == L1:
            raw, count = saliency_l1(graph, ref, params=params)
        elif cfg.base == TAYLOR_W:
            raw, count = saliency_taylor_weights(graph, result, ref, params=params)
        else:
            raw, count = saliency_taylor_fmaps(graph, result, ref)
        vec.scores[ref] = raw
        vec.counts[ref] = count
    logger.debug('%s: %d raw saliencies', cfg.name, len(vec))
    return vec
