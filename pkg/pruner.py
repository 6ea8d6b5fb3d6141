"""Iterative pruning campaign without retraining.

Each step scores every candidate output channel, picks the minimum (ties go
to the lexicographically smallest layer id, then the lowest channel index),
zeroes the whole prune set of that channel and re-evaluates test accuracy.
The campaign stops once accuracy drops more than `stop_drop` percentage
points below its initial value, or when nothing prunable is left.
"""
from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from tqdm import tqdm

from depgraph import DependencyGraph, PruneSet, build_dependency, prune_set
from domino import DominoConfig, score_all
from engine import backward, evaluate_accuracy
from errors import IoError, NothingLeftToPrune, OverlapWithPruned
from model_io import RNG_NAME, DatasetHandle
from netgraph import ADD, CONV, FC, ChannelRef, NetworkGraph, absorb_activations
from report import TRACE_COLUMNS, headline, meta_path
from saliency import compute_raw

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CampaignConfig:
    domino: DominoConfig = field(default_factory=DominoConfig)
    stop_drop: float = 5.0
    eval_every: int = 1
    include_classifier: bool = False
    max_iterations: int | None = None


@dataclass(frozen=True)
class PruneRecord:
    iteration: int
    seed: ChannelRef
    set_size: int
    weights_removed_cum: float
    accuracy: float | None


@dataclass
class PruneTrace:
    records: list[PruneRecord] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.records)

    @property
    def headline(self) -> float:
        return headline(self.records, self.meta['initial_accuracy'], self.meta['stop_drop'])

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([{
            'iteration': r.iteration, 'seed_layer': r.seed.layer, 'seed_channel': r.seed.index,
            'set_size': r.set_size, 'weights_removed_cum': r.weights_removed_cum,
            'accuracy': np.nan if r.accuracy is None else r.accuracy,
        } for r in self.records], columns=TRACE_COLUMNS)


@dataclass
class PruneState:
    graph: NetworkGraph
    dep: DependencyGraph
    initial_accuracy: float = float('nan')
    pruned_mask: set[ChannelRef] = field(default_factory=set)
    dead_slots: set[ChannelRef] = field(default_factory=set)
    excluded: set[str] = field(default_factory=set)
    zeroed: dict[str, np.ndarray] = field(default_factory=dict)
    weights_removed: float = 0.0
    trace: PruneTrace = field(default_factory=PruneTrace)

    @classmethod
    def start(cls, graph: NetworkGraph, excluded=()) -> 'PruneState':
        dep = build_dependency(graph)
        counted = [l for l in graph.weighted_layers() if l.kind == CONV] or graph.weighted_layers()
        zeroed = {l.id: np.zeros(graph.weight(l.id).shape, dtype=bool) for l in counted}
        return cls(graph, dep, excluded=set(excluded), zeroed=zeroed)

    def candidates(self) -> list[ChannelRef]:
        return [o for o in self.dep.succ_edges
                if o not in self.pruned_mask and o.layer not in self.excluded
                and not self.dep.is_pinned(o)
                and not any(x.layer in self.excluded for x in self.dep.class_of(o))]


def never_prune_guard(graph: NetworkGraph, include_classifier: bool = False) -> set[str]:
    """Layers whose output channels are never seeds: by default the
    weight-bearing layer(s) producing the logits."""
    if include_classifier:
        return set()
    absorbed = absorb_activations(graph)
    loss = absorbed.loss_layer
    frontier, excluded = list(loss.inputs), set()
    while frontier:
        node = absorbed.layer(frontier.pop())
        if node.kind in (CONV, FC):
            excluded.add(node.id)
        elif node.kind == ADD:
            frontier.extend(node.inputs)
    return excluded


def _zero_slice(graph: NetworkGraph, layer_id: str, axis: int, index: int):
    if axis == 0:
        return np.s_[index]
    if graph.layer(layer_id).kind == CONV:
        return np.s_[:, index]
    width = graph.slot_width(layer_id)
    return np.s_[:, index * width:(index + 1) * width]


def apply_prune(state: PruneState, pset: PruneSet) -> PruneState:
    """Zero every weight slice and bias parameter of `pset` in place."""
    overlap = pset.coparents & state.pruned_mask
    if overlap:
        raise OverlapWithPruned(f'{", ".join(sorted(map(str, overlap)))} already pruned')
    store = state.graph.store
    for ws in pset.weight_slices:
        w = state.graph.weight(ws.layer)
        sl = _zero_slice(state.graph, ws.layer, ws.axis, ws.index)
        w[sl] = 0.0
        if ws.layer in state.zeroed:
            state.zeroed[ws.layer][sl] = True
    for ps in pset.bias_params:
        store[ps.tensor][ps.index] = 0.0
    state.pruned_mask |= pset.coparents
    state.dead_slots |= pset.siblings
    total = sum(m.size for m in state.zeroed.values())
    state.weights_removed = sum(int(m.sum()) for m in state.zeroed.values()) / total if total else 0.0
    return state


def _select(state: PruneState, cfg: DominoConfig, batch) -> ChannelRef:
    candidates = state.candidates()
    if not candidates:
        raise NothingLeftToPrune('every prunable channel is already pruned')
    result = None
    if cfg.metric.needs_gradients:
        result = backward(state.graph, *batch)
    raw = compute_raw(state.graph, cfg.metric, result, skip=state.pruned_mask | state.dead_slots)
    scores = score_all(state.dep, raw, cfg, state.pruned_mask, candidates)
    return min(scores.scores, key=lambda c: (scores.scores[c], c.layer, c.index))


def prune_step(state: PruneState, cfg: DominoConfig, batch=None,
               test: DatasetHandle | None = None, evaluate: bool = True) -> PruneRecord:
    """One score -> select -> prune -> evaluate iteration."""
    seed = _select(state, cfg, batch)
    pset = prune_set(state.dep, seed, state.pruned_mask)
    apply_prune(state, pset)
    acc = evaluate_accuracy(state.graph, test) if evaluate and test is not None else None
    record = PruneRecord(len(state.trace.records), seed, pset.set_size, state.weights_removed, acc)
    state.trace.records.append(record)
    logger.debug('step %d: pruned %s (+%d), removed %.4f, accuracy %s', record.iteration, seed,
                 pset.set_size, record.weights_removed_cum, acc)
    return record


def run_campaign(graph: NetworkGraph, test: DatasetHandle, cfg: CampaignConfig = CampaignConfig(),
                 saliency_data: DatasetHandle | None = None, meta: dict | None = None,
                 progress: bool = False) -> PruneTrace:
    """Prune `graph` in place (its store is mutated) until the stop rule fires.

    Gradient-based metrics use one fixed batch of `saliency_batch` samples
    drawn with the metric seed from `saliency_data` (default: `test`).
    """
    excluded = never_prune_guard(graph, cfg.include_classifier)
    state = PruneState.start(graph, excluded)
    metric = cfg.domino.metric
    batch = None
    if metric.needs_gradients:
        batch = (saliency_data if saliency_data is not None else test).sample(metric.saliency_batch, metric.seed)
    state.initial_accuracy = evaluate_accuracy(graph, test)
    bound = state.initial_accuracy - cfg.stop_drop / 100.0
    state.trace.meta = {
        **(meta or {}),
        'network': (meta or {}).get('network', graph.name),
        'variant': cfg.domino.variant,
        'metric': metric.base,
        'avg': metric.averaged,
        'seed': metric.seed,
        'stop_drop': cfg.stop_drop,
        'initial_accuracy': state.initial_accuracy,
        'blob_sha256': graph.store.sha256,
        'rng': RNG_NAME,
        'excluded': sorted(excluded),
        'config': {'eval_every': cfg.eval_every, 'include_classifier': cfg.include_classifier,
                   'saliency_batch': metric.saliency_batch, 'max_iterations': cfg.max_iterations},
    }
    logger.info('%s %s: initial accuracy %.4f, stop below %.4f', graph.name, cfg.domino.name,
                state.initial_accuracy, bound)
    bar = tqdm(total=len({state.dep.class_of(c)[0] for c in state.candidates()}),
               desc=cfg.domino.name, disable=not progress)
    while cfg.max_iterations is None or len(state.trace) < cfg.max_iterations:
        evaluate = (len(state.trace) + 1) % max(cfg.eval_every, 1) == 0
        try:
            record = prune_step(state, cfg.domino, batch, test, evaluate)
        except NothingLeftToPrune:
            break
        bar.update(1)
        if record.accuracy is not None and record.accuracy < bound:
            break
    bar.close()
    logger.info('%s %s: %d steps, headline %.4f', graph.name, cfg.domino.name,
                len(state.trace), state.trace.headline)
    return state.trace


def write_trace(trace: PruneTrace, path: str) -> list[str]:
    """Trace CSV plus its metadata side-car; returns both paths."""
    side = meta_path(path)
    try:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        trace.to_frame().to_csv(path, index=False, float_format='%.6f', na_rep='', lineterminator='\n')
        with open(side, 'w', encoding='utf-8', newline='\n') as fh:
            fh.write(json.dumps(trace.meta, sort_keys=True, indent=2) + '\n')
    except OSError as e:
        raise IoError(str(e)) from e
    return [path, side]
