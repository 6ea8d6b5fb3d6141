"""Self-checks run by `domino-prune verify`.

Each check returns a `CheckResult`; none of them raise on a failed
comparison, only on broken inputs.
"""
from __future__ import annotations

import contextlib
import logging
from dataclasses import dataclass

import numpy as np

import depgraph
from depgraph import WeightSlice, build_dependency, naive_successor_table, oracle_prune_set, prune_set
from engine import forward, gradient_check
from fixtures import has_coupling, mixed_toy, random_manifest, resblock_toy
from model_io import make_rng
from netgraph import BATCHNORM, CONV, NetworkGraph, build_graph
from pruner import PruneState, apply_prune, never_prune_guard

logger = logging.getLogger(__name__)

GRAD_TOLERANCE = 1e-3
MAX_GRAD_PARAMS = 1000


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str = ''

    def __str__(self):
        status = 'PASS' if self.passed else 'FAIL'
        return f'{status} {self.name}' + (f': {self.detail}' if self.detail else '')


@contextlib.contextmanager
def swapped_group_mapping():
    """Make the dependency analysis read grouped slots with the wrong mapping."""
    saved = dict(depgraph.SLOT_MAPPINGS)
    depgraph.SLOT_MAPPINGS['interleaved'], depgraph.SLOT_MAPPINGS['strided'] = saved['strided'], saved['interleaved']
    try:
        yield
    finally:
        depgraph.SLOT_MAPPINGS.clear()
        depgraph.SLOT_MAPPINGS.update(saved)


def random_graphs(count: int, seed: int = 0):
    rng = make_rng(seed, 11)
    for _ in range(count):
        manifest, store = random_manifest(rng)
        yield build_graph(manifest, store)


def oracle_mismatches(graph: NetworkGraph) -> list[str]:
    dep = build_dependency(graph)
    table = naive_successor_table(dep.graph)
    bad = []
    for seed in dep.succ_edges:
        if dep.is_pinned(seed):
            continue
        fast, slow = prune_set(dep, seed), oracle_prune_set(dep.graph, seed, table)
        if (fast.coparents, fast.siblings, fast.weight_slices, fast.bias_params) != \
                (slow.coparents, slow.siblings, slow.weight_slices, slow.bias_params):
            bad.append(str(seed))
    return bad


def check_oracle(count: int = 200, seed: int = 0, graph: NetworkGraph | None = None) -> CheckResult:
    graphs = list(random_graphs(count, seed))
    if graph is not None:
        graphs.append(graph)
    uncoupled = sum(not has_coupling(g) for g in graphs[:count])
    failures = []
    for i, g in enumerate(graphs):
        bad = oracle_mismatches(g)
        if bad:
            failures.append(f'graph {i} ({g.name}): {", ".join(bad[:3])}')
    if failures:
        return CheckResult('prune-set oracle', False, f'{len(failures)} graphs differ; ' + '; '.join(failures[:3]))
    return CheckResult('prune-set oracle', True,
                       f'{len(graphs)} graphs agree' + (f' ({uncoupled} without coupling)' if uncoupled else ''))


def param_count(graph: NetworkGraph) -> int:
    return sum(int(np.prod(graph.store.shape(n))) for n in graph.store)


def gradient_graphs(count: int = 5, seed: int = 0, limit: int = MAX_GRAD_PARAMS):
    """The mixed-kind fixture, then random graphs small enough for exhaustive
    finite differences."""
    manifest, store = mixed_toy(seed)
    yield build_graph(manifest, store)
    found = 1
    for graph in random_graphs(50 * count, seed + 1):
        if found == count:
            return
        if param_count(graph) <= limit:
            yield graph
            found += 1


def check_gradients(count: int = 5, seed: int = 0, batch: int = 4) -> CheckResult:
    worst, where = 0.0, ''
    checked = skipped = 0
    for graph in gradient_graphs(count, seed):
        rng = make_rng(seed, 13, checked)
        shape = graph.shapes[graph.input_layer.id].array_shape()
        x = rng.normal(size=(batch,) + shape)
        classes = graph.shapes[graph.loss_layer.id].channels
        y = rng.integers(0, classes, size=batch)
        params = {n: graph.store[n].astype(np.float64) for n in graph.store}
        # perturb BatchNorm statistics away from the identity
        for name in params:
            if name.endswith('.var'):
                params[name] = rng.uniform(0.5, 2.0, size=params[name].shape)
            elif name.endswith(('.mean', '.beta', '.bias')):
                params[name] = rng.normal(0.0, 0.1, size=params[name].shape)
        kinks: dict[str, int] = {}
        errors = gradient_check(graph, x, y, params, kinks=kinks)
        skipped += sum(kinks.values())
        name, err = max(errors.items(), key=lambda kv: kv[1])
        if err > worst:
            worst, where = err, f'{graph.name}:{name}'
        checked += 1
    passed = checked == count and worst <= GRAD_TOLERANCE
    return CheckResult('gradients', passed, f'{checked} nets, worst relative error {worst:.2e} at {where}'
                       + (f', {skipped} coordinates on a kink skipped' if skipped else ''))


def _bn_gated(absorbed: NetworkGraph, layer_id: str) -> bool:
    """Every path out of the layer passes a BatchNorm, so zeroed BatchNorm
    parameters silence the map whatever the layer's own weights are."""
    edges = [(c, k) for c in absorbed.consumers(layer_id)
             for k, src in enumerate(absorbed.layer(c).inputs) if src == layer_id]
    return bool(edges) and all(any(op.kind == BATCHNORM for op in absorbed.edge_chains.get(e, ()))
                               for e in edges)


def _randomize(graph: NetworkGraph, ws: WeightSlice, rng: np.random.Generator):
    w = graph.weight(ws.layer)
    if ws.axis == 0:
        block = np.s_[ws.index]
    elif graph.layer(ws.layer).kind == CONV:
        block = np.s_[:, ws.index]
    else:
        width = graph.slot_width(ws.layer)
        block = np.s_[:, ws.index * width:(ws.index + 1) * width]
    w[block] = rng.normal(size=w[block].shape)


def check_zero_propagation(graph: NetworkGraph | None = None, seed: int = 0, batch: int = 4) -> CheckResult:
    """Prune each class in turn on a fresh copy: pruned maps must be exactly
    zero and randomizing the pruned weight slices must leave the logits
    bit-identical. Output-side slices are randomized only for layers whose
    maps are gated by a BatchNorm; input-side slices always are."""
    if graph is None:
        manifest, store = resblock_toy(seed)
        graph = build_graph(manifest, store)
    rng = make_rng(seed, 19)
    x = rng.uniform(size=(batch,) + graph.shapes[graph.input_layer.id].array_shape())
    y = np.zeros(batch, dtype=np.int64)
    dep = build_dependency(graph)
    excluded = never_prune_guard(graph)
    gated = {l.id: _bn_gated(dep.graph, l.id) for l in graph.weighted_layers()}
    failures, checked = [], 0
    for members in dep.classes():
        if dep.is_pinned(members[0]) or any(m.layer in excluded for m in members):
            continue
        work = graph.with_store(graph.store.copy())
        state = PruneState.start(work)
        pset = prune_set(state.dep, members[0])
        apply_prune(state, pset)
        before = forward(work, x, y)
        if any(np.any(before.activations[m.layer][:, m.index] != 0) for m in pset.coparents):
            failures.append(f'{members[0]}: pruned map not zero')
            continue
        for ws in pset.weight_slices:
            if ws.axis == 1 or gated[ws.layer]:
                _randomize(work, ws, rng)
        after = forward(work, x, y)
        if not np.array_equal(before.logits, after.logits):
            failures.append(f'{members[0]}: logits changed')
        checked += 1
    if failures:
        return CheckResult('dead parameters', False, '; '.join(failures[:3]))
    return CheckResult('dead parameters', True, f'{graph.name}: {checked} classes checked')


def run_checks(graph: NetworkGraph | None = None, graphs: int = 200, seed: int = 0,
               inject_group_fault: bool = False) -> list[CheckResult]:
    fault = swapped_group_mapping() if inject_group_fault else contextlib.nullcontext()
    with fault:
        results = [check_oracle(graphs, seed, graph), check_gradients(seed=seed),
                   check_zero_propagation(graph, seed)]
    for r in results:
        logger.info('%s', r)
    return results
