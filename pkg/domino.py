"""Channel, Domino-o and Domino-io scores over coparent / sibling closures."""
from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from typing import Iterable

from depgraph import DependencyGraph
from errors import IncompleteClosure, PrunedChannel
from netgraph import ChannelRef
from saliency import METRICS, MetricConfig, SaliencyVector, combine

logger = logging.getLogger(__name__)

CHANNEL = 'channel'
DOMINO_O = 'domino-o'
DOMINO_IO = 'domino-io'
VARIANTS = (CHANNEL, DOMINO_O, DOMINO_IO)

_CONDITION = re.compile(r'^(?P<variant>channel|domino-o|domino-io)[/:](?P<metric>l1|taylor-w|taylor-f)(?P<avg>-avg)?$')


@dataclass(frozen=True)
class DominoConfig:
    variant: str = DOMINO_IO
    metric: MetricConfig = field(default_factory=MetricConfig)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f'unknown variant {self.variant!r}; choose from {", ".join(VARIANTS)}')

    @property
    def name(self) -> str:
        return f'{self.variant}/{self.metric.name}'


def parse_metric(text: str, **kwargs) -> MetricConfig:
    """'l1', 'taylor-f-avg', ... -> MetricConfig."""
    averaged = text.endswith('-avg')
    base = text[:-4] if averaged else text
    if base not in METRICS:
        raise ValueError(f'unknown metric {text!r}')
    return MetricConfig(base=base, averaged=averaged, **kwargs)


def parse_condition(text: str, **kwargs) -> DominoConfig:
    """'domino-io/l1-avg' -> DominoConfig."""
    m = _CONDITION.match(text)
    if not m:
        raise ValueError(f'cannot parse condition {text!r} (expected e.g. domino-o/l1-avg)')
    metric = MetricConfig(base=m['metric'], averaged=bool(m['avg']), **kwargs)
    return DominoConfig(m['variant'], metric)


def _members(dep: DependencyGraph, c: ChannelRef, variant: str) -> list[ChannelRef]:
    if variant == CHANNEL:
        return [c]
    members = list(dep.class_of(c))
    if variant == DOMINO_IO:
        siblings = set()
        for x in members:
            siblings |= dep.succ(x)
        members += sorted(siblings, key=dep.graph.sort_key)
    return members


def score_channel(dep: DependencyGraph, vec: SaliencyVector, c: ChannelRef,
                  cfg: DominoConfig, pruned: Iterable[ChannelRef] = ()) -> float:
    if c in set(pruned):
        raise PrunedChannel(f'{c} is pruned')
    members = _members(dep, c, cfg.variant)
    missing = [str(x) for x in members if x not in vec]
    if missing:
        raise IncompleteClosure(f'{c}: no raw saliency for {", ".join(missing)}')
    return combine((vec.scores[x] for x in members), (vec.counts[x] for x in members),
                   cfg.metric.averaged)


def score_all(dep: DependencyGraph, vec: SaliencyVector, cfg: DominoConfig,
              pruned: Iterable[ChannelRef] = (),
              channels: Iterable[ChannelRef] | None = None) -> SaliencyVector:
    """Scores for every unpruned output channel in `channels` (default: all
    unpinned output channels). Members of one class share a single
    computation, so their Domino scores are identical."""
    pruned = set(pruned)
    if channels is None:
        channels = [o for o in dep.succ_edges if not dep.is_pinned(o)]
    out = SaliencyVector()
    by_class: dict[ChannelRef, float] = {}
    for c in sorted(channels, key=dep.graph.sort_key):
        if c in pruned:
            continue
        if cfg.variant == CHANNEL:
            score = score_channel(dep, vec, c, cfg)
        else:
            root = dep.class_of(c)[0]
            if root not in by_class:
                by_class[root] = score_channel(dep, vec, c, cfg)
            score = by_class[root]
        out.scores[c] = score
        out.counts[c] = vec.counts[c]
    return out
