"""Headline pruning rates and domino-vs-channel improvement tables.

A trace directory holds one `<run>.csv` per campaign plus its
`<run>.meta.json`; `summarize_dir` groups them by network and condition.
"""
from __future__ import annotations

import glob
import json
import logging
import os
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

from errors import EmptyTrace, MalformedTrace, MissingBaseline, ReportError

logger = logging.getLogger(__name__)

TRACE_COLUMNS = ['iteration', 'seed_layer', 'seed_channel', 'set_size', 'weights_removed_cum', 'accuracy']
SUMMARY_COLUMNS = ['network', 'variant', 'metric', 'avg', 'runs', 'mean_pct', 'max_pct']
IMPROVEMENT_COLUMNS = ['network', 'variant', 'avg_improvement_pct', 'best_vs_best_pct']
META_KEYS = ('network', 'variant', 'metric', 'avg', 'seed', 'stop_drop', 'initial_accuracy')

CHANNEL = 'channel'
POOLED = 'domino'


def meta_path(trace_path: str) -> str:
    return os.path.splitext(trace_path)[0] + '.meta.json'


def headline(trace, initial_acc: float, stop_drop: float) -> float:
    """Largest weights_removed_cum among records whose accuracy stays within
    `stop_drop` percentage points of `initial_acc`; 0.0 if none does.

    `trace` is a trace DataFrame or a sequence of records carrying
    `weights_removed_cum` and `accuracy` (None when not evaluated).
    """
    if isinstance(trace, pd.DataFrame):
        removed = trace['weights_removed_cum'].to_numpy(dtype=float)
        acc = trace['accuracy'].to_numpy(dtype=float)
    else:
        records = list(trace)
        removed = np.array([r.weights_removed_cum for r in records], dtype=float)
        acc = np.array([np.nan if r.accuracy is None else r.accuracy for r in records], dtype=float)
    if len(removed) == 0:
        raise EmptyTrace('trace has no records')
    bound = initial_acc - stop_drop / 100.0
    keep = ~np.isnan(acc) & (acc >= bound)
    return float(removed[keep].max()) if keep.any() else 0.0


def read_trace(path: str) -> tuple[pd.DataFrame, dict]:
    try:
        frame = pd.read_csv(path)
        with open(meta_path(path), 'r', encoding='utf-8') as fh:
            meta = json.load(fh)
    except FileNotFoundError as e:
        raise MalformedTrace(f'{path}: {e}') from e
    except (pd.errors.ParserError, pd.errors.EmptyDataError, json.JSONDecodeError) as e:
        raise MalformedTrace(f'{path}: {e}') from e
    missing = [c for c in TRACE_COLUMNS if c not in frame.columns]
    if missing:
        raise MalformedTrace(f'{path}: missing columns {", ".join(missing)}')
    absent = [k for k in META_KEYS if k not in meta]
    if absent:
        raise MalformedTrace(f'{meta_path(path)}: missing keys {", ".join(absent)}')
    return frame, meta


@dataclass(frozen=True)
class ConditionSummary:
    network: str
    variant: str
    metric: str
    avg: bool
    headlines: tuple[float, ...]

    @property
    def runs(self) -> int:
        return len(self.headlines)

    @property
    def mean(self) -> float:
        return float(np.mean(self.headlines))

    @property
    def max(self) -> float:
        return float(np.max(self.headlines))

    @property
    def metric_key(self) -> tuple[str, bool]:
        return (self.metric, self.avg)


@dataclass(frozen=True)
class Improvement:
    network: str
    variant: str
    avg_improvement: float
    best_vs_best: float


def summarize(traces: Iterable[tuple[pd.DataFrame, dict]]) -> list[ConditionSummary]:
    groups: dict[tuple, list[tuple[int, float]]] = {}
    drops = set()
    for frame, meta in traces:
        drops.add(float(meta['stop_drop']))
        key = (meta['network'], meta['variant'], meta['metric'], bool(meta['avg']))
        value = headline(frame, float(meta['initial_accuracy']), float(meta['stop_drop']))
        groups.setdefault(key, []).append((int(meta['seed']), value))
    if not groups:
        raise EmptyTrace('no traces to summarize')
    if len(drops) > 1:
        raise ReportError(f'traces use different stop_drop values {sorted(drops)}; they are not comparable')
    return [ConditionSummary(*key, tuple(v for _, v in sorted(runs)))
            for key, runs in sorted(groups.items())]


def summarize_dir(directory: str) -> list[ConditionSummary]:
    metas = sorted(glob.glob(os.path.join(directory, '*.meta.json')))
    paths = [m[:-len('.meta.json')] + '.csv' for m in metas]
    logger.info('summarizing %d traces from %s', len(paths), directory)
    return summarize(read_trace(p) for p in paths)


def improvement(domino: Sequence[ConditionSummary],
                channel: Sequence[ConditionSummary]) -> tuple[float, float]:
    """(mean over metrics of domino mean - channel mean,
        best domino max - best channel max)."""
    if not channel:
        raise MissingBaseline('no channel-metric runs to compare against')
    base = {c.metric_key: c for c in channel}
    diffs = []
    for d in domino:
        if d.metric_key not in base:
            raise MissingBaseline(f'{d.network}: no channel runs for metric {d.metric}{"-avg" if d.avg else ""}')
        diffs.append(d.mean - base[d.metric_key].mean)
    best = max(d.max for d in domino) - max(c.max for c in channel)
    return float(np.mean(diffs)), float(best)


def improvements(summaries: Sequence[ConditionSummary]) -> list[Improvement]:
    """Per network: one row per domino variant and a pooled `domino` row."""
    out = []
    for network in sorted({s.network for s in summaries}):
        rows = [s for s in summaries if s.network == network]
        channel = [s for s in rows if s.variant == CHANNEL]
        domino = [s for s in rows if s.variant != CHANNEL]
        if not domino:
            continue
        variants = sorted({s.variant for s in domino})
        for variant in variants:
            avg, best = improvement([s for s in domino if s.variant == variant], channel)
            out.append(Improvement(network, variant, avg, best))
        if len(variants) > 1:
            avg, best = improvement(domino, channel)
            out.append(Improvement(network, POOLED, avg, best))
    return out


def summary_frame(summaries: Sequence[ConditionSummary]) -> pd.DataFrame:
    return pd.DataFrame([{
        'network': s.network, 'variant': s.variant, 'metric': s.metric, 'avg': s.avg,
        'runs': s.runs, 'mean_pct': 100 * s.mean, 'max_pct': 100 * s.max,
    } for s in summaries], columns=SUMMARY_COLUMNS)


def improvement_frame(rows: Sequence[Improvement]) -> pd.DataFrame:
    return pd.DataFrame([{
        'network': r.network, 'variant': r.variant,
        'avg_improvement_pct': 100 * r.avg_improvement, 'best_vs_best_pct': 100 * r.best_vs_best,
    } for r in rows], columns=IMPROVEMENT_COLUMNS)


def write_report(summaries: Sequence[ConditionSummary], out_dir: str) -> list[str]:
    """summary.csv, improvements.csv and a gnuplot-ready summary.dat."""
    os.makedirs(out_dir, exist_ok=True)
    summary = summary_frame(summaries)
    table = improvement_frame(improvements(summaries))
    paths = [os.path.join(out_dir, n) for n in ('summary.csv', 'improvements.csv', 'summary.dat')]
    summary.to_csv(paths[0], index=False, float_format='%.2f', lineterminator='\n')
    table.to_csv(paths[1], index=False, float_format='%.2f', lineterminator='\n')
    dat = summary.assign(condition=summary['variant'] + '/' + summary['metric']
                         + np.where(summary['avg'], '-avg', ''))
    with open(paths[2], 'w', encoding='utf-8', newline='\n') as fh:
        fh.write('# network condition runs mean_pct max_pct\n')
        dat[['network', 'condition', 'runs', 'mean_pct', 'max_pct']].to_csv(
            fh, sep=' ', header=False, index=False, float_format='%.2f', lineterminator='\n')
    return paths
