#!/usr/bin/env python3
"""domino-prune: dependency analysis, saliency dumps and pruning campaigns.

    domino-prune analyze  --model net.json --blob net.bin
    domino-prune saliency --model net.json --blob net.bin --variant domino-io --metric l1-avg
    domino-prune prune    --fixture resblock-toy --seeds 0 1 2 3 --variant channel domino-io --metric l1 --avg
    domino-prune report   runs/ --out runs/report
    domino-prune verify
    domino-prune fixture  resblock-toy --train --out models/

Exit codes: 0 success, 1 a `verify` check failed, 2 usage, I/O or validation error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import pandas as pd

from depgraph import build_dependency, describe_classes
from domino import VARIANTS, DominoConfig, parse_metric, score_all
from engine import backward
from errors import DatasetError, DominoError
from fixtures import FIXTURES, accuracy_floor, build_fixture, load_training_table, synth_for, train_fixture, training_plan
from model_io import DatasetHandle, load_cifar10, load_model, save_model
from netgraph import GROUP_MAPPINGS, MAPPING_ALIASES, NetworkGraph
from pruner import CampaignConfig, run_campaign, write_trace
from report import meta_path, summarize_dir, summary_frame, write_report
from saliency import METRICS, MetricConfig, compute_raw
from verify import run_checks

logger = logging.getLogger('domino_prune')

DATASETS = ('synth', 'cifar10')
CIFAR_SIZE = 32
SYNTH_TRAIN = 1000
SYNTH_TEST = 500


@dataclass
class RunConfig:
    model: str | None = None
    blob: str | None = None
    fixture: str | None = None
    dataset: str = 'synth'
    data_dir: str | None = None
    subset: int | None = None
    test_subset: int | None = None
    data_seed: int = 0
    variants: list[str] = field(default_factory=lambda: ['domino-io'])
    metrics: list[str] = field(default_factory=lambda: ['l1'])
    stop_drop: float = 5.0
    seeds: list[int] = field(default_factory=lambda: [0])
    out: str = 'runs'
    eval_every: int = 1
    group_mapping: str | None = None
    workers: int = 1
    include_classifier: bool = False
    saliency_batch: int = 256
    max_iterations: int | None = None
    progress: bool = False

    def __post_init__(self):
        for v in self.variants:
            if v not in VARIANTS:
                raise ValueError(f'unknown variant {v!r}; choose from {", ".join(VARIANTS)}')
        for m in self.metrics:
            parse_metric(m)
        if self.dataset not in DATASETS:
            raise ValueError(f'unknown dataset {self.dataset!r}')
        if self.stop_drop < 0:
            raise ValueError('--stop-drop must be non-negative')
        if self.eval_every < 1:
            raise ValueError('--eval-every must be at least 1')
        if not self.seeds:
            raise ValueError('at least one seed is needed')

    @classmethod
    def from_args(cls, args: argparse.Namespace) -> 'RunConfig':
        metrics = [m if not args.avg or m.endswith('-avg') else m + '-avg' for m in args.metric]
        return cls(model=args.model, blob=args.blob, fixture=args.fixture, dataset=args.dataset,
                   data_dir=args.data_dir, subset=args.subset, test_subset=args.test_subset,
                   data_seed=args.data_seed, variants=list(args.variant), metrics=metrics,
                   stop_drop=getattr(args, 'stop_drop', 5.0), seeds=list(getattr(args, 'seeds', [0])),
                   out=getattr(args, 'out', None) or 'runs', eval_every=getattr(args, 'eval_every', 1),
                   group_mapping=args.group_mapping, workers=getattr(args, 'workers', 1),
                   include_classifier=getattr(args, 'include_classifier', False),
                   saliency_batch=args.saliency_batch,
                   max_iterations=getattr(args, 'max_iterations', None), progress=args.progress)

    def conditions(self, seed: int) -> list[DominoConfig]:
        return [DominoConfig(v, parse_metric(m, saliency_batch=self.saliency_batch, seed=seed))
                for v in self.variants for m in self.metrics]

    def campaign(self, domino: DominoConfig) -> CampaignConfig:
        return CampaignConfig(domino, stop_drop=self.stop_drop, eval_every=self.eval_every,
                              include_classifier=self.include_classifier,
                              max_iterations=self.max_iterations)


@dataclass
class CampaignJob:
    graph: NetworkGraph
    train: DatasetHandle
    test: DatasetHandle
    cfg: CampaignConfig
    meta: dict
    path: str
    progress: bool = False


def run_job(job: CampaignJob) -> tuple[str, int, float]:
    """Run one campaign and write its trace. Top level so worker processes can unpickle it."""
    trace = run_campaign(job.graph, job.test, job.cfg, saliency_data=job.train,
                         meta=job.meta, progress=job.progress)
    try:
        write_trace(trace, job.path)
    except DominoError:
        for p in (job.path, meta_path(job.path)):
            if os.path.exists(p):
                os.remove(p)
        raise
    return job.path, len(trace), trace.headline


def _configure_logging(verbose: int):
    if verbose >= 2:
        level = logging.DEBUG
    elif verbose == 1:
        level = logging.INFO
    else:
        level = getattr(logging, os.environ.get('DOMINO_LOG_LEVEL', 'WARNING').upper(), logging.WARNING)
    logging.basicConfig(level=level, format='%(levelname)s %(name)s: %(message)s')


def _load_graph(run: RunConfig, seed: int = 0) -> NetworkGraph:
    if run.model:
        if not run.blob:
            raise ValueError('--model needs --blob')
        graph, _ = load_model(run.model, run.blob, run.group_mapping)
        return graph
    if run.fixture:
        graph, _ = build_fixture(run.fixture, seed, CIFAR_SIZE if run.dataset == 'cifar10' else None)
        return graph
    raise ValueError('give --model/--blob or --fixture')


def _synth_sizes(run: RunConfig) -> tuple[int, int]:
    """Fixtures use the split sizes of their training row unless cut by --subset."""
    train_size, test_size = SYNTH_TRAIN, SYNTH_TEST
    if run.fixture and not run.model and run.fixture in load_training_table().index:
        _, train_size, test_size = training_plan(run.fixture, 0)
    return run.subset or train_size, run.test_subset or test_size


def _load_data(run: RunConfig, graph: NetworkGraph) -> tuple[DatasetHandle, DatasetHandle]:
    if run.dataset == 'cifar10':
        directory = run.data_dir or os.environ.get('DOMINO_DATA_DIR')
        if not directory:
            raise DatasetError('cifar10 needs --data-dir or DOMINO_DATA_DIR')
        train, test = load_cifar10(directory, run.subset, run.test_subset)
    else:
        train, test = synth_for(graph, run.data_seed, *_synth_sizes(run))
    classes = graph.shapes[graph.loss_layer.id].channels
    if train.num_classes != classes:
        raise DatasetError(f'{graph.name} predicts {classes} classes, {run.dataset} has {train.num_classes}')
    if train.images.shape[1:] != graph.shapes[graph.input_layer.id].array_shape():
        raise DatasetError(f'{run.dataset} images {train.images.shape[1:]} do not fit {graph.name}')
    return train, test


def cmd_analyze(args) -> int:
    run = RunConfig.from_args(args)
    dep = build_dependency(_load_graph(run))
    for record in describe_classes(dep):
        print(json.dumps(record, sort_keys=True))
    return 0


def cmd_saliency(args) -> int:
    run = RunConfig.from_args(args)
    graph = _load_graph(run)
    dep = build_dependency(graph)
    domino = run.conditions(run.seeds[0])[0]
    metric = domino.metric
    result = None
    if metric.needs_gradients:
        train, _ = _load_data(run, graph)
        result = backward(graph, *train.sample(metric.saliency_batch, metric.seed))
    raw = compute_raw(graph, metric, result)
    scores = score_all(dep, raw, domino)
    frame = pd.DataFrame([{'layer': c.layer, 'channel': c.index, 'raw': raw.scores[c],
                           'count': raw.counts[c], 'score': s} for c, s in scores.scores.items()],
                         columns=['layer', 'channel', 'raw', 'count', 'score'])
    if args.out:
        frame.to_csv(args.out, index=False, float_format='%.6g', lineterminator='\n')
        print(f'Wrote {len(frame)} rows to {args.out}')
    else:
        frame.to_csv(sys.stdout, index=False, float_format='%.6g', lineterminator='\n')
    return 0


def _prepare_network(run: RunConfig, seed: int) -> tuple[NetworkGraph, DatasetHandle, DatasetHandle]:
    """The network each seed's campaigns start from, with its data splits."""
    if run.fixture and not run.model:
        size = CIFAR_SIZE if run.dataset == 'cifar10' else None
        shape_graph, _ = build_fixture(run.fixture, 0, size)
        train, test = _load_data(run, shape_graph)
        graph, store, _, _ = train_fixture(run.fixture, seed, train, test, run.progress, size)
        stem = os.path.join(run.out, 'models', f'{run.fixture}_s{seed}')
        save_model(graph, store, stem + '.json', stem + '.bin')
        return graph, train, test
    graph = _load_graph(run)
    train, test = _load_data(run, graph)
    return graph, train, test


def _jobs(run: RunConfig) -> list[CampaignJob]:
    jobs = []
    for seed in run.seeds:
        graph, train, test = _prepare_network(run, seed)
        network = run.fixture or graph.name
        floor = accuracy_floor(run.fixture) if run.fixture and not run.model else None
        for domino in run.conditions(seed):
            meta = {'network': network, 'dataset': run.dataset, 'data_seed': run.data_seed,
                    'subset': run.subset, 'test_subset': run.test_subset,
                    'train_size': len(train), 'test_size': len(test), 'accuracy_floor': floor}
            name = f'{network}_{domino.variant}_{domino.metric.name}_s{seed}.csv'
            jobs.append(CampaignJob(graph.with_store(graph.store.copy()), train, test,
                                    run.campaign(domino), meta, os.path.join(run.out, name),
                                    run.progress and run.workers <= 1))
    return jobs


def _outputs(jobs: list[CampaignJob]) -> list[str]:
    return [p for j in jobs for p in (j.path, meta_path(j.path))]


def _stamps(jobs: list[CampaignJob]) -> dict[str, int]:
    return {p: os.stat(p).st_mtime_ns for p in _outputs(jobs) if os.path.exists(p)}


def _discard_written(jobs: list[CampaignJob], before: dict[str, int]):
    """Remove every trace this invocation wrote, leaving files it never touched."""
    for p in _outputs(jobs):
        if os.path.exists(p) and before.get(p) != os.stat(p).st_mtime_ns:
            os.remove(p)
            logger.info('removed %s after a failed campaign', p)


def cmd_prune(args) -> int:
    run = RunConfig.from_args(args)
    os.makedirs(run.out, exist_ok=True)
    jobs = _jobs(run)
    before = _stamps(jobs)
    try:
        if run.workers > 1:
            with ProcessPoolExecutor(max_workers=run.workers) as pool:
                results = list(pool.map(run_job, jobs))
        else:
            results = [run_job(j) for j in jobs]
    except BaseException:
        _discard_written(jobs, before)
        raise
    for path, steps, best in results:
        print(f'Wrote {steps} rows to {path} (headline {100 * best:.2f}% weights removed)')
    return 0


def cmd_report(args) -> int:
    summaries = summarize_dir(args.traces)
    out = args.out or os.path.join(args.traces, 'report')
    paths = write_report(summaries, out)
    print(summary_frame(summaries).to_string(index=False, float_format=lambda v: f'{v:.2f}'))
    for p in paths:
        print(f'Wrote {p}')
    return 0


def cmd_verify(args) -> int:
    graph = None
    if args.model or args.fixture:
        graph = _load_graph(RunConfig.from_args(args))
    results = run_checks(graph, graphs=args.graphs, seed=args.data_seed,
                         inject_group_fault=args.inject_group_fault)
    for r in results:
        print(r)
    return 0 if all(r.passed for r in results) else 1


def cmd_fixture(args) -> int:
    run = RunConfig.from_args(args)
    size = args.size or (CIFAR_SIZE if run.dataset == 'cifar10' else None)
    seed = run.seeds[0]
    if args.train:
        shape_graph, _ = build_fixture(args.name, 0, size)
        train, test = _load_data(replace(run, fixture=args.name), shape_graph)
        graph, store, _, _ = train_fixture(args.name, seed, train, test, run.progress, size)
    else:
        graph, store = build_fixture(args.name, seed, size)
    stem = os.path.join(args.out or '.', f'{args.name}_s{seed}')
    digest = save_model(graph, store, stem + '.json', stem + '.bin')
    print(f'Wrote {stem}.json and {stem}.bin (sha256 {digest[:12]})')
    return 0


def _common(p: argparse.ArgumentParser):
    p.add_argument('--model', help='Network manifest (JSON)')
    p.add_argument('--blob', help='Tensor blob for --model')
    p.add_argument('--fixture', choices=sorted(FIXTURES), help='Use a built-in fixture network')
    p.add_argument('--dataset', choices=DATASETS, default='synth')
    p.add_argument('--data-dir', help='CIFAR-10 binary directory (default: $DOMINO_DATA_DIR)')
    p.add_argument('--subset', type=int, help='Keep the first N training samples')
    p.add_argument('--test-subset', type=int, help='Keep the first N test samples')
    p.add_argument('--data-seed', type=int, default=0, help='Seed of the synthetic dataset')
    p.add_argument('--variant', nargs='+', default=['domino-io'], choices=VARIANTS)
    p.add_argument('--metric', nargs='+', default=['l1'],
                   help=f'Base metric(s): {", ".join(METRICS)}, optionally suffixed -avg')
    p.add_argument('--avg', action='store_true', help='Use the -avg form of every metric')
    p.add_argument('--group-mapping', choices=GROUP_MAPPINGS + tuple(MAPPING_ALIASES),
                   help='Override grouped-conv slot mapping (blocked is an old name for strided)')
    p.add_argument('--saliency-batch', type=int, default=MetricConfig.saliency_batch)
    p.add_argument('--progress', action='store_true', help='Show progress bars')
    p.add_argument('-v', '--verbose', action='count', default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='domino-prune',
                                     description='Structured pruning with Domino saliency')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('analyze', help='Print coparent classes as JSON lines')
    _common(p)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser('saliency', help='Dump channel saliencies as CSV')
    _common(p)
    p.add_argument('--out', '-o', help='Output CSV (default: stdout)')
    p.add_argument('--seeds', type=int, nargs='+', default=[0])
    p.set_defaults(func=cmd_saliency)

    p = sub.add_parser('prune', help='Run pruning campaigns and write traces; '
                                        'if any campaign fails, traces written by this run are removed')
    _common(p)
    p.add_argument('--stop-drop', type=float, default=5.0, help='Stop after this many points of accuracy loss')
    p.add_argument('--seeds', type=int, nargs='+', default=[0])
    p.add_argument('--out', '-o', default='runs')
    p.add_argument('--eval-every', type=int, default=1)
    p.add_argument('--max-iterations', type=int)
    p.add_argument('--workers', type=int, default=1)
    p.add_argument('--include-classifier', action='store_true',
                   help='Allow pruning the channels of the layer producing the logits')
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser('report', help='Summarize a trace directory')
    p.add_argument('traces')
    p.add_argument('--out', '-o')
    p.add_argument('-v', '--verbose', action='count', default=0)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser('verify', help='Run the built-in self-checks')
    _common(p)
    p.add_argument('--graphs', type=int, default=200, help='Random graphs for the prune-set oracle')
    p.add_argument('--inject-group-fault', action='store_true', help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser('fixture', help='Build (and optionally train) a fixture network')
    p.add_argument('name', choices=sorted(FIXTURES))
    _common(p)
    p.add_argument('--seeds', type=int, nargs='+', default=[0])
    p.add_argument('--size', type=int, help='Input height/width')
    p.add_argument('--train', action='store_true')
    p.add_argument('--out', '-o', default='.')
    p.set_defaults(func=cmd_fixture)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    _configure_logging(args.verbose)
    try:
        return args.func(args)
    except (DominoError, OSError, ValueError) as e:
        print(f'domino-prune {args.command}: {type(e).__name__}: {e}', file=sys.stderr)
        return getattr(e, 'exit_code', 2)


if __name__ == '__main__':
    sys.exit(main())
