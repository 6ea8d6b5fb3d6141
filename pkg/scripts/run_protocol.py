#!/usr/bin/env python3
"""Desk-scale pruning protocol.

Trains resblock-toy and grouped-toy from scratch once per seed on synthetic
data, runs channel / domino-o / domino-io campaigns with l1 and l1-avg on
every trained network, writes the report and checks that every trained
network reached its fixture accuracy floor and that domino-io/l1-avg
removes on average no fewer weights than channel/l1-avg, up to a tolerance.

Usage:
  python scripts/run_protocol.py --out runs/protocol [--seeds 0 1 2 3] [--workers 4]
"""
import argparse
import glob
import json
import os
import sys

HERE = os.path.dirname(os.path.abspath(__file__))
sys.path.insert(0, os.path.dirname(HERE))

from domino_prune import main as domino_main  # noqa: E402
from report import summarize_dir  # noqa: E402

NETWORKS = ['resblock-toy', 'grouped-toy']
VARIANTS = ['channel', 'domino-o', 'domino-io']
METRICS = ['l1', 'l1-avg']
TOLERANCE_PCT = 2.0


def accuracy_gate(directory: str) -> list[str]:
    """Trained networks whose starting test accuracy misses the floor of
    their fixture row; a campaign on an undertrained net says little."""
    failures = []
    for path in sorted(glob.glob(os.path.join(directory, '*.meta.json'))):
        with open(path, 'r', encoding='utf-8') as fh:
            meta = json.load(fh)
        floor = meta.get('accuracy_floor')
        if floor is not None and meta['initial_accuracy'] < floor:
            failures.append(f'{os.path.basename(path)}: trained accuracy '
                            f'{meta["initial_accuracy"]:.4f} below {floor:.2f}')
    return failures


def directional_check(summaries, tolerance_pct: float = TOLERANCE_PCT) -> list[str]:
    """Networks where domino-io/l1-avg falls more than `tolerance_pct` points
    below channel/l1-avg on mean headline."""
    failures = []
    by_key = {(s.network, s.variant, s.metric, s.avg): s for s in summaries}
    for network in sorted({s.network for s in summaries}):
        domino = by_key.get((network, 'domino-io', 'l1', True))
        channel = by_key.get((network, 'channel', 'l1', True))
        if domino is None or channel is None:
            failures.append(f'{network}: missing l1-avg runs')
            continue
        gap = 100 * (domino.mean - channel.mean)
        print(f'{network}: domino-io/l1-avg {100 * domino.mean:.2f}% vs channel/l1-avg '
              f'{100 * channel.mean:.2f}% ({gap:+.2f} points)')
        if gap < -tolerance_pct:
            failures.append(f'{network}: domino-io/l1-avg trails by {-gap:.2f} points')
    return failures


def main(argv=None):
    p = argparse.ArgumentParser()
    p.add_argument('--out', default=os.path.join('runs', 'protocol'))
    p.add_argument('--seeds', type=int, nargs='+', default=[0, 1, 2, 3])
    p.add_argument('--workers', type=int, default=1)
    p.add_argument('--stop-drop', default='5')
    p.add_argument('--progress', action='store_true')
    args = p.parse_args(argv)

    for network in NETWORKS:
        argv = ['prune', '--fixture', network, '--out', args.out, '--stop-drop', args.stop_drop,
                '--seeds', *map(str, args.seeds), '--variant', *VARIANTS, '--metric', *METRICS,
                '--workers', str(args.workers)]
        if args.progress:
            argv.append('--progress')
        code = domino_main(argv)
        if code:
            return code
    code = domino_main(['report', args.out, '--out', os.path.join(args.out, 'report')])
    if code:
        return code
    failures = accuracy_gate(args.out) + directional_check(summarize_dir(args.out))
    for f in failures:
        print('FAIL ' + f)
    return 1 if failures else 0


if __name__ == '__main__':
    sys.exit(main())
