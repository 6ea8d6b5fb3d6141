import json

import pytest

from engine import evaluate_accuracy
from fixtures import accuracy_floor, train_fixture
from report import ConditionSummary
from scripts.run_protocol import accuracy_gate, directional_check
from scripts.run_protocol import main as protocol_main


def _s(network, variant, headlines):
    return ConditionSummary(network, variant, 'l1', True, tuple(headlines))


def test_directional_check_tolerates_small_gaps(capsys):
    summaries = [_s('net', 'channel', [0.30, 0.32]), _s('net', 'domino-io', [0.30, 0.30])]
    assert directional_check(summaries) == []
    assert '-1.00 points' in capsys.readouterr().out


def test_directional_check_flags_large_gaps():
    summaries = [_s('net', 'channel', [0.40]), _s('net', 'domino-io', [0.30])]
    assert directional_check(summaries) == ['net: domino-io/l1-avg trails by 10.00 points']


def test_directional_check_needs_both_conditions():
    assert directional_check([_s('net', 'channel', [0.4])]) == ['net: missing l1-avg runs']


def test_accuracy_gate(tmp_path):
    for name, acc, floor in (('ok', 0.97, 0.95), ('low', 0.55, 0.60), ('free', 0.10, None)):
        (tmp_path / f'{name}.meta.json').write_text(json.dumps({'initial_accuracy': acc, 'accuracy_floor': floor}))
    assert accuracy_gate(str(tmp_path)) == ['low.meta.json: trained accuracy 0.5500 below 0.60']


def test_floors_come_from_the_training_table():
    assert accuracy_floor('resblock-toy') == pytest.approx(0.60)
    assert accuracy_floor('grouped-toy') == pytest.approx(0.95)
    assert accuracy_floor('linear-toy') is None
    assert accuracy_floor('mixed-toy') is None


@pytest.mark.slow
@pytest.mark.parametrize('name', ['resblock-toy', 'grouped-toy'])
def test_fixtures_train_to_target(name):
    graph, _, _, test = train_fixture(name, seed=0)
    assert evaluate_accuracy(graph, test) >= accuracy_floor(name)


@pytest.mark.slow
def test_protocol_two_seeds(tmp_path):
    assert protocol_main(['--out', str(tmp_path), '--seeds', '0', '1', '--workers', '2']) == 0
    assert (tmp_path / 'report' / 'summary.dat').exists()
    metas = list(tmp_path.glob('*.meta.json'))
    assert len(metas) == 2 * 2 * 3 * 2
    for path in metas:
        meta = json.loads(path.read_text())
        assert (meta['train_size'], meta['test_size']) == (2000, 1000)
        assert meta['initial_accuracy'] >= meta['accuracy_floor']
