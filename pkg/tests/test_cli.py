import json
import os

import pandas as pd
import pytest

from domino_prune import RunConfig, _load_data, build_parser, main


@pytest.fixture
def saved(tmp_path, capsys):
    assert main(['fixture', 'resblock-toy', '--out', str(tmp_path)]) == 0
    capsys.readouterr()
    stem = tmp_path / 'resblock-toy_s0'
    return ['--model', f'{stem}.json', '--blob', f'{stem}.bin']


def test_analyze_prints_one_line_per_class(saved, capsys):
    assert main(['analyze', *saved]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 82
    first = json.loads(lines[0])
    assert first['coparents'] == ['out(A,0)', 'out(B,0)']


def test_bad_manifest_exits_2(tmp_path, capsys):
    manifest = tmp_path / 'net.json'
    manifest.write_text('{"layers": [')
    (tmp_path / 'net.bin').write_bytes(b'')
    assert main(['analyze', '--model', str(manifest), '--blob', str(tmp_path / 'net.bin')]) == 2
    err = capsys.readouterr().err
    assert err.startswith('domino-prune analyze: ')
    assert len(err.strip().splitlines()) == 1


def test_model_without_blob(tmp_path, capsys):
    assert main(['analyze', '--model', str(tmp_path / 'x.json')]) == 2


def test_saliency_csv(saved, tmp_path, capsys):
    out = tmp_path / 'sal.csv'
    assert main(['saliency', *saved, '--variant', 'domino-o', '--metric', 'l1', '--avg', '--out', str(out)]) == 0
    frame = pd.read_csv(out)
    assert list(frame.columns) == ['layer', 'channel', 'raw', 'count', 'score']
    a0 = frame[(frame.layer == 'A') & (frame.channel == 0)].score.item()
    b0 = frame[(frame.layer == 'B') & (frame.channel == 0)].score.item()
    assert a0 == b0


def test_prune_writes_traces_and_rerun_is_identical(saved, tmp_path, capsys):
    args = ['prune', *saved, '--variant', 'channel', 'domino-io', '--metric', 'l1', 'taylor-f-avg',
            '--subset', '64', '--test-subset', '64', '--saliency-batch', '16',
            '--max-iterations', '4', '--stop-drop', '100']
    contents = []
    for run in ('a', 'b'):
        out = tmp_path / run
        assert main(args + ['--out', str(out)]) == 0
        names = sorted(os.listdir(out))
        assert len([n for n in names if n.endswith('.csv')]) == 4
        assert len([n for n in names if n.endswith('.meta.json')]) == 4
        contents.append({n: (out / n).read_bytes() for n in names})
    assert contents[0] == contents[1]
    assert 'resblock-toy_domino-io_taylor-f-avg_s0.csv' in contents[0]
    stdout = capsys.readouterr().out
    assert stdout.count('Wrote 4 rows to ') == 8


def test_report_on_traces(saved, tmp_path, capsys):
    out = tmp_path / 'runs'
    main(['prune', *saved, '--variant', 'channel', 'domino-o', '--subset', '32', '--test-subset', '32',
          '--max-iterations', '2', '--out', str(out)])
    capsys.readouterr()
    assert main(['report', str(out)]) == 0
    assert (out / 'report' / 'improvements.csv').exists()
    assert 'Wrote ' in capsys.readouterr().out


def test_report_on_broken_dir(tmp_path, capsys):
    (tmp_path / 'x.meta.json').write_text('{}')
    assert main(['report', str(tmp_path)]) == 2
    assert 'MalformedTrace' in capsys.readouterr().err


def test_report_on_empty_dir(tmp_path, capsys):
    assert main(['report', str(tmp_path)]) == 2


def test_verify_catches_swapped_group_mapping(capsys):
    assert main(['verify', '--fixture', 'grouped-toy', '--graphs', '3', '--inject-group-fault']) == 1
    assert 'FAIL prune-set oracle' in capsys.readouterr().out


@pytest.mark.slow
def test_verify_passes(capsys):
    assert main(['verify', '--graphs', '20']) == 0
    out = capsys.readouterr().out
    assert out.count('PASS') == 3


def test_missing_cifar_dir(saved, capsys):
    assert main(['saliency', *saved, '--metric', 'taylor-f', '--dataset', 'cifar10',
                 '--data-dir', '/nonexistent']) == 2


def test_avg_flag_appends_suffix():
    args = build_parser().parse_args(['prune', '--fixture', 'linear-toy', '--metric', 'l1', 'taylor-w-avg', '--avg'])
    assert RunConfig.from_args(args).metrics == ['l1-avg', 'taylor-w-avg']


def test_config_validation():
    with pytest.raises(ValueError):
        RunConfig(variants=['domino-x'])
    with pytest.raises(ValueError):
        RunConfig(metrics=['l2'])
    with pytest.raises(ValueError):
        RunConfig(eval_every=0)


def test_fixture_data_follows_training_table(resblock):
    train, test = _load_data(RunConfig(fixture='resblock-toy'), resblock)
    assert (len(train), len(test)) == (2000, 1000)
    train, test = _load_data(RunConfig(fixture='resblock-toy', subset=50, test_subset=20), resblock)
    assert (len(train), len(test)) == (50, 20)
    train, test = _load_data(RunConfig(fixture='mixed-toy'), resblock)
    assert (len(train), len(test)) == (1000, 500)


def test_failed_prune_removes_its_traces(saved, tmp_path, monkeypatch, capsys):
    import domino_prune
    out = tmp_path / 'runs'
    out.mkdir()
    (out / 'earlier.csv').write_text('kept\n')
    real = domino_prune.run_campaign
    calls = []

    def flaky(*a, **kw):
        calls.append(1)
        if len(calls) == 2:
            raise ValueError('evaluation diverged')
        return real(*a, **kw)

    monkeypatch.setattr(domino_prune, 'run_campaign', flaky)
    assert main(['prune', *saved, '--variant', 'channel', 'domino-io', '--metric', 'l1',
                 '--subset', '32', '--test-subset', '32', '--max-iterations', '2',
                 '--out', str(out)]) == 2
    assert len(calls) == 2
    assert sorted(os.listdir(out)) == ['earlier.csv']
    assert 'evaluation diverged' in capsys.readouterr().err
