import os

import pytest

from database import RunStore, atomic_write_bytes, atomic_write_text


@pytest.fixture
def store(tmp_path):
    return RunStore(str(tmp_path / 'cache' / 'runs.db'))


def run_key(**changes):
    key = {'algorithm': 'CMAES', 'class_id': 3, 'dim': 2, 'instance_seed': 1, 'run_seed': 2 ** 62 + 5,
           'budget': 20000}
    key.update(changes)
    return key


def test_atomic_write_replaces_and_cleans_up(tmp_path):
    path = tmp_path / 'nested' / 'out.txt'
    atomic_write_text(str(path), 'first')
    atomic_write_bytes(str(path), b'second')
    assert path.read_bytes() == b'second'
    assert os.listdir(path.parent) == ['out.txt']


def test_put_and_get(store):
    store.put(run_key(), 1.5e-3, 20000, {'trajectory': [[100, 2.0], [20000, 1.5e-3]]})
    row = store.get(run_key())
    assert row['best_error'] == 1.5e-3
    assert row['evals'] == 20000
    assert row['run_data']['trajectory'][-1] == [20000, 1.5e-3]


def test_key_fields_are_all_significant(store):
    store.put(run_key(), 0.1, 10, {})
    assert store.get(run_key(budget=10000)) is None
    assert store.get(run_key(algorithm='ABC')) is None
    assert store.get(run_key(run_seed=1)) is None


def test_replace_keeps_one_row(store):
    store.put(run_key(), 0.1, 10, {})
    store.put(run_key(), 0.05, 10, {})
    assert store.count() == 1
    assert store.get(run_key())['best_error'] == 0.05


def test_reopen_sees_rows(store):
    store.put(run_key(), 0.1, 10, {})
    assert RunStore(store.db_path).count() == 1
