import logging

import pytest

from qdplace import utils


@pytest.fixture
def user_config(tmp_path, monkeypatch):
    path = tmp_path / 'config.yml'
    monkeypatch.setenv('QDPLACE_CONFIG', str(path))
    utils.get_config.cache_clear()
    yield path
    utils.get_config.cache_clear()


def test_user_config_merge(user_config):
    user_config.write_text('milp:\n  gap: 1.0e-4\n')
    assert utils.config_value('milp.gap') == 1e-4
    # untouched keys keep their packaged defaults
    assert utils.config_value('milp.node_limit') == 100000
    assert utils.config_value('pwl.m') == 6
    assert utils.config_value('milp.gap', 0.5) == 0.5


def test_missing_user_config(user_config):
    assert utils.config_value('convex.max_newton') == 200
    with pytest.raises(KeyError, match='convex.nothing'):
        utils.config_value('convex.nothing')


def test_timing(caplog):
    @utils.timing(logging.getLogger('qdplace.test').info)
    def double(x):
        return 2 * x

    with caplog.at_level(logging.INFO, logger='qdplace.test'):
        assert double(3) == 6
    assert 'test_timing.<locals>.double ran' in caplog.text
