import os
import time
import logging
from functools import lru_cache, wraps
from pathlib import Path

import numpy as np
import yaml
from importlib_resources import files

logger = logging.getLogger('qdplace')
logger.addHandler(logging.NullHandler())

try:
    from psutil import Process
    _process = Process(os.getpid())
except ImportError:
    logger.warning("psutil not installed: solver timings are logged without resident memory")
    _process = None

# user overrides, merged over the packaged qdplace/config.yml
USER_CONFIG = '~/.qdplace/config.yml'


def _merge(base, override):
    merged = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def _load_config():
    """
    Solver and experiment settings: the packaged defaults, with the sections of the user file
    (`QDPLACE_CONFIG` environment variable, else ~/.qdplace/config.yml) merged over them.

    Returns
    -------
    dict
    """
    with files('qdplace').joinpath('config.yml').open() as f:
        config = yaml.safe_load(f)
    user_file = Path(os.environ.get('QDPLACE_CONFIG', USER_CONFIG)).expanduser()
    if user_file.exists():
        with user_file.open() as f:
            overrides = yaml.safe_load(f) or {}
        logger.debug('solver settings overridden by %s: %s' % (user_file, sorted(overrides)))
        config = _merge(config, overrides)
    return config


@lru_cache
def get_config():
    """cached configuration dict. See :func:`_load_config`"""
    return _load_config()


def config_value(key, value=None):
    """
    Return `value` if not None, else the configured value for dotted `key` (ie 'pwl.m').
    """
    if value is not None:
        return value
    node = get_config()
    for part in key.split('.'):
        try:
            node = node[part]
        except KeyError:
            raise KeyError("configuration key '%s' not found" % key)
    return node


def available_samples(kind='topologies'):
    """
    list sample files shipped with qdplace

    Parameters
    ----------
    kind: str
        'topologies' or 'grids'

    Returns
    -------
    list of str
        sample names (file names without extension)
    """
    folder = files('qdplace').joinpath('data').joinpath(kind)
    return sorted(p.name.rsplit('.', 1)[0] for p in folder.iterdir() if not p.name.startswith('_'))


def get_sample_file(name, kind='topologies'):
    """
    get path of a sample file shipped with qdplace.

    Parameters
    ----------
    name: str
        sample name, as listed by :func:`available_samples`
    kind: str
        'topologies' or 'grids'

    Returns
    -------
    str
        local path to the file
    """
    ext = {'topologies': 'json', 'grids': 'yml'}[kind]
    path = files('qdplace').joinpath('data').joinpath(kind).joinpath('%s.%s' % (name, ext))
    if not path.is_file():
        raise FileNotFoundError("sample %s '%s' not found. Available: %s" % (kind, name, available_samples(kind)))
    return str(path)


def rng(seed, substream=0):
    """
    Reproducible generator for `seed`. Distinct `substream` values give non-overlapping streams.

    Returns
    -------
    numpy.random.Generator
    """
    bit_generator = np.random.PCG64(seed)
    if substream:
        bit_generator = bit_generator.jumped(substream)
    return np.random.Generator(bit_generator)


def derive_seed(*keys):
    """integer seed derived from a tuple of non-negative integer keys"""
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1, dtype=np.uint64)[0])


def timing(logger=logger.debug):
    """decorator logging the wall time of each call, and the resident memory change when psutil is available"""

    def decorator(f):
        @wraps(f)
        def wrapper(*args, **kwargs):
            rss = _process.memory_info().rss if _process is not None else None
            start = time.perf_counter()
            result = f(*args, **kwargs)
            elapsed = time.perf_counter() - start
            if rss is None:
                logger('%s ran %.3f s' % (f.__qualname__, elapsed))
            else:
                logger('%s ran %.3f s, rss %+.1f MiB' % (
                    f.__qualname__, elapsed, (_process.memory_info().rss - rss) / 2 ** 20))
            return result
        return wrapper
    return decorator
