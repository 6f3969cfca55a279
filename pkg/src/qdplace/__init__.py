__all__ = ['Instance', 'Topology', 'DemandSpec', 'build_bipartite', 'generate_demand', 'read_instance',
           'write_instance', 'read_topology', 'Assignment', 'response_time', 'tis', 'weighted_tis', 'solve',
           'SOLVERS', 'get_sample_file', 'available_samples']

from .utils import get_sample_file, available_samples
from .instance import (Instance, Topology, DemandSpec, build_bipartite, generate_demand, read_instance,
                       write_instance, read_topology)
from .queueing import Assignment, response_time, tis, weighted_tis
from .solvers import solve, SOLVERS

try:
    from importlib import metadata
except ImportError:  # for Python<3.8
    import importlib_metadata as metadata
try:
    __version__ = metadata.version('qdplace')
except metadata.PackageNotFoundError:
    # not installed (ie running from a source tree)
    __version__ = 'unknown'
