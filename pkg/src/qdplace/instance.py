"""
Problem instances: topologies, the client/facility bipartite projection, demand generation and file I/O.

Internal time unit is the second, rates are requests per second. Files store latencies in milliseconds.
"""
import json
import math
import re
import logging
from dataclasses import dataclass, field, replace
from decimal import Decimal

import fsspec
import networkx as nx
import numpy as np

from .errors import InstanceError
from .utils import config_value, rng, timing

logger = logging.getLogger('qdplace.instance')

DEMAND_KINDS = ('uniform-normalized', 'normal-narrow', 'normal-wide', 'exponential')

# uniform-normalized redraws before giving up on an all-zero draw
_MAX_REDRAWS = 64


@dataclass(frozen=True)
class Node:
    """A topology node. `degree` is filled by :class:`Topology`."""
    id: int
    lat: float = None
    lon: float = None
    degree: int = 0

    @property
    def coord(self):
        if self.lat is None or self.lon is None:
            return None
        return self.lat, self.lon


@dataclass(frozen=True)
class Topology:
    """
    Undirected network with one-way edge latencies in seconds.

    Parameters
    ----------
    nodes: sequence of Node
        ids must be unique and contiguous from 0 (order does not matter)
    edges: sequence of (int, int, float)
        (u, v, one-way latency in seconds)
    name: str
    """
    nodes: tuple
    edges: tuple
    name: str = 'topology'

    def __post_init__(self):
        nodes = sorted(self.nodes, key=lambda n: n.id)
        ids = [n.id for n in nodes]
        if ids != list(range(len(ids))):
            raise InstanceError("node ids must be unique and contiguous from 0. Got %s" % ids)
        degree = [0] * len(nodes)
        edges = []
        for u, v, latency in self.edges:
            u, v, latency = int(u), int(v), float(latency)
            if u == v:
                raise InstanceError("self-loop on node %d" % u)
            for n in (u, v):
                if not 0 <= n < len(nodes):
                    raise InstanceError("edge (%d, %d) refers to unknown node %d" % (u, v, n))
            if not (np.isfinite(latency) and latency >= 0):
                raise InstanceError("edge (%d, %d) has invalid latency %r" % (u, v, latency))
            degree[u] += 1
            degree[v] += 1
            edges.append((u, v, latency))
        object.__setattr__(self, 'nodes', tuple(replace(n, degree=d) for n, d in zip(nodes, degree)))
        object.__setattr__(self, 'edges', tuple(edges))

    @property
    def graph(self):
        """networkx.Graph with a 'latency' edge attribute (parallel edges keep the smallest latency)"""
        g = nx.Graph()
        g.add_nodes_from(n.id for n in self.nodes)
        for u, v, latency in self.edges:
            if g.has_edge(u, v) and g[u][v]['latency'] <= latency:
                continue
            g.add_edge(u, v, latency=latency)
        return g

    def is_connected(self):
        return len(self.nodes) > 0 and nx.is_connected(self.graph)

    def __len__(self):
        return len(self.nodes)


@dataclass(frozen=True, eq=False)
class Skeleton:
    """Bipartite projection of a topology: clients, candidate facilities and their rtt matrix (seconds)."""
    clients: tuple
    facilities: tuple
    rtt: np.ndarray
    topology: Topology = None

    @property
    def n_clients(self):
        return len(self.clients)


@dataclass(frozen=True, eq=False)
class Instance:
    """
    A queue-aware placement instance.

    Parameters
    ----------
    clients: sequence of int
        client node ids (C)
    facilities: sequence of int
        candidate facility node ids (F)
    rtt: array-like, shape (|C|, |F|)
        round trip times in seconds, finite and > 0
    arrival: array-like, shape (|C|,)
        arrival rates in req/s, >= 0
    service: array-like, shape (|F|,)
        service rates in req/s, > 0
    p: int
        number of facilities to open, 1 <= p <= |F|
    topology: Topology or None
        the topology the instance was derived from, if any
    """
    clients: tuple
    facilities: tuple
    rtt: np.ndarray
    arrival: np.ndarray
    service: np.ndarray
    p: int
    topology: Topology = field(default=None)

    def __post_init__(self):
        clients = tuple(int(c) for c in self.clients)
        facilities = tuple(int(f) for f in self.facilities)
        rtt = np.array(self.rtt, dtype=np.float64)
        arrival = np.array(self.arrival, dtype=np.float64).reshape(-1)
        service = np.array(self.service, dtype=np.float64).reshape(-1)
        if len(set(clients)) != len(clients):
            raise InstanceError("duplicate client ids")
        if len(set(facilities)) != len(facilities):
            raise InstanceError("duplicate facility ids")
        if not facilities:
            raise InstanceError("no candidate facilities")
        if rtt.shape != (len(clients), len(facilities)):
            raise InstanceError("rtt shape %s does not match %d clients x %d facilities" %
                                (rtt.shape, len(clients), len(facilities)))
        if arrival.shape != (len(clients),):
            raise InstanceError("%d arrival rates for %d clients" % (arrival.size, len(clients)))
        if service.shape != (len(facilities),):
            raise InstanceError("%d service rates for %d facilities" % (service.size, len(facilities)))
        for ic, c in enumerate(clients):
            if not np.isfinite(arrival[ic]) or arrival[ic] < 0:
                raise InstanceError("arrival rate of client %d is invalid: %r" % (c, arrival[ic]))
            bad = ~(np.isfinite(rtt[ic]) & (rtt[ic] > 0))
            if bad.any():
                f = facilities[int(np.argmax(bad))]
                raise InstanceError("rtt between client %d and facility %d must be finite and > 0. Got %r" %
                                    (c, f, rtt[ic, int(np.argmax(bad))]))
        for jf, f in enumerate(facilities):
            if not np.isfinite(service[jf]) or service[jf] <= 0:
                raise InstanceError("service rate of facility %d must be finite and > 0. Got %r" % (f, service[jf]))
        p = int(self.p)
        if p < 1:
            raise InstanceError("p must be >= 1. Got %d" % p)
        if p > len(facilities):
            raise InstanceError("p exceeds candidate facilities (%d > %d)" % (p, len(facilities)))
        if self.topology is not None:
            for kind, ids in (('client', clients), ('facility', facilities)):
                for i in ids:
                    if not 0 <= i < len(self.topology):
                        raise InstanceError("unknown node id %d for %s" % (i, kind))
        for name, value in (('clients', clients), ('facilities', facilities), ('rtt', rtt),
                            ('arrival', arrival), ('service', service), ('p', p)):
            object.__setattr__(self, name, value)
        for arr in (rtt, arrival, service):
            arr.setflags(write=False)

    @classmethod
    def from_skeleton(cls, skeleton, arrival, service, p):
        """
        Complete a :class:`Skeleton` with demand, service rates and the facility budget.

        Parameters
        ----------
        skeleton: Skeleton
        arrival: array-like
            req/s per client
        service: float or array-like
            req/s, scalar for homogeneous facilities
        p: int
        """
        service = np.broadcast_to(np.asarray(service, dtype=np.float64), (len(skeleton.facilities),))
        return cls(skeleton.clients, skeleton.facilities, skeleton.rtt, arrival, service, p,
                   topology=skeleton.topology)

    def with_p(self, p):
        """same instance with another facility budget"""
        return replace(self, p=p)

    @property
    def n_clients(self):
        return len(self.clients)

    @property
    def n_facilities(self):
        return len(self.facilities)

    @property
    def total_arrival(self):
        """Λ, the total arrival rate in req/s"""
        return float(self.arrival.sum())

    def capacity_bound(self, usable=1.0):
        """largest capacity reachable by opening `p` facilities, each usable up to `usable` * mu"""
        return float(np.sort(self.service)[::-1][:self.p].sum() * usable)

    def is_feasible(self, usable=None):
        """
        True if the total demand fits strictly below the capacity of the `p` largest facilities.

        Parameters
        ----------
        usable: float or None
            usable fraction of each service rate. None means the linearization interval end
            (config 'pwl.interval_end').
        """
        usable = config_value('pwl.interval_end', usable)
        return self.total_arrival < self.capacity_bound(usable)

    def __eq__(self, other):
        if not isinstance(other, Instance):
            return NotImplemented
        return (self.clients == other.clients and self.facilities == other.facilities and self.p == other.p
                and np.array_equal(self.rtt, other.rtt) and np.array_equal(self.arrival, other.arrival)
                and np.array_equal(self.service, other.service) and self.topology == other.topology)

    __hash__ = None

    def __repr__(self):
        return "<Instance clients=%d facilities=%d p=%d total_arrival=%.6g>" % (
            self.n_clients, self.n_facilities, self.p, self.total_arrival)


@dataclass(frozen=True)
class DemandSpec:
    """
    How client arrival rates are drawn.

    Parameters
    ----------
    kind: str
        one of 'uniform-normalized', 'normal-narrow', 'normal-wide', 'exponential'
    target: float
        total arrival rate for 'uniform-normalized', mean arrival rate per client otherwise (req/s)
    seed: int
    """
    kind: str
    target: float
    seed: int = 0

    def __post_init__(self):
        if self.kind not in DEMAND_KINDS:
            raise InstanceError("unknown demand kind '%s'. Allowed are %s" % (self.kind, DEMAND_KINDS))
        if not (np.isfinite(self.target) and self.target > 0):
            raise InstanceError("demand target must be > 0. Got %r" % self.target)


def latency_from_coords(a, b, speed_factor=None, earth_radius=None):
    """
    One-way latency between two geographic coordinates, proportional to the great-circle distance.

    Parameters
    ----------
    a: tuple
        (latitude, longitude) in degrees
    b: tuple
        (latitude, longitude) in degrees
    speed_factor: float or None
        seconds per km. Default from config 'speed_factor_s_per_km'
    earth_radius: float or None
        km. Default from config 'earth_radius_km'

    Returns
    -------
    float
        seconds
    """
    speed_factor = config_value('speed_factor_s_per_km', speed_factor)
    earth_radius = config_value('earth_radius_km', earth_radius)
    for lat, lon in (a, b):
        if not (-90 <= lat <= 90 and -180 <= lon <= 180):
            raise InstanceError("invalid coordinate (%r, %r)" % (lat, lon))
    phi1, lam1, phi2, lam2 = map(math.radians, (a[0], a[1], b[0], b[1]))
    h = math.sin((phi2 - phi1) / 2) ** 2 + math.cos(phi1) * math.cos(phi2) * math.sin((lam2 - lam1) / 2) ** 2
    distance = 2 * earth_radius * math.asin(math.sqrt(min(1.0, h)))
    return distance * speed_factor


def select_facilities(topology, facility_count):
    """ids of the `facility_count` nodes of highest degree, ties to the smaller id, in increasing id order"""
    if not 1 <= facility_count <= len(topology):
        raise InstanceError("facility_count must be in [1, %d]. Got %d" % (len(topology), facility_count))
    ranked = sorted(topology.nodes, key=lambda n: (-n.degree, n.id))
    return tuple(sorted(n.id for n in ranked[:facility_count]))


@timing()
def build_bipartite(topology, facility_count, local_loop_latency=None):
    """
    Project a topology onto clients (every node) and candidate facilities (best connected nodes).

    Parameters
    ----------
    topology: Topology
    facility_count: int
    local_loop_latency: float or None
        rtt in seconds between a client and a facility on the same node.
        Default from config 'local_loop_latency_ms'.

    Returns
    -------
    Skeleton
        `rtt[c, f]` is twice the shortest one-way path latency.
    """
    if local_loop_latency is None:
        local_loop_latency = config_value('local_loop_latency_ms') / 1000.
    if not topology.is_connected():
        raise InstanceError("topology '%s' is not connected" % topology.name)
    facilities = select_facilities(topology, facility_count)
    clients = tuple(n.id for n in topology.nodes)
    graph = topology.graph
    rtt = np.empty((len(clients), len(facilities)))
    for jf, f in enumerate(facilities):
        one_way = nx.single_source_dijkstra_path_length(graph, f, weight='latency')
        for ic, c in enumerate(clients):
            rtt[ic, jf] = 2 * one_way[c]
    # co-located (or zero-latency) pairs get the local loop
    rtt[rtt <= 0] = local_loop_latency
    logger.debug('bipartite %s: %d clients, facilities %s' % (topology.name, len(clients), facilities))
    return Skeleton(clients, facilities, rtt, topology=topology)


def normalize_draws(draws, total):
    """scale non-negative `draws` so that they sum to `total`"""
    draws = np.asarray(draws, dtype=np.float64)
    return draws * (total / draws.sum())


def generate_demand(skeleton, spec):
    """
    Draw client arrival rates.

    Parameters
    ----------
    skeleton: Skeleton or Instance
    spec: DemandSpec

    Returns
    -------
    numpy.ndarray
        req/s per client, all >= 0. Deterministic given `spec.seed`.
    """
    n = skeleton.n_clients
    if n == 0:
        raise InstanceError("no clients to draw demand for")
    generator = rng(spec.seed)
    if spec.kind == 'uniform-normalized':
        for substream in range(_MAX_REDRAWS):
            draws = generator.uniform(0., 1., n)
            if draws.sum() > 0:
                return normalize_draws(draws, spec.target)
            logger.info('all-zero uniform draw for seed %d, redrawing from substream %d' % (spec.seed, substream + 1))
            generator = rng(spec.seed, substream + 1)
        raise InstanceError("uniform demand draw stays zero for seed %d" % spec.seed)
    elif spec.kind == 'normal-narrow':
        draws = generator.normal(spec.target, spec.target / 20, n)
    elif spec.kind == 'normal-wide':
        draws = generator.normal(spec.target, spec.target, n)
    else:
        draws = generator.exponential(spec.target, n)
    return np.maximum(0., draws)


# file I/O

_EXACT = re.compile(r'"@exact:([^"]+)"')


def _seconds_to_ms(value):
    # shortest decimal of the binary value, shifted by 3 digits: reading it back restores the same float
    return '@exact:%s' % format(Decimal(repr(float(value))).scaleb(3), 'f')


def _ms_to_seconds(value):
    return float(Decimal(str(value)).scaleb(-3))


def _dumps(doc):
    return _EXACT.sub(r'\1', json.dumps(doc, indent=1)) + '\n'


def _load(path):
    with fsspec.open(path, 'r', encoding='utf-8') as f:
        try:
            return json.load(f, parse_float=Decimal)
        except json.JSONDecodeError as e:
            raise InstanceError("%s is not a valid json document: %s" % (path, e))


def _field(doc, key, path):
    try:
        return doc[key]
    except (KeyError, TypeError):
        raise InstanceError("missing field '%s' in %s" % (key, path))


def _topology_doc(topology):
    return {
        'nodes': [{'id': n.id, 'lat': n.lat, 'lon': n.lon} for n in topology.nodes],
        'edges': [{'u': u, 'v': v, 'latency_ms': _seconds_to_ms(latency)} for u, v, latency in topology.edges],
    }


def _topology_from_doc(doc, path, name=None):
    nodes = []
    for record in _field(doc, 'nodes', path):
        try:
            lat, lon = record.get('lat'), record.get('lon')
            nodes.append(Node(int(record['id']),
                              None if lat is None else float(lat),
                              None if lon is None else float(lon)))
        except (KeyError, TypeError, ValueError):
            raise InstanceError("malformed node record %r in %s" % (record, path))
    by_id = {n.id: n for n in nodes}
    edges = []
    for record in _field(doc, 'edges', path):
        try:
            u, v = int(record['u']), int(record['v'])
        except (KeyError, TypeError, ValueError):
            raise InstanceError("malformed edge record %r in %s" % (record, path))
        if record.get('latency_ms') is not None:
            latency = _ms_to_seconds(record['latency_ms'])
        else:
            try:
                latency = latency_from_coords(by_id[u].coord, by_id[v].coord)
            except (KeyError, TypeError):
                raise InstanceError("edge (%d, %d) in %s has no latency and no node coordinates" % (u, v, path))
        edges.append((u, v, latency))
    return Topology(tuple(nodes), tuple(edges), name=name or doc.get('name') or 'topology')


def read_topology(path):
    """
    read a topology json file.

    Edges without 'latency_ms' get :func:`latency_from_coords` of their end nodes.

    Parameters
    ----------
    path: str
        local path or fsspec url

    Returns
    -------
    Topology
    """
    doc = _load(path)
    return _topology_from_doc(doc, path)


def write_topology(topology, path):
    """write a topology json file, readable by :func:`read_topology`"""
    doc = {'name': topology.name}
    doc.update(_topology_doc(topology))
    with fsspec.open(path, 'w', encoding='utf-8') as f:
        f.write(_dumps(doc))


def write_instance(instance, path):
    """
    write an instance json file. Latencies are written in milliseconds, exactly.

    Parameters
    ----------
    instance: Instance
    path: str
    """
    doc = _topology_doc(instance.topology) if instance.topology is not None else {'nodes': [], 'edges': []}
    if instance.topology is not None:
        doc['name'] = instance.topology.name
    doc.update({
        'clients': list(instance.clients),
        'facilities': list(instance.facilities),
        'rtt_ms': [[_seconds_to_ms(v) for v in row] for row in instance.rtt],
        'arrival_rps': [float(v) for v in instance.arrival],
        'service_rps': [float(v) for v in instance.service],
        'p': instance.p,
    })
    with fsspec.open(path, 'w', encoding='utf-8') as f:
        f.write(_dumps(doc))


def read_instance(path):
    """
    read an instance json file written by :func:`write_instance`.

    Returns
    -------
    Instance

    Raises
    ------
    InstanceError
        on malformed fields or invariant violations, naming the offending record
    """
    doc = _load(path)
    topology = None
    if _field(doc, 'nodes', path):
        topology = _topology_from_doc(doc, path)
    try:
        rtt = [[_ms_to_seconds(v) for v in row] for row in _field(doc, 'rtt_ms', path)]
        arrival = [float(v) for v in _field(doc, 'arrival_rps', path)]
        service = [float(v) for v in _field(doc, 'service_rps', path)]
        clients = [int(c) for c in _field(doc, 'clients', path)]
        facilities = [int(f) for f in _field(doc, 'facilities', path)]
        p = int(_field(doc, 'p', path))
    except (TypeError, ValueError, ArithmeticError) as e:
        raise InstanceError("malformed numeric field in %s: %s" % (path, e))
    return Instance(clients, facilities, rtt, arrival, service, p, topology=topology)
