"""Emulated multi-cluster topology.

Clusters own disjoint address spaces and a service registry; nodes are either
headnodes (control plane, interconnect gateways) or workers (workloads and the
load generator).  All nodes are joined by a full mesh of impaired links, every
link carrying the same scenario profile, intra-cluster and inter-cluster
alike.  Name resolution stops at the cluster boundary unless an interconnect
has imported the service under the ``<service>.<cluster>.clusterset`` alias.
"""

from __future__ import annotations

import itertools
import re
from dataclasses import dataclass
from typing import NamedTuple

from .impairment import DEFAULT_BASE_LATENCY_US, ImpairmentProfile, Link
from .timebase import rng_stream
from .transport import (DEFAULT_TRANSPORT_CONFIG, LoopbackPath, NodeTransport,
                        Path, TransportConfig)

IMPORT_SUFFIX = "clusterset"

_DNS_LABEL = re.compile(r"^[a-z0-9]([a-z0-9-]*[a-z0-9])?$")


class TopologyError(ValueError):
    pass


class RegistrationError(ValueError):
    pass


class ResolutionError(LookupError):
    pass


@dataclass(frozen=True, slots=True)
class NodeSpec:
    id: str
    cluster: str
    role: str  # headnode | worker

    def __post_init__(self) -> None:
        if self.role not in ("headnode", "worker"):
            raise TopologyError(f"unknown node role {self.role!r}")


@dataclass(frozen=True, slots=True)
class ClusterSpec:
    name: str
    address_space: int
    nodes: tuple[NodeSpec, ...]

    def __post_init__(self) -> None:
        heads = [n for n in self.nodes if n.role == "headnode"]
        workers = [n for n in self.nodes if n.role == "worker"]
        if len(heads) != 1:
            raise TopologyError(f"cluster {self.name!r} needs exactly one headnode")
        if not workers:
            raise TopologyError(f"cluster {self.name!r} needs at least one worker")


@dataclass(frozen=True, slots=True)
class ServiceRef:
    cluster: str
    service: str
    port: int

    def __post_init__(self) -> None:
        if not _DNS_LABEL.match(self.service):
            raise RegistrationError(f"service name {self.service!r} is not a dns label")


class Endpoint(NamedTuple):
    node: str
    port: int


def alias_name(service: str, cluster: str) -> str:
    return f"{service}.{cluster}.{IMPORT_SUFFIX}"


class Topology:
    """Immutable node/link layout plus mutable registries built on top of it."""

    def __init__(self, specs, profile: ImpairmentProfile, scheduler, seed: int = 42,
                 base_latency_us: int = DEFAULT_BASE_LATENCY_US,
                 transport_cfg: TransportConfig = DEFAULT_TRANSPORT_CONFIG,
                 run_label: str = "", allow_overlapping_address_spaces: bool = False):
        specs = tuple(specs)
        if len(specs) < 2:
            raise TopologyError("at least two clusters are required")
        spaces = [c.address_space for c in specs]
        self.overlapping_address_spaces = len(set(spaces)) != len(spaces)
        if self.overlapping_address_spaces and not allow_overlapping_address_spaces:
            raise TopologyError(f"clusters must have disjoint address spaces, got {spaces}")
        names = [c.name for c in specs]
        if len(set(names)) != len(names):
            raise TopologyError(f"duplicate cluster names: {names}")

        self.clusters = {c.name: c for c in specs}
        self.profile = profile
        self.scheduler = scheduler
        self.seed = seed
        self.base_latency_us = base_latency_us
        self.transport_cfg = transport_cfg
        self.run_label = run_label

        self.nodes: dict[str, NodeSpec] = {}
        for cluster in specs:
            for node in cluster.nodes:
                if node.id in self.nodes:
                    raise TopologyError(f"duplicate node id {node.id!r}")
                if node.cluster != cluster.name:
                    raise TopologyError(f"node {node.id!r} claims cluster {node.cluster!r}")
                self.nodes[node.id] = node

        self._conn_ids = itertools.count(1)
        self.counters = _TopologyCounters()
        self.transports: dict[str, NodeTransport] = {}
        self.links: dict[tuple[str, str], Link] = {}
        self._build_mesh()

        self.services: dict[str, dict[str, ServiceRef]] = {c: {} for c in self.clusters}
        self.imports: dict[str, dict[str, Endpoint]] = {c: {} for c in self.clusters}
        self._service_hosts: dict[tuple[str, str], str] = {}

    def _build_mesh(self) -> None:
        ids = list(self.nodes)
        for node_id in ids:
            self.transports[node_id] = NodeTransport(
                node_id, self.scheduler, self._alloc_conn_id,
                counters=self.counters, cfg=self.transport_cfg)
        for a in ids:
            for b in ids:
                if a == b:
                    continue
                rng = rng_stream(self.seed, f"{self.run_label}|link|{a}->{b}")
                self.links[(a, b)] = Link(a, b, self.profile, rng, self.scheduler,
                                          self.base_latency_us)

    def _alloc_conn_id(self) -> int:
        return next(self._conn_ids)

    # ---- layout lookups --------------------------------------------------

    @property
    def link_pairs(self) -> int:
        return len(self.links) // 2

    def link(self, src: str, dst: str) -> Link:
        return self.links[(src, dst)]

    def cluster_of(self, node_id: str) -> str:
        return self.nodes[node_id].cluster

    def headnode(self, cluster: str) -> str:
        return next(n.id for n in self.clusters[cluster].nodes if n.role == "headnode")

    def workers(self, cluster: str) -> list[str]:
        return [n.id for n in self.clusters[cluster].nodes if n.role == "worker"]

    def path(self, hops: list[str], extras=None) -> Path:
        """Path along consecutive nodes; delivers to the last node's demux."""
        deliver = self.transports[hops[-1]].on_segment
        if len(hops) == 2 and hops[0] == hops[1]:
            return LoopbackPath(self.scheduler, deliver)
        links = [self.links[(hops[i], hops[i + 1])] for i in range(len(hops) - 1)]
        return Path(links, deliver, extras)

    def inter_cluster_links(self) -> list[Link]:
        return [link for (a, b), link in self.links.items()
                if self.cluster_of(a) != self.cluster_of(b)]

    def tap_inter_cluster(self, tap) -> None:
        for link in self.inter_cluster_links():
            link.add_tap(tap)

    # ---- reachability (NAT/firewall modeling) -----------------------------

    def restrict_reachability(self, allowed) -> None:
        """Block cross-cluster links except pairs passing allowed(src, dst)."""
        for (a, b), link in self.links.items():
            if self.cluster_of(a) != self.cluster_of(b):
                link.blocked = not allowed(a, b)

    def allow_pair(self, a: str, b: str) -> None:
        self.links[(a, b)].blocked = False
        self.links[(b, a)].blocked = False

    # ---- service registry --------------------------------------------------

    def register_service(self, cluster: str, service: str, port: int, on_accept,
                         node: str | None = None,
                         handshake_rtts: int | None = None) -> ServiceRef:
        """Register a service on a worker node and start listening."""
        if cluster not in self.clusters:
            raise RegistrationError(f"unknown cluster {cluster!r}")
        if service in self.services[cluster]:
            raise RegistrationError(f"service {service!r} already registered in {cluster}")
        ref = ServiceRef(cluster, service, port)
        host = node if node is not None else self.workers(cluster)[0]
        self.transports[host].listen(port, on_accept, handshake_rtts)
        self.services[cluster][service] = ref
        self._service_hosts[(cluster, service)] = host
        return ref

    def service_endpoint(self, ref: ServiceRef) -> Endpoint:
        return Endpoint(self._service_hosts[(ref.cluster, ref.service)], ref.port)

    def add_import(self, cluster: str, alias: str, endpoint: Endpoint) -> None:
        self.imports[cluster][alias] = endpoint

    def resolve(self, from_node: str, name: str) -> Endpoint:
        """Resolve a service name from a node's viewpoint.

        Local names resolve within the node's own cluster; imported
        ``<service>.<cluster>.clusterset`` aliases resolve to whatever the
        interconnect registered.  Everything else fails.
        """
        cluster = self.cluster_of(from_node)
        ref = self.services[cluster].get(name)
        if ref is not None:
            return self.service_endpoint(ref)
        imported = self.imports[cluster].get(name)
        if imported is not None:
            return imported
        raise ResolutionError(f"cannot resolve {name!r} from {from_node} ({cluster})")

    # ---- reset ------------------------------------------------------------

    def reset(self) -> None:
        """Return registries, imports, taps and link counters to the
        post-build state."""
        for cluster in self.services:
            self.services[cluster] = {}
            self.imports[cluster] = {}
        self._service_hosts = {}
        for link in self.links.values():
            link.reset_counters()
            link.taps = []
            link.blocked = False
        for node_id in list(self.transports):
            self.transports[node_id] = NodeTransport(
                node_id, self.scheduler, self._alloc_conn_id,
                counters=self.counters, cfg=self.transport_cfg)


class _TopologyCounters:
    __slots__ = ("retx",)

    def __init__(self):
        self.retx = 0


def build_topology(specs, profile: ImpairmentProfile, scheduler, **kwargs) -> Topology:
    """Build the full mesh of impaired links for the given cluster specs."""
    return Topology(specs, profile, scheduler, **kwargs)


def default_cluster_specs() -> tuple[ClusterSpec, ClusterSpec]:
    """The standard 2x2 layout: one headnode and one worker per cluster."""
    return (
        ClusterSpec("cluster1", 1, (
            NodeSpec("head1", "cluster1", "headnode"),
            NodeSpec("worker1", "cluster1", "worker"),
        )),
        ClusterSpec("cluster2", 2, (
            NodeSpec("head2", "cluster2", "headnode"),
            NodeSpec("worker2", "cluster2", "worker"),
        )),
    )


def load_topology_file(path) -> tuple[ClusterSpec, ...]:
    """Parse a declarative topology file.

    Lines: ``cluster <name> <address_space>`` and ``node <id> <cluster> <role>``.
    """
    clusters: dict[str, int] = {}
    nodes: dict[str, list[NodeSpec]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if parts[0] == "cluster" and len(parts) == 3:
                clusters[parts[1]] = int(parts[2])
                nodes.setdefault(parts[1], [])
            elif parts[0] == "node" and len(parts) == 4:
                _, node_id, cluster, role = parts
                if cluster not in clusters:
                    raise TopologyError(f"{path}:{lineno}: node before cluster {cluster!r}")
                nodes[cluster].append(NodeSpec(node_id, cluster, role))
            else:
                raise TopologyError(f"{path}:{lineno}: unrecognized line {line!r}")
    return tuple(
        ClusterSpec(name, space, tuple(nodes[name])) for name, space in clusters.items()
    )
