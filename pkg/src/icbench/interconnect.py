"""Pluggable cross-cluster connectivity with one common contract.

Four kinds, equal semantics and different mechanics:

* ``tunnel``  -- broker-mediated, address-routed encapsulating channel: one
  end-to-end transport connection whose segments hop worker -> local gateway
  -> remote gateway -> worker, paying encapsulation bytes on the
  gateway-to-gateway hop.  Connection establishment consults the broker only,
  so it works when nothing but the broker is mutually reachable.
* ``relay``   -- layer-7 store-and-forward: three chained transport
  connections (worker -> local relay, relay -> relay, relay -> remote worker)
  with per-record framing on the middle hop.
* ``gateway`` -- like relay's middle hop, plus mutual authentication
  (extra handshake round trips) and an access-control check on first use.
  Policy is enforced at the initiating side's gateway (policy stores are
  assumed synced), so a denied consumer never causes inter-cluster traffic.
* ``direct``  -- worker to worker, no gateways; the measurement baseline.

All kinds reuse an established channel for subsequent open_channel calls on
the same (node, alias).
"""

from __future__ import annotations

from dataclasses import dataclass

from .fabric import Endpoint, ResolutionError, ServiceRef, alias_name
from .timebase import Future
from .transport import BrokenConnectionError, ConnectionStateError

KINDS = ("tunnel", "relay", "gateway", "direct")

# one-way impaired hops a request crosses, per kind
KIND_HOPS = {"direct": 1, "tunnel": 3, "relay": 3, "gateway": 3}

BROKER_PORT = 7400
EDGE_PORT = 7500
PEER_PORT = 7501

RECORD_MAX = 16384

_BROKER_RETRY_US = 10_000
_BROKER_RETRIES = 200


class InstallError(ValueError):
    pass


class ExportError(ValueError):
    pass


class PolicyDeniedError(PermissionError):
    pass


class UnsupportedFeatureError(RuntimeError):
    pass


class ChannelClosedByPolicyError(ConnectionError):
    pass


@dataclass(frozen=True, slots=True)
class OverheadModel:
    """Per-kind cost knobs. Calibration constants, not measured data."""

    encap_bytes_per_segment: int = 0
    frame_bytes_per_record: int = 0
    handshake_extra_rtts: int = 0
    policy_check_rtts: int = 0

    def __post_init__(self) -> None:
        if min(self.encap_bytes_per_segment, self.frame_bytes_per_record,
               self.handshake_extra_rtts, self.policy_check_rtts) < 0:
            raise ValueError("overhead fields must be >= 0")

    @staticmethod
    def defaults(kind: str) -> "OverheadModel":
        if kind == "tunnel":
            return OverheadModel(encap_bytes_per_segment=50)
        if kind == "relay":
            return OverheadModel(frame_bytes_per_record=29)
        if kind == "gateway":
            return OverheadModel(frame_bytes_per_record=29,
                                 handshake_extra_rtts=2, policy_check_rtts=1)
        return OverheadModel()


@dataclass(frozen=True, slots=True)
class AccessRule:
    scope: str            # workload | service | cluster
    subject: str
    target: ServiceRef
    action: str           # allow | deny

    def __post_init__(self) -> None:
        if self.scope not in ("workload", "service", "cluster"):
            raise ValueError(f"unknown rule scope {self.scope!r}")
        if self.action not in ("allow", "deny"):
            raise ValueError(f"unknown rule action {self.action!r}")


@dataclass(frozen=True, slots=True)
class ExportedService:
    ref: ServiceRef
    exporting_cluster: str
    visibility: str = "all"


@dataclass(frozen=True, slots=True)
class BrokerRecord:
    cluster: str
    gateway_endpoint: Endpoint
    address_space: int


def evaluate_rules(rules, *, workload, cluster, target: ServiceRef) -> bool:
    """Decide an access request. Narrower scope wins; deny wins within a
    scope; no matching rule means deny."""
    by_scope = {"workload": [], "service": [], "cluster": []}
    for rule in rules:
        if rule.target != target:
            continue
        if rule.scope == "workload" and workload is not None and rule.subject == workload:
            by_scope["workload"].append(rule)
        elif rule.scope == "service" and rule.subject == target.service:
            by_scope["service"].append(rule)
        elif rule.scope == "cluster" and rule.subject == cluster:
            by_scope["cluster"].append(rule)
    for scope in ("workload", "service", "cluster"):
        matched = by_scope[scope]
        if matched:
            return not any(r.action == "deny" for r in matched)
    return False


@dataclass(slots=True)
class InterconnectConfig:
    overheads: OverheadModel | None = None
    broker_node: str | None = None
    gateway_placement: str = "headnode"   # or "worker"
    record_max: int = RECORD_MAX


class Channel:
    """Reliable byte stream to a remote service through the interconnect."""

    def __init__(self, handle, key, conn, server_conn_id, target: ServiceRef,
                 workload: str, cluster: str):
        self.handle = handle
        self.key = key
        self.conn = conn
        self.server_conn_id = server_conn_id
        self.target = target
        self.workload = workload
        self.cluster = cluster
        self.revoked = False
        self.requests_sent = 0

    def _check(self) -> None:
        if self.revoked:
            raise ChannelClosedByPolicyError(
                f"access to {self.target.service} revoked for {self.workload}")

    def send(self, data) -> Future:
        self._check()
        return self.conn.send(data)

    def recv(self, max_bytes: int) -> Future:
        self._check()
        return self.conn.recv(max_bytes)

    @property
    def broken(self) -> bool:
        return self.conn.state == "broken"

    def close(self) -> None:
        self.handle._evict(self.key)
        self.conn.close()


class _StreamCursor:
    """Buffered line/chunk reads over one connection (task-style helpers)."""

    __slots__ = ("conn", "buf")

    def __init__(self, conn):
        self.conn = conn
        self.buf = bytearray()

    def read_line(self):
        while True:
            idx = self.buf.find(b"\n")
            if idx >= 0:
                line = bytes(self.buf[:idx])
                del self.buf[:idx + 1]
                return line
            data = yield self.conn.recv(RECORD_MAX)
            if data == b"":
                return b""
            self.buf += data

    def recv_up_to(self, max_bytes: int):
        if self.buf:
            data = bytes(self.buf[:max_bytes])
            del self.buf[:max_bytes]
            return data
        data = yield self.conn.recv(max_bytes)
        return data


class _FrameIO:
    """Length-prefixed records with fixed per-record framing overhead.

    The header is `frame_bytes` long: 4 length bytes plus padding standing in
    for the record protection overhead of a real secure transport.
    """

    __slots__ = ("conn", "frame_bytes", "buf")

    def __init__(self, conn, frame_bytes: int):
        self.conn = conn
        self.frame_bytes = frame_bytes
        self.buf = bytearray()

    def write_record(self, data) -> None:
        header = len(data).to_bytes(4, "big") + b"\x00" * (self.frame_bytes - 4)
        self.conn.send(header + bytes(data))

    def _read_exact(self, n: int):
        while len(self.buf) < n:
            data = yield self.conn.recv(RECORD_MAX)
            if data == b"":
                return None
            self.buf += data
        out = bytes(self.buf[:n])
        del self.buf[:n]
        return out

    def read_record(self):
        header = yield from self._read_exact(self.frame_bytes)
        if header is None:
            return b""
        length = int.from_bytes(header[:4], "big")
        data = yield from self._read_exact(length)
        if data is None:
            return b""
        return data


class _MidIO:
    """Uniform control/record interface for the inter-gateway leg, framed or
    not depending on the overhead model."""

    __slots__ = ("conn", "frames", "cursor")

    def __init__(self, conn, frame_bytes: int):
        if frame_bytes:
            self.frames = _FrameIO(conn, frame_bytes)
            self.cursor = None
        else:
            self.frames = None
            self.cursor = _StreamCursor(conn)
        self.conn = conn

    def send_control(self, line: bytes) -> None:
        if self.frames:
            self.frames.write_record(line)
        else:
            self.conn.send(line + b"\n")

    def read_control(self):
        if self.frames:
            data = yield from self.frames.read_record()
            return data
        line = yield from self.cursor.read_line()
        return line

    def send_data(self, data) -> None:
        if self.frames:
            self.frames.write_record(data)
        else:
            self.conn.send(data)

    def read_data(self):
        if self.frames:
            data = yield from self.frames.read_record()
            return data
        data = yield from self.cursor.recv_up_to(RECORD_MAX)
        return data


class InterconnectHandle:
    """One installed interconnect over a topology."""

    def __init__(self, kind: str, topology, config: InterconnectConfig):
        self.kind = kind
        self.topology = topology
        self.config = config
        self.overheads = config.overheads or OverheadModel.defaults(kind)
        self.scheduler = topology.scheduler
        self.exports: dict[tuple[str, str], ExportedService] = {}
        self.rules: list[AccessRule] = []
        self.import_table: dict[tuple[str, str], ExportedService] = {}
        self._channels: dict[tuple[str, str], Future] = {}
        self._broker_records: dict[str, BrokerRecord] = {}
        self._tunnel_up: set[frozenset] = set()
        self._gateway_nodes: dict[str, str] = {}
        self._install()

    # ---- installation -----------------------------------------------------

    def _install(self) -> None:
        topo = self.topology
        over = self.overheads
        if 0 < over.frame_bytes_per_record < 4:
            raise InstallError("frame_bytes_per_record must be 0 or >= 4")
        for cluster in topo.clusters:
            if self.config.gateway_placement == "worker":
                self._gateway_nodes[cluster] = topo.workers(cluster)[0]
            else:
                self._gateway_nodes[cluster] = topo.headnode(cluster)
        if self.kind == "direct":
            return
        if self.kind == "tunnel":
            if self.config.broker_node is None:
                raise InstallError("tunnel kind requires a designated broker endpoint")
            if self.config.broker_node not in topo.nodes:
                raise InstallError(f"broker node {self.config.broker_node!r} not in topology")
            if topo.overlapping_address_spaces:
                raise InstallError("tunnel routes by address and needs disjoint address spaces")
            topo.transports[self.config.broker_node].listen(BROKER_PORT, self._broker_accept)
            for cluster, gw in self._gateway_nodes.items():
                self.scheduler.spawn(self._broker_register(cluster, gw))
            return
        # relay and gateway: edge + peer listeners on each cluster's gateway
        for cluster, gw in self._gateway_nodes.items():
            transport = topo.transports[gw]
            transport.listen(EDGE_PORT, self._edge_accept)
            transport.listen(PEER_PORT, self._peer_accept)

    def gateway_node(self, cluster: str) -> str:
        return self._gateway_nodes[cluster]

    # ---- broker (tunnel control plane) --------------------------------------

    def _broker_accept(self, conn) -> None:
        self.scheduler.spawn(self._broker_session(conn))

    def _broker_session(self, conn):
        cursor = _StreamCursor(conn)
        while True:
            try:
                line = yield from cursor.read_line()
            except BrokenConnectionError:
                return
            if line == b"":
                conn.close()
                return
            parts = line.decode().split()
            if parts[0] == "PUT" and len(parts) == 5:
                record = BrokerRecord(parts[1], Endpoint(parts[2], int(parts[3])),
                                      int(parts[4]))
                self._broker_records[parts[1]] = record
                conn.send(b"OK\n")
            elif parts[0] == "GET" and len(parts) == 2:
                record = self._broker_records.get(parts[1])
                if record is None:
                    conn.send(b"NONE\n")
                else:
                    node, port = record.gateway_endpoint
                    conn.send(f"REC {record.cluster} {node} {port} "
                              f"{record.address_space}\n".encode())
            else:
                conn.send(b"ERR\n")

    def _broker_conn(self, from_node):
        topo = self.topology
        broker = self.config.broker_node
        fwd = topo.path([from_node, broker])
        rev = topo.path([broker, from_node])
        conn = yield topo.transports[from_node].connect(fwd, rev, BROKER_PORT)
        return conn

    def _broker_register(self, cluster: str, gw_node: str):
        space = self.topology.clusters[cluster].address_space
        conn = yield from self._broker_conn(gw_node)
        cursor = _StreamCursor(conn)
        conn.send(f"PUT {cluster} {gw_node} 0 {space}\n".encode())
        yield from cursor.read_line()
        conn.close()

    def _broker_lookup(self, gw_node: str, cluster: str):
        conn = yield from self._broker_conn(gw_node)
        cursor = _StreamCursor(conn)
        for _ in range(_BROKER_RETRIES):
            conn.send(f"GET {cluster}\n".encode())
            line = yield from cursor.read_line()
            if line.startswith(b"REC "):
                conn.close()
                parts = line.decode().split()
                return BrokerRecord(parts[1], Endpoint(parts[2], int(parts[3])),
                                    int(parts[4]))
            yield self.scheduler.sleep(_BROKER_RETRY_US)
        conn.close()
        raise InstallError(f"broker record for cluster {cluster!r} never appeared")

    # ---- export / import ----------------------------------------------------

    def export_service(self, ref: ServiceRef) -> ExportedService:
        """Advertise a registered service for cross-cluster import (idempotent)."""
        key = (ref.cluster, ref.service)
        existing = self.exports.get(key)
        if existing is not None:
            return existing
        if ref.service not in self.topology.services.get(ref.cluster, {}):
            raise ExportError(f"service {ref.service!r} not registered in {ref.cluster!r}")
        exported = ExportedService(ref, ref.cluster)
        self.exports[key] = exported
        return exported

    def import_service(self, importing_cluster: str, exported: ExportedService) -> Endpoint:
        """Make an exported service resolvable in the importing cluster."""
        ref = exported.ref
        if self.exports.get((ref.cluster, ref.service)) is None:
            raise ExportError(f"service {ref.service!r} was not exported")
        if self.kind == "gateway":
            if not evaluate_rules(self.rules, workload=None,
                                  cluster=importing_cluster, target=ref):
                raise PolicyDeniedError(
                    f"no access rule allows {importing_cluster} -> {ref.service}")
        alias = alias_name(ref.service, ref.cluster)
        if self.kind == "direct":
            endpoint = self.topology.service_endpoint(ref)
        elif self.kind == "tunnel":
            endpoint = Endpoint(self._gateway_nodes[importing_cluster], 0)
        else:
            endpoint = Endpoint(self._gateway_nodes[importing_cluster], EDGE_PORT)
        self.topology.add_import(importing_cluster, alias, endpoint)
        self.import_table[(importing_cluster, alias)] = exported
        return endpoint

    # ---- access rules --------------------------------------------------------

    def set_access_rules(self, rules) -> int:
        """Replace the rule table; open channels are re-evaluated at once."""
        if self.kind != "gateway":
            raise UnsupportedFeatureError(f"{self.kind} kind does not support access rules")
        self.rules = list(rules)
        for key, fut in list(self._channels.items()):
            if not fut.done() or fut.exception() is not None:
                continue
            ch = fut.result()
            if not evaluate_rules(self.rules, workload=ch.workload,
                                  cluster=ch.cluster, target=ch.target):
                ch.revoked = True
                self._channels.pop(key, None)
        return len(self.rules)

    # ---- channels -------------------------------------------------------------

    def open_channel(self, from_node: str, alias: str, channel_key=None) -> Future:
        """Resolve to a Channel; established channels are reused per
        (from_node, alias).  channel_key overrides the cache key so parallel
        consumers on one node can hold separate channels."""
        key = channel_key if channel_key is not None else (from_node, alias)
        fut = self._channels.get(key)
        if fut is not None:
            if not fut.done():
                return fut
            if fut.exception() is None and not fut.result().broken \
                    and not fut.result().revoked:
                return fut
            del self._channels[key]
        cluster = self.topology.cluster_of(from_node)
        exported = self.import_table.get((cluster, alias))
        if exported is None:
            bad = Future()
            bad.set_exception(ResolutionError(f"alias {alias!r} not imported in {cluster}"))
            return bad
        task = self.scheduler.spawn(self._setup_channel(key, from_node, cluster, exported))
        self._channels[key] = task
        return task

    def _evict(self, key) -> None:
        self._channels.pop(key, None)

    def _setup_channel(self, key, from_node, cluster, exported: ExportedService):
        ref = exported.ref
        topo = self.topology
        target_node, target_port = topo.service_endpoint(ref)
        if self.kind == "direct":
            fwd = topo.path([from_node, target_node])
            rev = topo.path([target_node, from_node])
            conn = yield topo.transports[from_node].connect(fwd, rev, target_port)
            return Channel(self, key, conn, conn.conn_id, ref, from_node, cluster)

        gw_local = self._gateway_nodes[cluster]
        gw_remote = self._gateway_nodes[ref.cluster]

        if self.kind == "tunnel":
            pair = frozenset((gw_local, gw_remote))
            if pair not in self._tunnel_up:
                record = yield from self._broker_lookup(gw_local, ref.cluster)
                gw_remote = record.gateway_endpoint.node
                topo.allow_pair(gw_local, gw_remote)
                self._tunnel_up.add(pair)
            encap = self.overheads.encap_bytes_per_segment
            fwd = topo.path([from_node, gw_local, gw_remote, target_node],
                            extras=(0, encap, 0))
            rev = topo.path([target_node, gw_remote, gw_local, from_node],
                            extras=(0, encap, 0))
            conn = yield topo.transports[from_node].connect(fwd, rev, target_port)
            return Channel(self, key, conn, conn.conn_id, ref, from_node, cluster)

        # relay / gateway: connect to the local edge and ask it to wire us up
        alias = key[1]
        fwd = topo.path([from_node, gw_local])
        rev = topo.path([gw_local, from_node])
        conn = yield topo.transports[from_node].connect(fwd, rev, EDGE_PORT)
        conn.send(f"CONNECT {alias} {from_node}\n".encode())
        cursor = _StreamCursor(conn)
        line = yield from cursor.read_line()
        if line.startswith(b"READY "):
            server_conn_id = int(line.split()[1])
            return Channel(self, key, conn, server_conn_id, ref, from_node, cluster)
        if line.startswith(b"DENY"):
            raise PolicyDeniedError(
                f"gateway denied {from_node} -> {ref.service}")
        raise BrokenConnectionError(f"channel setup failed: {line!r}")

    # ---- relay/gateway sessions -------------------------------------------------

    def _edge_accept(self, conn) -> None:
        self.scheduler.spawn(self._edge_session(conn))

    def _edge_session(self, conn_a):
        cursor = _StreamCursor(conn_a)
        try:
            line = yield from cursor.read_line()
        except BrokenConnectionError:
            return
        parts = line.decode().split()
        if len(parts) != 3 or parts[0] != "CONNECT":
            conn_a.send(b"ERR bad connect\n")
            conn_a.close()
            return
        alias, workload = parts[1], parts[2]
        my_cluster = self.topology.cluster_of(conn_a.transport.node_id)
        exported = self.import_table.get((my_cluster, alias))
        if exported is None:
            conn_a.send(b"ERR unknown alias\n")
            conn_a.close()
            return
        ref = exported.ref
        if self.kind == "gateway":
            if not evaluate_rules(self.rules, workload=workload,
                                  cluster=my_cluster, target=ref):
                conn_a.send(b"DENY\n")
                conn_a.close()
                return
        gw_local = self._gateway_nodes[my_cluster]
        gw_remote = self._gateway_nodes[ref.cluster]
        hs_rtts = 1 + (self.overheads.handshake_extra_rtts if self.kind == "gateway" else 0)
        fwd = self.topology.path([gw_local, gw_remote])
        rev = self.topology.path([gw_remote, gw_local])
        try:
            conn_b = yield self.topology.transports[gw_local].connect(
                fwd, rev, PEER_PORT, handshake_rtts=hs_rtts)
        except (BrokenConnectionError, ConnectionError):
            conn_a.send(b"ERR peer unreachable\n")
            conn_a.close()
            return
        mid = _MidIO(conn_b, self.overheads.frame_bytes_per_record)
        mid.send_control(f"CONNECT {alias} {workload}\n".encode())
        if self.kind == "gateway":
            for i in range(self.overheads.policy_check_rtts):
                mid.send_control(b"POLICY\n")
                yield from mid.read_control()
        ready = yield from mid.read_control()
        if not ready.startswith(b"READY "):
            conn_a.send(b"ERR peer refused\n")
            conn_a.close()
            conn_b.close()
            return
        conn_a.send(bytes(ready.rstrip(b"\n")) + b"\n")
        self.scheduler.spawn(self._pump_in(cursor, mid))
        self.scheduler.spawn(self._pump_out(mid, conn_a))

    def _peer_accept(self, conn) -> None:
        self.scheduler.spawn(self._peer_session(conn))

    def _peer_session(self, conn_b):
        mid = _MidIO(conn_b, self.overheads.frame_bytes_per_record)
        try:
            line = yield from mid.read_control()
        except BrokenConnectionError:
            return
        parts = line.decode().split()
        if len(parts) != 3 or parts[0] != "CONNECT":
            conn_b.close()
            return
        alias = parts[1]
        if self.kind == "gateway":
            for _ in range(self.overheads.policy_check_rtts):
                req = yield from mid.read_control()
                if not req.startswith(b"POLICY"):
                    conn_b.close()
                    return
                mid.send_control(b"POLICY-OK\n")
        service, cluster, suffix = alias.split(".", 2)
        exported = self.exports.get((cluster, service))
        if exported is None:
            mid.send_control(b"ERR not exported\n")
            conn_b.close()
            return
        node, port = self.topology.service_endpoint(exported.ref)
        gw = conn_b.transport.node_id
        fwd = self.topology.path([gw, node])
        rev = self.topology.path([node, gw])
        try:
            conn_c = yield self.topology.transports[gw].connect(fwd, rev, port)
        except (BrokenConnectionError, ConnectionError):
            mid.send_control(b"ERR service unreachable\n")
            conn_b.close()
            return
        mid.send_control(f"READY {conn_c.conn_id}\n".encode())
        cursor_c = _StreamCursor(conn_c)
        self.scheduler.spawn(self._pump_out(mid, conn_c))
        self.scheduler.spawn(self._pump_in(cursor_c, mid))

    def _pump_in(self, cursor: _StreamCursor, mid: _MidIO):
        """Raw side -> mid leg (wrapping into records when framed)."""
        limit = self.config.record_max
        while True:
            try:
                data = yield from cursor.recv_up_to(limit)
            except BrokenConnectionError:
                mid.conn.close()
                return
            if data == b"":
                mid.conn.close()
                return
            try:
                mid.send_data(data)
            except (BrokenConnectionError, ConnectionStateError):
                cursor.conn.close()
                return

    def _pump_out(self, mid: _MidIO, dst_conn):
        """Mid leg -> raw side (unwrapping records when framed)."""
        while True:
            try:
                data = yield from mid.read_data()
            except BrokenConnectionError:
                dst_conn.close()
                return
            if data == b"":
                dst_conn.close()
                return
            try:
                dst_conn.send(data)
            except (BrokenConnectionError, ConnectionStateError):
                mid.conn.close()
                return


def install(kind: str, topology, config: InterconnectConfig | None = None) -> InterconnectHandle:
    """Install an interconnect over a built topology."""
    if kind not in KINDS:
        raise InstallError(f"unknown interconnect kind {kind!r}; expected one of {KINDS}")
    return InterconnectHandle(kind, topology, config or InterconnectConfig())
