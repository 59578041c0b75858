"""Ordered, reliable, connection-oriented byte streams over impaired links.

A compact TCP analogue: MSS-sized segments, a sliding window counted in
segments, cumulative ACKs only (no SACK, no fast retransmit, no congestion
control), and a per-segment retransmission timeout that doubles on each
consecutive timeout.  Loss below therefore surfaces to callers purely as
added latency, which is the effect the testbed measures.

Retransmission timing follows the usual rules: SRTT/RTTVAR are updated from
unretransmitted segments only (Karn's rule) and the RTO is clamped to
[rto_min, rto_max].
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

from .impairment import Segment
from .timebase import Future

# Receiver-side delayed-ack fallback; only reached when a trailing segment
# arrives without a push flag, so it never delays single-message exchanges.
ACK_DELAY_US = 2_000

_RTO_GRANULARITY_US = 1_000


class ConnectTimeoutError(ConnectionError):
    """Handshake retries exhausted without an answer."""


class BrokenConnectionError(ConnectionError):
    """Too many consecutive retransmissions of one segment; stream is dead."""


class ConnectionStateError(RuntimeError):
    """Operation not valid in the connection's current state."""


@dataclass(frozen=True, slots=True)
class TransportConfig:
    mss: int = 1400
    window: int = 32
    rto_min_us: int = 200_000
    rto_max_us: int = 5_000_000
    handshake_rtts: int = 1
    connect_retries: int = 5
    max_segment_retries: int = 8

    def __post_init__(self) -> None:
        if self.mss < 1 or self.window < 1 or self.rto_min_us <= 0:
            raise ValueError("mss >= 1, window >= 1 and rto_min_us > 0 required")


DEFAULT_TRANSPORT_CONFIG = TransportConfig()


class Path:
    """Directed multi-hop route: each hop is an impaired link.

    Segments are forwarded hop by hop; a loss at any hop kills the segment.
    `extras` carries per-hop encapsulation bytes (tunnel overhead accounting).
    The final hop delivers into the destination node's transport demux.
    """

    __slots__ = ("links", "extras", "deliver", "_n")

    def __init__(self, links, deliver, extras=None):
        self.links = tuple(links)
        self.deliver = deliver
        self.extras = tuple(extras) if extras else (0,) * len(self.links)
        self._n = len(self.links)

    @property
    def hops(self) -> int:
        return self._n

    def send(self, seg: Segment) -> None:
        self.links[0].transmit(seg, self._arrive, (1, seg), self.extras[0])

    def _arrive(self, arg) -> None:
        i, seg = arg
        if i == self._n:
            self.deliver(seg)
        else:
            self.links[i].transmit(seg, self._arrive, (i + 1, seg), self.extras[i])


class LoopbackPath:
    """Zero-hop path for node-local exchanges (no impairment, no wire)."""

    __slots__ = ("scheduler", "deliver")

    links = ()
    hops = 0

    def __init__(self, scheduler, deliver):
        self.scheduler = scheduler
        self.deliver = deliver

    def send(self, seg: Segment) -> None:
        self.scheduler.call_soon(self.deliver, seg)


class _SegState:
    __slots__ = ("seq", "end", "payload", "push", "ctrl", "last_tx_us",
                 "rto_us", "retries", "retransmitted")

    def __init__(self, seq, end, payload, push, ctrl, now_us, rto_us):
        self.seq = seq
        self.end = end
        self.payload = payload
        self.push = push
        self.ctrl = ctrl
        self.last_tx_us = now_us
        self.rto_us = rto_us
        self.retries = 0
        self.retransmitted = False


class Connection:
    """One reliable byte stream between two nodes over a fixed path."""

    HANDSHAKING = "handshaking"
    ESTABLISHED = "established"
    CLOSED = "closed"
    BROKEN = "broken"

    def __init__(self, transport, conn_id, path, cfg, handshake_rtts):
        self.transport = transport
        self.scheduler = transport.scheduler
        self.conn_id = conn_id
        self.path = path
        self.cfg = cfg
        self.state = Connection.HANDSHAKING
        self.local = transport.node_id
        self.remote = path.links[-1].dst if path.links else transport.node_id
        # send side
        self._txq = deque()            # (memoryview, end_seq)
        self._tx_pending = 0
        self._next_seq = 0
        self._app_sent = 0
        self._inflight = deque()
        self._cum_acked = 0
        self._send_waiters = deque()   # (end_seq, future, start_us)
        self._fin_queued = False
        self._fin_carved = False
        self._timer_pending = False
        # receive side
        self._expected = 0
        self._ooo: dict[int, object] = {}
        self._rx = deque()
        self._rx_bytes = 0
        self._rx_waiter = None
        self._rx_max = 0
        self._rx_wake_pending = False
        self._remote_fin_seq = None
        self._eof = False
        self._ack_count = 0
        self._ack_scheduled = False
        self._ack_timer_armed = False
        # rtt estimation
        self.srtt_us = None
        self._rttvar_us = 0
        self.rto_us = cfg.rto_min_us * 2
        # handshake
        self._required_rtts = handshake_rtts
        self._hs_round = 0
        self._hs_attempts = 0
        self._hs_timeout_us = cfg.rto_min_us
        self._hs_tx_us = 0
        self._connect_fut = None
        # instrumentation
        self.retx_count = 0
        self.last_send_duration_us = None
        self.break_reason = None

    # ---- connection setup ----------------------------------------------

    def _start_connect(self, dst_port, rev_path) -> Future:
        self._connect_fut = Future()
        self._hs_port = dst_port
        self._hs_rev_path = rev_path
        self._send_handshake()
        return self._connect_fut

    def _send_handshake(self) -> None:
        self._hs_attempts += 1
        self._hs_tx_us = self.scheduler.now_us
        if self._hs_round == 0:
            meta = (self._hs_rev_path, self._required_rtts)
            seg = Segment(self.local, self.remote, self.conn_id, "control",
                          seq=0, ctrl="syn", port=self._hs_port, meta=meta)
        else:
            seg = Segment(self.local, self.remote, self.conn_id, "control",
                          seq=self._hs_round, ctrl="hs")
        self.path.send(seg)
        self.scheduler.schedule_in(self._hs_timeout_us, self._on_hs_timeout,
                                   (self._hs_round, self._hs_attempts))

    def _on_hs_timeout(self, tag) -> None:
        rnd, attempt = tag
        if self.state != Connection.HANDSHAKING:
            return
        if rnd != self._hs_round or attempt != self._hs_attempts:
            return
        if self._hs_attempts >= self.cfg.connect_retries:
            self.state = Connection.BROKEN
            self.break_reason = "connect-timeout"
            self._connect_fut.set_exception(ConnectTimeoutError(
                f"handshake to {self.remote} timed out after {attempt} attempts"))
            return
        self._hs_timeout_us *= 2
        self._send_handshake()

    def _on_hs_ack(self, seg: Segment) -> None:
        if self.state != Connection.HANDSHAKING or seg.seq != self._hs_round:
            return
        sample = None
        if self._hs_attempts == 1:
            sample = self.scheduler.now_us - self._hs_tx_us
        self._hs_round += 1
        self._hs_attempts = 0
        self._hs_timeout_us = self.cfg.rto_min_us
        if self._hs_round >= self._required_rtts:
            self.state = Connection.ESTABLISHED
            if sample is not None:
                self.srtt_us = sample
                self._rttvar_us = sample // 2
                self.rto_us = max(self.cfg.rto_min_us, 2 * sample)
            self._connect_fut.set_result(self)
        else:
            self._send_handshake()

    # server side: reply to (possibly duplicated) handshake rounds
    def _on_hs_request(self, seg: Segment) -> None:
        ack = Segment(self.local, self.remote, self.conn_id, "control",
                      seq=seg.seq, ctrl="hs-ack")
        self.path.send(ack)

    # ---- sending ---------------------------------------------------------

    def send(self, data) -> Future:
        """Queue bytes for reliable delivery; resolves when all are acked."""
        if self.state in (Connection.BROKEN, Connection.CLOSED) or self._fin_queued:
            raise ConnectionStateError(f"send on {self.state} connection")
        if self.state != Connection.ESTABLISHED:
            raise ConnectionStateError("send before connection established")
        fut = Future()
        n = len(data)
        if n == 0:
            fut.set_result(0)
            return fut
        self._app_sent += n
        end = self._app_sent
        self._txq.append((memoryview(data), end))
        self._tx_pending += n
        self._send_waiters.append((end, fut, self.scheduler.now_us, n))
        self._pump()
        return fut

    def close(self) -> Future:
        """Send FIN after pending data; resolves when the peer acked it."""
        if self.state in (Connection.BROKEN, Connection.CLOSED):
            fut = Future()
            fut.set_result(None)
            return fut
        if not self._fin_queued:
            self._fin_queued = True
            self._fin_fut = Future()
            self._pump()
        return self._fin_fut

    def _pump(self) -> None:
        cfg = self.cfg
        now = self.scheduler.now_us
        while self._tx_pending and len(self._inflight) < cfg.window:
            mv, chunk_end = self._txq[0]
            take = len(mv)
            if take > cfg.mss:
                payload = mv[:cfg.mss]
                self._txq[0] = (mv[cfg.mss:], chunk_end)
                take = cfg.mss
            else:
                payload = mv
                self._txq.popleft()
            self._tx_pending -= take
            seq = self._next_seq
            self._next_seq += take
            push = self._tx_pending == 0
            st = _SegState(seq, self._next_seq, payload, push, None, now, self.rto_us)
            self._inflight.append(st)
            self._transmit(st)
        if (self._fin_queued and not self._fin_carved and not self._tx_pending
                and len(self._inflight) < cfg.window):
            seq = self._next_seq
            self._next_seq += 1
            st = _SegState(seq, self._next_seq, b"", True, "fin", now, self.rto_us)
            self._fin_carved = True
            self._inflight.append(st)
            self._transmit(st)
        self._arm_timer()

    def _transmit(self, st: _SegState) -> None:
        if st.ctrl == "fin":
            seg = Segment(self.local, self.remote, self.conn_id, "control",
                          seq=st.seq, ctrl="fin")
        else:
            seg = Segment(self.local, self.remote, self.conn_id, "data",
                          seq=st.seq, payload=st.payload, push=st.push)
        self.path.send(seg)

    def _arm_timer(self) -> None:
        if self._timer_pending or not self._inflight:
            return
        head = self._inflight[0]
        self._timer_pending = True
        at = head.last_tx_us + head.rto_us
        now = self.scheduler.now_us
        self.scheduler.schedule(at if at > now else now, self._on_timer, None)

    def _on_timer(self, _) -> None:
        self._timer_pending = False
        if not self._inflight or self.state in (Connection.CLOSED, Connection.BROKEN):
            return
        head = self._inflight[0]
        deadline = head.last_tx_us + head.rto_us
        now = self.scheduler.now_us
        if now < deadline:
            self._timer_pending = True
            self.scheduler.schedule(deadline, self._on_timer, None)
            return
        head.retries += 1
        if head.retries > self.cfg.max_segment_retries:
            self._break("max consecutive retransmissions exceeded")
            return
        head.retransmitted = True
        head.rto_us = min(head.rto_us * 2, self.cfg.rto_max_us)
        head.last_tx_us = now
        self.retx_count += 1
        self.transport.counters.retx += 1
        self._transmit(head)
        self._arm_timer()

    def _on_ack(self, ack: int) -> None:
        if ack <= self._cum_acked or self.state in (Connection.CLOSED, Connection.BROKEN):
            return
        self._cum_acked = ack
        sample = None
        inflight = self._inflight
        now = self.scheduler.now_us
        while inflight and inflight[0].end <= ack:
            st = inflight.popleft()
            if not st.retransmitted:
                sample = now - st.last_tx_us
        if sample is not None:
            self._update_rtt(sample)
        while self._send_waiters and self._send_waiters[0][0] <= ack:
            end, fut, start_us, n = self._send_waiters.popleft()
            self.last_send_duration_us = now - start_us
            fut.set_result(n)
        if self._fin_carved and ack >= self._next_seq and self.state == Connection.ESTABLISHED:
            self.state = Connection.CLOSED
            self._fin_fut.set_result(None)
            return
        self._pump()

    def _update_rtt(self, sample: int) -> None:
        if self.srtt_us is None:
            self.srtt_us = sample
            self._rttvar_us = sample // 2
        else:
            self._rttvar_us = (3 * self._rttvar_us + abs(self.srtt_us - sample)) // 4
            self.srtt_us = (7 * self.srtt_us + sample) // 8
        rto = self.srtt_us + max(4 * self._rttvar_us, _RTO_GRANULARITY_US)
        self.rto_us = min(max(rto, self.cfg.rto_min_us), self.cfg.rto_max_us)

    def _break(self, reason: str) -> None:
        self.state = Connection.BROKEN
        self.break_reason = reason
        err = BrokenConnectionError(reason)
        while self._send_waiters:
            _, fut, _, _ = self._send_waiters.popleft()
            fut.set_exception(err)
        if self._fin_queued and not self._fin_fut.done():
            self._fin_fut.set_result(None)
        if self._rx_waiter is not None:
            fut = self._rx_waiter
            self._rx_waiter = None
            fut.set_exception(err)

    # ---- receiving -------------------------------------------------------

    def _on_data(self, seg: Segment) -> None:
        seq = seg.seq
        immediate = seg.push
        if seq == self._expected:
            self._rx.append(seg.payload)
            self._rx_bytes += len(seg.payload)
            self._expected += len(seg.payload)
            if self._ooo:
                immediate = True
                ooo = self._ooo
                while self._expected in ooo:
                    payload = ooo.pop(self._expected)
                    self._rx.append(payload)
                    self._rx_bytes += len(payload)
                    self._expected += len(payload)
            self._check_remote_fin()
            self._wake_reader()
        elif seq > self._expected:
            if seq not in self._ooo:
                self._ooo[seq] = seg.payload
            immediate = True
        else:
            immediate = True  # duplicate of delivered data: re-ack promptly
        self._note_ack_needed(immediate)

    def _on_fin(self, seg: Segment) -> None:
        if seg.seq < self._expected:
            self._note_ack_needed(True)
            return
        self._remote_fin_seq = seg.seq
        self._check_remote_fin()
        if self._eof:
            self._wake_reader()
        self._note_ack_needed(True)

    def _check_remote_fin(self) -> None:
        if self._remote_fin_seq is not None and self._expected == self._remote_fin_seq:
            self._expected += 1
            self._eof = True

    def _note_ack_needed(self, immediate: bool) -> None:
        self._ack_count += 1
        if self._ack_scheduled:
            return
        if immediate or self._ack_count >= 2:
            self._ack_scheduled = True
            self.scheduler.call_soon(self._emit_ack, None)
        elif not self._ack_timer_armed:
            self._ack_timer_armed = True
            self.scheduler.schedule_in(ACK_DELAY_US, self._on_ack_timer, None)

    def _on_ack_timer(self, _) -> None:
        self._ack_timer_armed = False
        if self._ack_count and not self._ack_scheduled:
            self._ack_scheduled = True
            self.scheduler.call_soon(self._emit_ack, None)

    def _emit_ack(self, _) -> None:
        self._ack_scheduled = False
        self._ack_count = 0
        if self.state == Connection.BROKEN:
            return
        seg = Segment(self.local, self.remote, self.conn_id, "ack", ack=self._expected)
        self.path.send(seg)

    def recv(self, max_bytes: int) -> Future:
        """Resolve with up to max_bytes in-order bytes; b'' marks end of stream."""
        if self._rx_waiter is not None:
            raise ConnectionStateError("concurrent recv on one connection")
        fut = Future()
        if self._rx_bytes:
            fut.set_result(self._gather(max_bytes))
        elif self._eof:
            fut.set_result(b"")
        elif self.state == Connection.BROKEN:
            fut.set_exception(BrokenConnectionError(self.break_reason or "broken"))
        else:
            self._rx_waiter = fut
            self._rx_max = max_bytes
        return fut

    def _gather(self, max_bytes: int) -> bytes:
        rx = self._rx
        first = rx[0]
        if len(first) <= max_bytes and (len(rx) == 1 or len(first) == max_bytes):
            rx.popleft()
            self._rx_bytes -= len(first)
            return bytes(first)
        out = bytearray()
        room = max_bytes
        while rx and room:
            chunk = rx[0]
            if len(chunk) <= room:
                rx.popleft()
                out += chunk
                room -= len(chunk)
            else:
                out += chunk[:room]
                rx[0] = chunk[room:]
                room = 0
        self._rx_bytes -= len(out)
        return bytes(out)

    def _wake_reader(self) -> None:
        if self._rx_waiter is not None and not self._rx_wake_pending:
            self._rx_wake_pending = True
            self.scheduler.call_soon(self._service_reader, None)

    def _service_reader(self, _) -> None:
        self._rx_wake_pending = False
        fut = self._rx_waiter
        if fut is None:
            return
        if self._rx_bytes:
            self._rx_waiter = None
            fut.set_result(self._gather(self._rx_max))
        elif self._eof:
            self._rx_waiter = None
            fut.set_result(b"")

    # ---- instrumentation ---------------------------------------------------

    def component_timers(self) -> dict:
        """Most recent send duration plus the cumulative retransmit count."""
        return {"t_send_us": self.last_send_duration_us,
                "t_retx_count": self.retx_count}


class Listener:
    __slots__ = ("port", "on_accept", "handshake_rtts")

    def __init__(self, port, on_accept, handshake_rtts):
        self.port = port
        self.on_accept = on_accept
        self.handshake_rtts = handshake_rtts


class _Counters:
    __slots__ = ("retx",)

    def __init__(self):
        self.retx = 0


class NodeTransport:
    """Per-node segment demux plus connection factory."""

    def __init__(self, node_id, scheduler, conn_id_alloc, counters=None,
                 cfg: TransportConfig = DEFAULT_TRANSPORT_CONFIG):
        self.node_id = node_id
        self.scheduler = scheduler
        self.cfg = cfg
        self.counters = counters if counters is not None else _Counters()
        self._alloc = conn_id_alloc
        self._conns: dict[int, Connection] = {}
        self._listeners: dict[int, Listener] = {}

    def listen(self, port: int, on_accept, handshake_rtts: int | None = None) -> Listener:
        if port in self._listeners:
            raise ConnectionStateError(f"port {port} already has a listener on {self.node_id}")
        lst = Listener(port, on_accept, handshake_rtts)
        self._listeners[port] = lst
        return lst

    def connect(self, fwd_path: Path, rev_path: Path, dst_port: int,
                cfg: TransportConfig | None = None,
                handshake_rtts: int | None = None) -> Future:
        """Open a connection; resolves with it once the handshake completes."""
        cfg = cfg or self.cfg
        rtts = handshake_rtts if handshake_rtts is not None else cfg.handshake_rtts
        conn_id = self._alloc()
        conn = Connection(self, conn_id, fwd_path, cfg, rtts)
        self._conns[conn_id] = conn
        return conn._start_connect(dst_port, rev_path)

    def on_segment(self, seg: Segment) -> None:
        kind = seg.kind
        if kind == "data":
            conn = self._conns.get(seg.conn_id)
            if conn is not None:
                conn._on_data(seg)
            return
        if kind == "ack":
            conn = self._conns.get(seg.conn_id)
            if conn is not None:
                conn._on_ack(seg.ack)
            return
        # control plane
        ctrl = seg.ctrl
        if ctrl == "syn":
            self._on_syn(seg)
        elif ctrl == "hs":
            conn = self._conns.get(seg.conn_id)
            if conn is not None:
                if getattr(conn, "_listener", None) is not None:
                    self._serve_handshake(conn, seg)
                else:
                    conn._on_hs_request(seg)
        elif ctrl == "hs-ack":
            conn = self._conns.get(seg.conn_id)
            if conn is not None:
                conn._on_hs_ack(seg)
        elif ctrl == "fin":
            conn = self._conns.get(seg.conn_id)
            if conn is not None:
                conn._on_fin(seg)

    def _on_syn(self, seg: Segment) -> None:
        conn = self._conns.get(seg.conn_id)
        if conn is not None:
            conn._on_hs_request(seg)  # duplicate SYN: re-ack
            return
        listener = self._listeners.get(seg.port)
        if listener is None:
            return  # nothing listening: the initiator will time out
        rev_path, rtts = seg.meta
        required = listener.handshake_rtts if listener.handshake_rtts is not None else rtts
        conn = Connection(self, seg.conn_id, rev_path, self.cfg, required)
        conn.remote = seg.src
        self._conns[seg.conn_id] = conn
        conn._accept_rounds = required
        conn._accepted = False
        conn._listener = listener
        self._serve_handshake(conn, seg)

    def _serve_handshake(self, conn: Connection, seg: Segment) -> None:
        conn._on_hs_request(seg)
        if not conn._accepted and seg.seq >= conn._accept_rounds - 1:
            conn._accepted = True
            conn.state = Connection.ESTABLISHED
            self.scheduler.call_soon(conn._listener.on_accept, conn)
