"""Benchmark services over a minimal HTTP/1.1-subset protocol.

Wire format (keep-alive, content-length framing only; no chunking, no
compression):

    request:   POST /<function>\\r\\ncontent-length: N\\r\\n\\r\\n<body>
    response:  200\\r\\ncontent-length: M\\r\\n\\r\\n<body>

The three service functions mirror the standard benchmark workloads:
payload-echo returns the request body unchanged, payload-recv acknowledges
with an empty body, static-reply returns a fixed 1000-byte message for any
request.  Handlers run sequentially per connection; separate connections are
served concurrently.

Application and host processing delays default to zero (virtual time does not
advance while handlers compute) and can be made synthetic via per-service cost
knobs, so transport effects can be isolated or not as needed.
"""

from __future__ import annotations

from dataclasses import dataclass

from .transport import BrokenConnectionError

RECV_CHUNK = 65536

# Requests whose body fits under this bound are serialized into one buffer;
# larger bodies are queued separately to avoid copying megabytes per request.
JOIN_LIMIT = 65536

_PATTERN_BLOCK = bytes(range(256)) * 16  # 4096 deterministic bytes
_pattern_cache: dict[int, bytes] = {}


def payload_bytes(n: int) -> bytes:
    """Deterministic request body of length n (cached per size)."""
    body = _pattern_cache.get(n)
    if body is None:
        body = (_PATTERN_BLOCK * (n // len(_PATTERN_BLOCK) + 1))[:n]
        _pattern_cache[n] = body
    return body


STATIC_REPLY_BODY = (b"speed=88;length=12;position=51.3;heading=ne;lane=2;" * 20)[:1000]


class MalformedMessage(ValueError):
    pass


@dataclass(slots=True)
class HttpMessage:
    kind: str                 # request | response
    body: bytes
    method: str = ""
    target: str = ""
    status: int = 0

    @property
    def content_length(self) -> int:
        return len(self.body)


def serialize_request(function: str, body) -> list:
    """Buffers for one request; callers send them back to back."""
    head = f"POST /{function}\r\ncontent-length: {len(body)}\r\n\r\n".encode()
    if len(body) <= JOIN_LIMIT:
        return [head + bytes(body)]
    return [head, body]


def serialize_response(status: int, body) -> list:
    head = f"{status}\r\ncontent-length: {len(body)}\r\n\r\n".encode()
    if len(body) <= JOIN_LIMIT:
        return [head + bytes(body)]
    return [head, body]


class WireParser:
    """Incremental parser; feed() arbitrary chunks, pop complete messages.

    Robust to any segmentation of the byte stream, including splits inside
    the header terminator and inside the body.
    """

    def __init__(self) -> None:
        self._buf = bytearray()
        self._scan = 0
        self._need = None   # (message-sans-body, body_len) once headers parsed

    def feed(self, data) -> None:
        self._buf += data

    @property
    def pending_bytes(self) -> int:
        return len(self._buf)

    def pop_message(self) -> HttpMessage | None:
        if self._need is None:
            idx = self._buf.find(b"\r\n\r\n", self._scan)
            if idx < 0:
                # keep re-scanning only near the tail
                self._scan = max(0, len(self._buf) - 3)
                return None
            head = bytes(self._buf[:idx])
            del self._buf[:idx + 4]
            self._scan = 0
            self._need = self._parse_head(head)
        msg, body_len = self._need
        if len(self._buf) < body_len:
            return None
        msg.body = bytes(self._buf[:body_len])
        del self._buf[:body_len]
        self._need = None
        return msg

    @staticmethod
    def _parse_head(head: bytes) -> tuple[HttpMessage, int]:
        lines = head.split(b"\r\n")
        start = lines[0].strip()
        if not start:
            raise MalformedMessage("empty start line")
        length = None
        for line in lines[1:]:
            if not line.strip():
                continue
            name, sep, value = line.partition(b":")
            if not sep:
                raise MalformedMessage(f"bad header line {line!r}")
            if name.strip().lower() == b"content-length":
                try:
                    length = int(value.strip())
                except ValueError:
                    raise MalformedMessage(f"bad content-length {value!r}") from None
        if length is None or length < 0:
            raise MalformedMessage("missing content-length")
        parts = start.split()
        if parts[0].isdigit():
            if len(parts) != 1:
                raise MalformedMessage(f"bad status line {start!r}")
            msg = HttpMessage("response", b"", status=int(parts[0]))
        else:
            if len(parts) != 2 or not parts[1].startswith(b"/"):
                raise MalformedMessage(f"bad request line {start!r}")
            msg = HttpMessage("request", b"", method=parts[0].decode("ascii", "replace"),
                              target=parts[1].decode("ascii", "replace"))
        return msg, length


def read_message(conn, parser: WireParser):
    """Task helper: read one complete message; None on clean end of stream."""
    while True:
        msg = parser.pop_message()
        if msg is not None:
            return msg
        data = yield conn.recv(RECV_CHUNK)
        if data == b"":
            if parser.pending_bytes:
                raise MalformedMessage("stream ended mid-message")
            return None
        parser.feed(data)


# ---- service functions ----------------------------------------------------

def payload_echo(request: HttpMessage) -> HttpMessage:
    return HttpMessage("response", request.body, status=200)


def payload_recv(request: HttpMessage) -> HttpMessage:
    return HttpMessage("response", b"", status=200)


def static_reply(request: HttpMessage) -> HttpMessage:
    return HttpMessage("response", STATIC_REPLY_BODY, status=200)


FUNCTIONS = {
    "payload-echo": payload_echo,
    "payload-recv": payload_recv,
    "static-reply": static_reply,
}


class Service:
    """A served function plus per-request timing capture.

    Timings are keyed by (connection id, request ordinal on that connection)
    so the load generator can attribute the decomposition components without
    widening the wire format.
    """

    def __init__(self, function: str, scheduler,
                 host_proc_us: int = 0,
                 app_fixed_us: int = 0, app_us_per_byte: float = 0.0):
        self.function = function
        self.handler = FUNCTIONS[function]
        self.scheduler = scheduler
        self.host_proc_us = host_proc_us
        self.app_fixed_us = app_fixed_us
        self.app_us_per_byte = app_us_per_byte
        self.timings: dict[tuple[int, int], tuple[int, int, int]] = {}
        self.served = 0
        self.last_app_proc_us: int | None = None

    def on_accept(self, conn) -> None:
        self.scheduler.spawn(self._serve(conn))

    def _serve(self, conn):
        parser = WireParser()
        ordinal = 0
        sched = self.scheduler
        while True:
            try:
                msg = yield from read_message(conn, parser)
            except (MalformedMessage, BrokenConnectionError) as err:
                if isinstance(err, MalformedMessage):
                    for buf in serialize_response(400, b""):
                        conn.send(buf)
                    conn.close()
                return
            if msg is None:
                conn.close()
                return
            t_parsed = sched.now_us
            if self.host_proc_us:
                yield sched.sleep(self.host_proc_us)
            t_start = sched.now_us
            response = self.handler(msg)
            app_cost = self.app_fixed_us + round(self.app_us_per_byte * len(msg.body))
            if app_cost:
                yield sched.sleep(app_cost)
            t_end = sched.now_us
            self.timings[(conn.conn_id, ordinal)] = (t_parsed, t_start, t_end)
            self.served += 1
            self.last_app_proc_us = t_end - t_start
            ordinal += 1
            for buf in serialize_response(response.status, response.body):
                conn.send(buf)

    def app_proc_timer(self) -> int | None:
        """t_appproc of the most recently served request (None before any)."""
        return self.last_app_proc_us

    def timing_for(self, conn_id: int, ordinal: int):
        return self.timings.get((conn_id, ordinal))


@dataclass(frozen=True, slots=True)
class UseCaseSpec:
    name: str
    function: str
    request_sizes: tuple[int, ...]
    response_size: object        # byte count, or "echo" for request-sized
    kpi_max_response_ms: float

    def __post_init__(self) -> None:
        if self.kpi_max_response_ms <= 0:
            raise ValueError("kpi_max_response_ms must be positive")
        if self.function not in FUNCTIONS:
            raise ValueError(f"unknown function {self.function!r}")

    def expected_response_size(self, request_size: int) -> int:
        if self.response_size == "echo":
            return request_size
        return int(self.response_size)


USECASE_SHORT_NAMES = {
    "remote-maintenance-inference": "inference",
    "remote-maintenance-training": "training",
    "vehicle-decision-assist": "vehicle",
}

_MAINTENANCE_SIZES = (60, 1024, 2048, 10240, 102400, 1048576)


def standard_usecases() -> tuple[UseCaseSpec, ...]:
    """The shipped use-case matrix (payload ladders and KPI ceilings)."""
    return (
        UseCaseSpec("remote-maintenance-inference", "payload-echo",
                    _MAINTENANCE_SIZES, "echo", 1000.0),
        UseCaseSpec("remote-maintenance-training", "payload-recv",
                    _MAINTENANCE_SIZES, 0, 1000.0),
        UseCaseSpec("vehicle-decision-assist", "static-reply",
                    (0,), len(STATIC_REPLY_BODY), 100.0),
    )


_SIZE_SUFFIXES = {"b": 1, "kb": 1024, "k": 1024, "mb": 1024 * 1024, "m": 1024 * 1024}


def parse_size(text: str) -> int:
    """Parse '60B', '1KB', '1MB' style sizes (binary units)."""
    s = text.strip().lower()
    for suffix in sorted(_SIZE_SUFFIXES, key=len, reverse=True):
        if s.endswith(suffix):
            digits = s[: -len(suffix)].strip()
            if digits:
                return int(digits) * _SIZE_SUFFIXES[suffix]
    return int(s)


def size_label(n: int) -> str:
    """Compact size label for file names: 60b, 1k, 100k, 1m."""
    if n >= 1024 * 1024 and n % (1024 * 1024) == 0:
        return f"{n // (1024 * 1024)}m"
    if n >= 1024 and n % 1024 == 0:
        return f"{n // 1024}k"
    return f"{n}b"
