"""Netem-style egress impairment: per-link delay, jitter and random loss.

Each directed link applies a one-way impairment profile to every segment it
transmits.  Scenario presets encode the standard test conditions; the name
carries the added round-trip time between two nodes (edg10 adds 5 ms on each
interface's egress, i.e. +10 ms RTT).

Jitter is sampled uniformly on [delay - jitter, delay + jitter] with no
correlation between consecutive segments (netem's default behaviour when no
distribution is configured).  Reordering under jitter is allowed; the
transport above is responsible for putting the stream back together.
"""

from __future__ import annotations

from dataclasses import dataclass

from .timebase import US_PER_MS

# One-way latency of an unimpaired hop, standing in for a Gigabit LAN.
DEFAULT_BASE_LATENCY_US = 200

# Fixed per-segment header cost used for wire-byte accounting (IP+transport).
SEGMENT_HEADER_BYTES = 40


class UnknownScenarioError(ValueError):
    """Raised for scenario names outside the shipped preset table."""


@dataclass(frozen=True, slots=True)
class ImpairmentProfile:
    """One-way per-interface impairment triple (the scenario knob)."""

    delay_ms: float = 0.0
    jitter_ms: float = 0.0
    loss_prob: float = 0.0

    def __post_init__(self) -> None:
        if self.delay_ms < 0 or self.jitter_ms < 0:
            raise ValueError("delay_ms and jitter_ms must be >= 0")
        if not 0.0 <= self.loss_prob <= 1.0:
            raise ValueError("loss_prob must be within [0, 1]")

    @property
    def is_passthrough(self) -> bool:
        return self.delay_ms == 0.0 and self.jitter_ms == 0.0 and self.loss_prob == 0.0


def _pct(value: float) -> float:
    return value / 100.0

# Preset table: scenario -> (one-way delay ms, jitter ms, loss probability).
# Loss entries are written as percent/100 so they match the shipped config
# file bit-exactly after parsing.
SCENARIOS: dict[str, ImpairmentProfile] = {
    "lcl": ImpairmentProfile(0.0, 0.0, _pct(0.0)),
    "edg2.5": ImpairmentProfile(1.25, 0.25, _pct(0.02)),
    "edg5": ImpairmentProfile(2.5, 0.5, _pct(0.04)),
    "edg10": ImpairmentProfile(5.0, 1.0, _pct(0.08)),
    "edg15": ImpairmentProfile(7.5, 1.5, _pct(0.12)),
    "edg20": ImpairmentProfile(10.0, 2.0, _pct(0.16)),
}

SCENARIO_ORDER = ("lcl", "edg2.5", "edg5", "edg10", "edg15", "edg20")


def preset(name: str) -> ImpairmentProfile:
    """Look up a scenario preset by name."""
    try:
        return SCENARIOS[name]
    except KeyError:
        raise UnknownScenarioError(
            f"unknown scenario {name!r}; valid names: {', '.join(SCENARIO_ORDER)}"
        ) from None


def load_scenario_table(path) -> dict[str, ImpairmentProfile]:
    """Parse a plain-text scenario table: `name delay_ms jitter_ms loss_pct`.

    Blank lines and `#` comments are skipped.  The shipped configs/scenarios.cfg
    reproduces the preset table exactly.
    """
    table: dict[str, ImpairmentProfile] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 4:
                raise ValueError(f"{path}:{lineno}: expected 4 columns, got {len(parts)}")
            name, delay, jitter, loss_pct = parts
            table[name] = ImpairmentProfile(
                delay_ms=float(delay),
                jitter_ms=float(jitter),
                loss_prob=float(loss_pct) / 100.0,
            )
    return table


class Segment:
    """Unit of loss and delay on a link; also the transport's wire unit.

    kind is 'data' for application payload, 'ack' for cumulative
    acknowledgements and 'control' for handshake/teardown exchanges.
    """

    __slots__ = ("src", "dst", "conn_id", "kind", "seq", "ack", "payload",
                 "ctrl", "port", "push", "meta")

    def __init__(self, src, dst, conn_id, kind, seq=0, ack=0, payload=b"",
                 ctrl=None, port=0, push=False, meta=None):
        self.src = src
        self.dst = dst
        self.conn_id = conn_id
        self.kind = kind
        self.seq = seq
        self.ack = ack
        self.payload = payload
        self.ctrl = ctrl
        self.port = port
        self.push = push
        self.meta = meta

    def __repr__(self) -> str:  # debugging aid only
        body = f" len={len(self.payload)}" if self.payload else ""
        ctrl = f" {self.ctrl}" if self.ctrl else ""
        return (f"<Segment {self.kind}{ctrl} conn={self.conn_id} seq={self.seq}"
                f" ack={self.ack}{body} {self.src}->{self.dst}>")


class Link:
    """Directed impaired pipe between two nodes.

    Loss is decided at egress time (before any delivery is scheduled), so the
    sent/dropped counters are valid without draining the event queue.  Taps
    observe every transmit attempt, including dropped segments.
    """

    __slots__ = ("src", "dst", "profile", "base_latency_us", "rng", "scheduler",
                 "sent", "dropped", "wire_bytes", "data_wire_bytes",
                 "data_segments", "taps", "blocked", "_force_drops", "_delay_us",
                 "_jit_lo_us", "_jit_hi_us")

    def __init__(self, src, dst, profile, rng, scheduler,
                 base_latency_us=DEFAULT_BASE_LATENCY_US):
        self.src = src
        self.dst = dst
        self.profile = profile
        self.base_latency_us = base_latency_us
        self.rng = rng
        self.scheduler = scheduler
        self.sent = 0
        self.dropped = 0
        self.wire_bytes = 0
        self.data_wire_bytes = 0
        self.data_segments = 0
        self.taps: list = []
        self.blocked = False  # firewall/NAT stand-in: drop without sampling
        self._force_drops = 0
        self._delay_us = round(profile.delay_ms * US_PER_MS)
        self._jit_lo_us = round((profile.delay_ms - profile.jitter_ms) * US_PER_MS)
        self._jit_hi_us = round((profile.delay_ms + profile.jitter_ms) * US_PER_MS)

    def add_tap(self, tap) -> None:
        self.taps.append(tap)

    def force_drop_next(self, count: int = 1) -> None:
        """Deterministically drop the next `count` data segments (test hook)."""
        self._force_drops += count

    def transmit(self, seg: Segment, deliver, arg, extra_bytes: int = 0) -> bool:
        """Apply loss/delay; schedule deliver(arg) unless the segment drops."""
        self.sent += 1
        wire = SEGMENT_HEADER_BYTES + len(seg.payload) + extra_bytes
        self.wire_bytes += wire
        if seg.kind == "data":
            self.data_segments += 1
            self.data_wire_bytes += wire
        if self.taps:
            for tap in self.taps:
                tap(self, seg)
        if self.blocked:
            self.dropped += 1
            return False
        if self._force_drops and seg.kind == "data":
            self._force_drops -= 1
            self.dropped += 1
            return False
        profile = self.profile
        if profile.loss_prob > 0.0 and self.rng.random() < profile.loss_prob:
            self.dropped += 1
            return False
        delay_us = self.base_latency_us
        if profile.jitter_ms > 0.0:
            sampled = round(self.rng.uniform(self._jit_lo_us, self._jit_hi_us))
            delay_us += sampled if sampled > 0 else 0
        else:
            delay_us += self._delay_us
        self.scheduler.schedule(self.scheduler.now_us + delay_us, deliver, arg)
        return True

    def loss_stats(self) -> dict:
        return {"sent": self.sent, "dropped": self.dropped}

    def reset_counters(self) -> None:
        self.sent = 0
        self.dropped = 0
        self.wire_bytes = 0
        self.data_wire_bytes = 0
        self.data_segments = 0
        self._force_drops = 0
