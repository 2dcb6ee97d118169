"""MAC-side state and decisions for 802.11 DCF, two-slot AF cooperation and
cooperative overlapped ANC.

Functions here are run-to-completion handlers invoked by the event engine;
they mutate the :class:`NodeState` they are given and return whatever the
engine must put on the air next. Times are integer nanoseconds.
"""
from __future__ import annotations

import math
from collections import OrderedDict, deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Deque, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import rates
from .phy import relay_gain

US = 1000  # nanoseconds per microsecond


class FrameKind(str, Enum):
    RTS = "RTS"
    CTS = "CTS"
    CTC = "CTC"
    DATA = "DATA"
    ACK = "ACK"
    BUSY_TONE = "BUSY_TONE"


class Mode(str, Enum):
    DIRECT = "DIRECT"
    COOP = "COOP"
    ANCOL = "ANCOL"


class Outcome(str, Enum):
    SUCCESS = "success"
    COLLISION = "collision"
    FAILURE = "failure"


@dataclass(frozen=True)
class Timing:
    slot: int
    sifs: int
    difs: int
    rts: int
    cts: int
    ack: int
    ctc: int
    preamble: int
    symbol_rate: float

    @classmethod
    def from_config(cls, cfg) -> "Timing":
        def ns(us):
            return int(round(us * US))
        return cls(ns(cfg.slot), ns(cfg.sifs_us), ns(cfg.difs_us), ns(cfg.rts_us),
                   ns(cfg.cts_us), ns(cfg.ack_us), ns(cfg.ctc_us),
                   ns(cfg.phy_preamble_us), cfg.bandwidth_hz)

    def data(self, n_symbols: int) -> int:
        return self.preamble + int(math.ceil(n_symbols / self.symbol_rate * 1e9))

    def overhead(self, rbkf_slots: int = 0) -> rates.OverheadProfile:
        s = 1e-9
        return rates.OverheadProfile(self.rts * s, self.cts * s, self.ctc * s,
                                     self.sifs * s, self.slot * s,
                                     rbkf_slots * self.slot * s)


Estimate = Tuple[Tuple[int, int], complex]


@dataclass
class Frame:
    kind: FrameKind
    src: int
    dsts: Tuple[int, ...] = ()
    payload_bits: int = 0
    piggyback: List[Estimate] = field(default_factory=list)
    duration: int = 0
    # RTS: its own (src, dst); CTC: the flows it grants.
    flows: Tuple[Tuple[int, int], ...] = ()

    def valid(self, slot: Optional[int] = None) -> bool:
        if self.kind is FrameKind.BUSY_TONE:
            return not self.dsts and (slot is None or self.duration == slot)
        if self.kind is FrameKind.CTC:
            return len(self.dsts) == 2 and len(set(self.dsts)) == 2 and bool(self.flows)
        return len(self.dsts) == 1


@dataclass
class AnflEntry:
    src1: int
    dst1: int
    src2: Optional[int]
    dst2: Optional[int]
    relay: int
    last_seen: int = 0

    @property
    def key(self):
        return (self.src1, self.dst1, self.src2, self.dst2, self.relay)

    def nodes(self):
        return {n for n in (self.src1, self.dst1, self.src2, self.dst2) if n is not None}

    def sources(self):
        return {n for n in (self.src1, self.src2) if n is not None}


class AnflTable:
    """Bounded record of overheard cooperative flows, least recently seen
    entry evicted first."""

    def __init__(self, capacity: int = 20):
        self.capacity = capacity
        self._rows: "OrderedDict[tuple, AnflEntry]" = OrderedDict()
        self._groups: Optional[Dict[int, Tuple[set, set]]] = None

    def __len__(self):
        return len(self._rows)

    def __iter__(self):
        return iter(self._rows.values())

    def insert(self, entry: AnflEntry) -> bool:
        if entry.relay in entry.nodes():
            return False
        old = self._rows.get(entry.key)
        if old is not None:
            old.last_seen = entry.last_seen
            self._rows.move_to_end(entry.key)
            return True
        self._rows[entry.key] = entry
        while len(self._rows) > self.capacity:
            self._rows.popitem(last=False)
        self._groups = None
        return True

    def relays(self) -> List[int]:
        return sorted({e.relay for e in self._rows.values()})

    def participants(self, relay: int) -> set:
        out = set()
        for e in self._rows.values():
            if e.relay == relay:
                out |= e.nodes()
        return out

    def sources(self, relay: int) -> set:
        out = set()
        for e in self._rows.values():
            if e.relay == relay:
                out |= e.sources()
        return out

    def by_relay(self) -> Dict[int, Tuple[set, set]]:
        """``relay -> (participants, sources)`` for every relay. Cached until
        the table changes; treat the result as read-only."""
        if self._groups is None:
            out: Dict[int, Tuple[set, set]] = {}
            for e in self._rows.values():
                users, srcs = out.setdefault(e.relay, (set(), set()))
                users |= e.nodes()
                srcs |= e.sources()
            self._groups = out
        return self._groups

    def purge(self, node: int) -> int:
        dead = [k for k, e in self._rows.items()
                if node == e.relay or node in e.nodes()]
        for k in dead:
            del self._rows[k]
        if dead:
            self._groups = None
        return len(dead)


@dataclass
class Packet:
    dst: int
    bits: int
    hol: int
    seq: int


@dataclass
class NodeState:
    id: int
    cw_min: int = 16
    cw_max: int = 1024
    retry_limit: int = 7
    anfl_capacity: int = 20
    reciprocal: bool = True
    cw: int = 0
    backoff: int = 0
    retry: int = 0
    queue: Deque[Packet] = field(default_factory=deque)
    anfl: AnflTable = None
    est: Dict[Tuple[int, int], Tuple[complex, int]] = field(default_factory=dict)
    flows: Dict[int, Tuple[int, int]] = field(default_factory=dict)
    rate_estimates: Dict[tuple, rates.RateEstimateRow] = field(default_factory=dict)
    malformed: int = 0

    def __post_init__(self):
        if not self.cw:
            self.cw = self.cw_min
        if self.anfl is None:
            self.anfl = AnflTable(self.anfl_capacity)

    def _key(self, tx: int, rx: int):
        if self.reciprocal and tx > rx:
            return (rx, tx)
        return (tx, rx)

    # _key is inlined below; these two sit on the hottest path of a run.
    def store_estimate(self, tx: int, rx: int, h: complex, now: int) -> None:
        self.est[(rx, tx) if self.reciprocal and tx > rx else (tx, rx)] = (h, now)

    def estimate(self, tx: int, rx: int, now: Optional[int] = None,
                 max_age: Optional[int] = None) -> Optional[complex]:
        """Stored estimate of the ``tx -> rx`` link, or ``None`` when missing
        (or older than ``max_age`` if given)."""
        got = self.est.get((rx, tx) if self.reciprocal and tx > rx else (tx, rx))
        if got is None:
            return None
        if max_age is not None and now is not None and now - got[1] > max_age:
            return None
        return got[0]


def dcf_backoff(state: NodeState, outcome: Outcome,
                rng: np.random.Generator) -> bool:
    """Binary exponential backoff after an attempt. Returns ``True`` when the
    head-of-line packet has exhausted its retries and must be dropped."""
    dropped = False
    if outcome is Outcome.SUCCESS:
        state.cw = state.cw_min
        state.retry = 0
    else:
        state.retry += 1
        state.cw = min(2 * state.cw, state.cw_max)
        if state.retry > state.retry_limit:
            dropped = True
            state.cw = state.cw_min
            state.retry = 0
    state.backoff = int(rng.integers(0, state.cw + 1))
    return dropped


def on_overhear(state: NodeState, frame: Frame, measured_gain: Optional[complex],
                now: int, slot: Optional[int] = None) -> Optional[Frame]:
    """Channel estimation and information exchange for one decoded frame.

    Returns the CTS to send back when ``frame`` is an RTS addressed to this
    node, otherwise ``None``.
    """
    if not frame.valid(slot) or frame.src == state.id:
        state.malformed += 1
        return None
    me = state.id
    kind = frame.kind
    if kind is FrameKind.RTS:
        if measured_gain is not None:
            state.store_estimate(frame.src, me, measured_gain, now)
        state.flows[frame.src] = (frame.dsts[0], now)
        if frame.dsts[0] != me:
            return None
        payload: List[Estimate] = []
        if measured_gain is not None:
            payload.append(((frame.src, me), measured_gain))
        seen = {frame.src, me}
        groups = state.anfl.by_relay()
        for r in sorted(groups):
            users, srcs = groups[r]
            if frame.src not in users and me not in users:
                continue
            for other in sorted(srcs - seen - {r}):
                h = state.estimate(other, me)
                if h is not None:
                    payload.append(((other, me), h))
                    seen.add(other)
        return Frame(FrameKind.CTS, me, (frame.src,), piggyback=payload)
    if kind is FrameKind.CTS:
        # Every bystander is a relay candidate, so all of them estimate.
        if measured_gain is not None:
            state.store_estimate(frame.src, me, measured_gain, now)
        store, own = state.store_estimate, (frame.dsts[0], frame.src)
        for link, h in frame.piggyback:
            if me not in link or link == own:
                store(link[0], link[1], h, now)
        return None
    if kind is FrameKind.CTC:
        if measured_gain is not None:
            state.store_estimate(frame.src, me, measured_gain, now)
        anfl_maintain(state, "ctc_overheard", now, entry=ctc_entry(frame, now))
        return None
    return None


def ctc_entry(frame: Frame, now: int) -> AnflEntry:
    (s1, d1) = frame.flows[0]
    s2, d2 = frame.flows[1] if len(frame.flows) > 1 else (None, None)
    return AnflEntry(s1, d1, s2, d2, frame.src, now)


def anfl_maintain(state: NodeState, event: str, now: int,
                  node: Optional[int] = None,
                  entry: Optional[AnflEntry] = None) -> NodeState:
    if event == "ctc_overheard":
        entry.last_seen = now
        state.anfl.insert(entry)
    elif event == "disassociation":
        state.anfl.purge(node)
        for key in [k for k in state.est if node in k]:
            del state.est[key]
        state.flows.pop(node, None)
        for src in [s for s, (d, _) in state.flows.items() if d == node]:
            del state.flows[src]
        for key in [k for k in state.rate_estimates if node in _row_nodes(k)]:
            del state.rate_estimates[key]
    else:
        raise ValueError("unknown anfl event %r" % event)
    return state


def _row_nodes(key) -> set:
    out = set()
    for part in key:
        if isinstance(part, tuple):
            out.update(part)
        elif part is not None:
            out.add(part)
    return out


@dataclass(frozen=True)
class RelayContext:
    W: float
    P: float
    noise_var: float
    L: int
    n_max: int
    timing: Timing
    coop_on: bool = True
    ancol_on: bool = True
    coop_form: str = "paper"
    mode_rule: str = "rates"
    backlog_window: int = 50_000 * US
    max_age: Optional[int] = None


@dataclass
class RelayPlan:
    relay: int
    mode: Mode
    tone_slot: int
    r_norm: float
    slots: int
    r_dir: float
    r_coop: float
    r_ancol: Optional[float] = None
    partner: Optional[Tuple[int, int]] = None


@dataclass
class ModeDecision:
    mode: Mode
    relay: Optional[int] = None
    secondary_pair: Optional[Tuple[int, int]] = None
    expected_rate: float = 0.0

    def __post_init__(self):
        if (self.relay is None) != (self.mode is Mode.DIRECT):
            raise ValueError("relay must be set iff mode is not DIRECT")
        if (self.secondary_pair is None) == (self.mode is Mode.ANCOL):
            raise ValueError("secondary pair must be set iff mode is ANCOL")


def relay_overhear(state: NodeState, rts: Frame, cts: Frame, now: int,
                   ctx: RelayContext) -> Optional[RelayPlan]:
    """Rate estimation at a bystander once an RTS/CTS exchange completed.

    Fills ``state.rate_estimates`` and returns the busy-tone/CTC plan, or
    ``None`` if the relay stays silent.
    """
    s, d, r = rts.src, cts.src, state.id
    if r in (s, d) or not ctx.coop_on:
        return None
    h1 = None
    for (tx, rx), h in cts.piggyback:
        if (tx, rx) == (s, d):
            h1 = h
            break
    h2 = state.estimate(s, r, now, ctx.max_age)
    h4 = state.estimate(r, d, now, ctx.max_age)
    if h1 is None or h2 is None or h4 is None:
        return None
    W, P, nv = ctx.W, ctx.P, ctx.noise_var
    g1, g2, g4 = abs(h1) ** 2, abs(h2) ** 2, abs(h4) ** 2
    g_coop = relay_gain(P, [g2], nv)
    rd = rates.r_dir(W, P, g1, nv)
    rc = rates.r_coop(W, P, g1, g2, g4, g_coop, nv, ctx.coop_form)
    state.rate_estimates[((s, d), None, None)] = rates.RateEstimateRow((s, d), rd)
    state.rate_estimates[((s, d), None, r)] = rates.RateEstimateRow(
        (s, d), rd, relay=r, r_coop=rc)

    if not rc > rd:
        return None
    L = ctx.L
    coop_norm = rates.normalize_rate_gain(rc, rd)
    coop_slots = rates.relay_backoff_slots(coop_norm, ctx.n_max)
    if ctx.mode_rule == "overhead":
        ovhd_coop = rates.protocol_overhead(ctx.timing.overhead(coop_slots))
        if not rates.coop_beneficial(L, rc, rd, ovhd_coop):
            return None
    # Partner rows only matter once the cooperation guard has passed.
    best = None
    if ctx.ancol_on:
        est, age, window = state.estimate, ctx.max_age, ctx.backlog_window
        for s2 in sorted(state.flows):
            d2, seen = state.flows[s2]
            if now - seen > window:
                continue
            if len({s, d, s2, d2, r}) < 5:
                continue
            h7 = est(s2, r, now, age)
            h8 = est(s2, d, now, age)
            h6 = est(s2, d2, now, age)
            h3 = est(s, d2, now, age)
            h5 = est(r, d2, now, age)
            if None in (h7, h8, h6, h3, h5):
                continue
            g_anc = relay_gain(P, [g2, abs(h7) ** 2], nv)
            ra = rates.r_ancol_both(W, P, (h1, h2, h4, h7, h8),
                                    (h6, h7, h5, h2, h3), g_anc, nv)
            state.rate_estimates[((s, d), (s2, d2), r)] = rates.RateEstimateRow(
                (s, d), rd, pair2=(s2, d2), relay=r, r_ancol=ra)
            if best is None or ra > best[0]:
                best = (ra, (s2, d2))

    plan = RelayPlan(r, Mode.COOP, 2, coop_norm, coop_slots, rd, rc)
    if best is not None and best[0] > rc:
        ra, partner = best
        norm = rates.normalize_rate_gain(ra, rd)
        slots = rates.relay_backoff_slots(norm, ctx.n_max)
        ok = True
        if ctx.mode_rule == "overhead":
            ok = rates.ancol_beneficial(
                L, ra, rc, rates.protocol_overhead(ctx.timing.overhead(slots)),
                rates.protocol_overhead(ctx.timing.overhead(coop_slots)))
        if ok:
            plan = RelayPlan(r, Mode.ANCOL, 1, norm, slots, rd, rc, ra, partner)
    return plan


@dataclass
class ContentionResult:
    winner: Optional[int]
    slots: int
    tied: Tuple[int, ...] = ()


def relay_contention(relays: Sequence[Tuple[int, float]], n_max: int) -> ContentionResult:
    """Slot race among armed relays; the fewest backoff slots wins. Equal
    minima transmit together and their CTCs collide (``winner=None``)."""
    if not relays:
        raise ValueError("no relay armed")
    counts = [(rates.relay_backoff_slots(rn, n_max), node) for node, rn in relays]
    low = min(c for c, _ in counts)
    at_low = tuple(sorted(node for c, node in counts if c == low))
    if len(at_low) == 1:
        return ContentionResult(at_low[0], low)
    return ContentionResult(None, low, at_low)


def busy_tone_base(cts_end: int, timing: Timing, legacy_extra_slot: bool = False) -> int:
    """Start of the first busy-tone slot."""
    return cts_end + timing.sifs + (timing.slot if legacy_extra_slot else 0)


def sender_tx_data(cts_end: int, tones: Tuple[bool, bool], timing: Timing,
                   n_max: int, busy_window: bool = True,
                   ctc: Optional[Tuple[int, int, bool]] = None,
                   legacy_extra_slot: bool = False) -> Tuple[int, Mode]:
    """When the RTS sender starts its DATA and which mode it expects.

    ``ctc`` is ``(start, end, decoded)`` of the first CTC heard, if any.
    """
    if not busy_window:
        return cts_end + timing.sifs, Mode.DIRECT
    base = busy_tone_base(cts_end, timing, legacy_extra_slot)
    tones_end = base + 2 * timing.slot
    if not any(tones):
        return tones_end, Mode.DIRECT
    window_end = tones_end + n_max * timing.slot
    if ctc is not None:
        start, end, decoded = ctc
        if decoded and start <= window_end:
            return end + timing.sifs, (Mode.ANCOL if tones[0] else Mode.COOP)
        # Garbled CTC: fall back once the window and the medium are clear.
        return max(window_end, end) + timing.sifs, Mode.DIRECT
    return window_end + timing.sifs, Mode.DIRECT


@dataclass
class CycleOutcome:
    mode: Mode
    results: Dict[int, bool]
    secondary_joined: bool = False


def direct_cycle(sender: int, dst: int, hooks) -> CycleOutcome:
    return CycleOutcome(Mode.DIRECT, {sender: hooks.direct(sender, dst)})


def coop_cycle(decision: ModeDecision, sender: int, dst: int, hooks) -> CycleOutcome:
    """Source slot then relay AF slot; the destination combines both."""
    if decision.mode is not Mode.COOP:
        raise ValueError("coop_cycle needs a COOP decision")
    return CycleOutcome(Mode.COOP, {sender: hooks.coop(sender, dst, decision.relay)})


def anc_ol_cycle(decision: ModeDecision, sender: int, dst: int, hooks) -> CycleOutcome:
    """Both granted senders transmit together, the relay forwards the mixture
    and each destination jointly detects. Falls back to AF of the primary
    flow if the secondary has nothing queued for its announced destination."""
    if decision.mode is not Mode.ANCOL:
        raise ValueError("anc_ol_cycle needs an ANCOL decision")
    s2, d2 = decision.secondary_pair
    if not hooks.secondary_ready(s2, d2):
        return CycleOutcome(Mode.COOP, {sender: hooks.coop(sender, dst, decision.relay)})
    ok_a, ok_b = hooks.ancol(sender, dst, s2, d2, decision.relay)
    return CycleOutcome(Mode.ANCOL, {sender: ok_a, s2: ok_b}, True)
