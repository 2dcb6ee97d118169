"""Seeded discrete-event engine: topology, traffic, PHY adjudication, trace
and metrics.

Time is kept in integer nanoseconds so that event ordering never depends on
float rounding. The medium is a single collision domain: every associated
node hears every transmission.
"""
from __future__ import annotations

import csv
import hashlib
import heapq
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from . import rates
from .channel import LinkTable, estimate_gain, path_loss_power
from .config import ExperimentConfig
from .mac import (US, CycleOutcome, Frame, FrameKind, Mode,
                  ModeDecision, NodeState, Outcome, Packet, RelayContext,
                  RelayPlan, Timing, anc_ol_cycle, anfl_maintain,
                  busy_tone_base, coop_cycle, dcf_backoff, direct_cycle,
                  on_overhear, relay_overhear)
from .phy import (EffectiveGains, compose_direct, compose_relayed, complex_noise,
                  constellation, ml_detect, ml_joint_detect, relay_gain,
                  required_snr)

log = logging.getLogger(__name__)

# Same-time ordering of event kinds.
KIND_PRIO = {"tx_end": 0, "frame_delivery": 1, "timer_expiry": 2,
             "tx_start": 3, "slot_tick": 4}

TRACE_FIELDS = ("time_us", "node", "event_kind", "frame_kind", "src", "dsts",
                "mode", "outcome", "info")


class TraceRecord(NamedTuple):
    time: int           # ns
    node: int
    event: str
    frame: str = ""
    src: int = -1
    dsts: Tuple[int, ...] = ()
    mode: str = ""
    outcome: str = ""
    info: str = ""


# ---------------------------------------------------------------- topology

@dataclass
class Topology:
    positions: np.ndarray
    distances: np.ndarray
    avg_power: np.ndarray


def build_topology(n_nodes: int, cell_radius: float, avg_snr_db: float,
                   rng: np.random.Generator, tx_power: float = 0.1,
                   noise_var: float = 1e-9, exponent: float = 3.0,
                   min_distance: Optional[float] = None) -> Topology:
    """Uniform placement in a disc of radius ``cell_radius``.

    Mean link power follows the path-loss law, scaled so that a link of
    length ``cell_radius`` averages ``avg_snr_db`` at ``tx_power``.
    ``min_distance`` (default 5% of the radius) caps the near-field gain.
    """
    if n_nodes < 2:
        raise ValueError("need at least two nodes")
    if min_distance is None:
        min_distance = 0.05 * cell_radius
    r = cell_radius * np.sqrt(rng.random(n_nodes))
    th = 2 * np.pi * rng.random(n_nodes)
    pos = np.column_stack([r * np.cos(th), r * np.sin(th)])
    d = np.hypot(pos[:, None, 0] - pos[None, :, 0], pos[:, None, 1] - pos[None, :, 1])
    ref = 10 ** (avg_snr_db / 10) * noise_var / tx_power
    if cell_radius > 0:
        power = path_loss_power(d, cell_radius, exponent, ref, min_distance)
    else:
        power = np.full_like(d, ref)
    np.fill_diagonal(power, 0.0)
    return Topology(pos, d, power)


# ------------------------------------------------------------ adjudication

class Adjudicator:
    """Decides DATA outcomes from the true gains of the current block.

    ``symbol`` fidelity simulates every symbol and runs the ML detectors with
    fresh pilot estimates of the links; ``rate`` fidelity compares the
    payload rate against the mode's achievable rate.
    """

    def __init__(self, cfg: ExperimentConfig, links: LinkTable,
                 rng: np.random.Generator, noise_var: Optional[float] = None,
                 perfect_csi: bool = False):
        self.cfg = cfg
        self.links = links
        self.rng = rng
        self.P = cfg.tx_power
        self.nv = cfg.noise_var if noise_var is None else noise_var
        self.perfect_csi = perfect_csi or self.nv == 0
        self.const = constellation(cfg.modulation)
        self.n_sym = cfg.packet_bits // self.const.bits_per_symbol
        self.W = cfg.bandwidth_hz
        self.r_pay = self.W * math.log2(1 + required_snr(self.n_sym, cfg.modulation))
        self.ready: Callable[[int, int], bool] = lambda s2, d2: True
        self.detect_failures = 0

    # engine hooks used by the cycle functions
    def secondary_ready(self, s2: int, d2: int) -> bool:
        return self.ready(s2, d2)

    def _h(self, i, j) -> complex:
        return self.links.gain(i, j)

    def _est(self, h: complex) -> complex:
        if self.perfect_csi:
            return h
        return estimate_gain(h, self.cfg.n_pilots, self.P / self.cfg.noise_var, self.rng)

    def _symbols(self):
        idx = self.rng.integers(0, len(self.const), self.n_sym)
        return idx, self.const.points[idx]

    def _fail(self, ok: bool) -> bool:
        if not ok:
            self.detect_failures += 1
        return ok

    def direct(self, s: int, d: int) -> bool:
        h1 = self._h(s, d)
        if self.cfg.phy_fidelity == "rate":
            return self._fail(rates.r_dir(self.W, self.P, abs(h1) ** 2, self.nv) >= self.r_pay)
        idx, x = self._symbols()
        y = compose_direct(x, None, h1, 0j, self.P, self.nv, self.rng)
        got = ml_detect([y], [self._est(h1)], self.const, self.P)
        return self._fail(bool(np.array_equal(got, idx)))

    def coop(self, s: int, d: int, r: int) -> bool:
        h1, h2, h4 = self._h(s, d), self._h(s, r), self._h(r, d)
        g = relay_gain(self.P, [abs(h2) ** 2], self.nv)
        if self.cfg.phy_fidelity == "rate":
            rc = rates.r_coop(self.W, self.P, abs(h1) ** 2, abs(h2) ** 2,
                              abs(h4) ** 2, g, self.nv, self.cfg.coop_rate_form)
            return self._fail(rc >= self.r_pay / 2)
        idx, x = self._symbols()
        y_dir = compose_direct(x, None, h1, 0j, self.P, self.nv, self.rng)
        y_rel = compose_relayed(x, None, h2, 0j, h4, g, self.P, self.nv, self.rng)
        e1, e2, e4 = self._est(h1), self._est(h2), self._est(h4)
        got = ml_detect([y_dir, y_rel], [e1, e2 * e4 * g], self.const, self.P,
                        self._weights(e4, g))
        return self._fail(bool(np.array_equal(got, idx)))

    def _weights(self, e4, g):
        if not self.cfg.ml_weighting:
            return (1.0, 1.0)
        return (1.0, 1.0 / (1 + abs(e4) ** 2 * g * g))

    def ancol(self, s1: int, d1: int, s2: int, d2: int, r: int) -> Tuple[bool, bool]:
        h = self._h
        h1, h2, h4, h7, h8 = h(s1, d1), h(s1, r), h(r, d1), h(s2, r), h(s2, d1)
        h6, h5, h3 = h(s2, d2), h(r, d2), h(s1, d2)
        g = relay_gain(self.P, [abs(h2) ** 2, abs(h7) ** 2], self.nv)
        if self.cfg.phy_fidelity == "rate":
            need = 2 * self.r_pay
            ok_a = rates.r_ancol(self.W, self.P, h1, h2, h4, h7, h8, g, self.nv) >= need
            ok_b = rates.r_ancol(self.W, self.P, h6, h7, h5, h2, h3, g, self.nv) >= need
            return self._fail(ok_a), self._fail(ok_b)
        ia, xa = self._symbols()
        ib, xb = self._symbols()
        n_relay = complex_noise(self.nv, self.n_sym, self.rng)
        out = []
        # Each destination sees (own direct, cross, relay out) and decodes its
        # own stream as "A" of the joint detector.
        for own, other, hd, hc, hr, ho, hx, truth, xs in (
                (s1, s2, h1, h8, h4, h2, h7, ia, (xa, xb)),
                (s2, s1, h6, h3, h5, h7, h2, ib, (xb, xa))):
            y_dir = compose_direct(xs[0], xs[1], hd, hc, self.P, self.nv, self.rng)
            y_rel = compose_relayed(xs[0], xs[1], ho, hx, hr, g, self.P, self.nv,
                                    self.rng, relay_noise=n_relay)
            ed, ec, er = self._est(hd), self._est(hc), self._est(hr)
            eo, ex = self._est(ho), self._est(hx)
            params = EffectiveGains(ed, ec, eo * er * g, ex * er * g)
            det = ml_joint_detect(y_dir, y_rel, params, self.const, self.const,
                                  self.P, self._weights(er, g))
            out.append(self._fail(det.a_detectable
                                  and bool(np.array_equal(det.idx_a, truth))))
        return out[0], out[1]


# ------------------------------------------------------------------ engine

@dataclass
class _Cycle:
    s: int
    d: int
    pkt: Packet
    rts: Frame
    cts: Optional[Frame] = None
    cts_end: int = 0
    plans: Dict[int, RelayPlan] = field(default_factory=dict)
    armed: List[int] = field(default_factory=list)
    tones_end: int = 0
    window_end: int = 0
    ctc_start: Optional[int] = None
    ctc_relays: List[int] = field(default_factory=list)
    ctc_done: bool = False
    data_started: bool = False
    decision: Optional[ModeDecision] = None
    outcome: Optional[CycleOutcome] = None
    secondary: Optional[Tuple[int, int]] = None


class Simulator:
    """One run of one protocol. Call :meth:`run` once."""

    def __init__(self, cfg: ExperimentConfig):
        cfg.validate()
        self.cfg = cfg
        self.timing = Timing.from_config(cfg)
        root = np.random.SeedSequence(cfg.seed)
        topo_ss, fade_ss, est_ss, mac_ss, data_ss = root.spawn(5)
        self.topology = build_topology(
            cfg.n_nodes, cfg.cell_radius_m, cfg.avg_snr_db,
            np.random.default_rng(topo_ss), cfg.tx_power, cfg.noise_var,
            cfg.path_loss_exponent, cfg.min_distance_m)
        self.links = LinkTable(self.topology.avg_power, cfg.reciprocity)
        self.rng_fade = np.random.default_rng(fade_ss)
        self.rng_est = np.random.default_rng(est_ss)
        self.rng_mac = np.random.default_rng(mac_ss)
        self.adj = Adjudicator(cfg, self.links, np.random.default_rng(data_ss))
        self.adj.ready = self._secondary_ready
        self.n = cfg.n_nodes
        self.pilot_snr = cfg.tx_power / cfg.noise_var
        self.n_sym = self.adj.n_sym
        self.t_data = self.timing.data(self.n_sym)
        self.ctx = RelayContext(
            cfg.bandwidth_hz, cfg.tx_power, cfg.noise_var, cfg.packet_bits,
            cfg.n_relay_slots, self.timing, cfg.coop_on, cfg.ancol_on,
            cfg.coop_rate_form, cfg.mode_rule,
            int(round(cfg.backlog_window_us * US)),
            None if cfg.estimate_staleness_model == "frozen"
            else int(round(cfg.estimate_max_age_us * US)))

        self.nodes = [NodeState(i, cfg.cw_min, cfg.cw_max, cfg.retry_limit,
                                cfg.anfl_capacity, cfg.reciprocity)
                      for i in range(self.n)]
        self.active = [True] * self.n
        n_send = cfg.senders or self.n
        self.senders = list(range(n_send))
        self.dst = {i: (i + 1) % self.n for i in self.senders}
        self.flow_delivered = {i: 0 for i in self.senders}
        self.generated = 0
        self.delivered = 0
        self.dropped = 0
        self.completed = 0
        self._seq = 0
        self._heap: list = []
        self.trace: List[TraceRecord] = []
        self.now = 0
        self.events = 0
        self.cycle: Optional[_Cycle] = None
        self.pending_disassoc: List[int] = []
        self.finished = False
        # Optional callable invoked with the simulator at every cycle boundary.
        self.probe: Optional[Callable[["Simulator"], None]] = None
        for i in self.senders:
            self._new_packet(i, 0)
            self.nodes[i].backoff = int(self.rng_mac.integers(0, self.nodes[i].cw + 1))
        for t_us, node in cfg.disassociation_list():
            self._at(int(round(t_us * US)), "timer_expiry", node, self._on_disassoc, node)

    # -- plumbing
    def _at(self, t: int, kind: str, node: int, fn, arg=None) -> None:
        self._seq += 1
        heapq.heappush(self._heap, (t, KIND_PRIO[kind], node, self._seq, fn, arg))

    def _rec(self, t, node, event, frame="", src=-1, dsts=(), mode="",
             outcome="", info=""):
        self.trace.append(TraceRecord(t, node, event, frame, src, tuple(dsts),
                                      mode, outcome, info))

    def _tx(self, t: int, frame: Frame, duration: int, mode: str = "",
            info: str = "", on_end=None) -> None:
        kind = frame.kind._value_
        self._rec(t, frame.src, "tx_start", kind, frame.src, frame.dsts, mode, "", info)
        self._at(t + duration, "tx_end", frame.src, self._on_tx_end,
                 (frame, mode, on_end))

    def _on_tx_end(self, t, arg):
        frame, mode, on_end = arg
        self._rec(t, frame.src, "tx_end", frame.kind._value_, frame.src, frame.dsts, mode)
        if on_end is not None:
            on_end(t, frame)

    def _new_packet(self, i: int, t: int) -> None:
        node = self.nodes[i]
        node.queue.clear()
        node.queue.append(Packet(self.dst[i], self.cfg.packet_bits, t, self.generated))
        self.generated += 1

    def _measure(self, tx: int, rxs: Sequence[int]) -> np.ndarray:
        true = self.links.gains[tx, list(rxs)]
        return estimate_gain(true, self.cfg.n_pilots, self.pilot_snr, self.rng_est)

    def _listeners(self, *exclude) -> List[int]:
        return [j for j in range(self.n) if self.active[j] and j not in exclude]

    # -- main loop
    def run(self) -> "Metrics":
        self._contend(0)
        limit = self.cfg.max_events or None
        heap = self._heap
        while heap and not self.finished:
            t, _, _, _, fn, arg = heapq.heappop(heap)
            if t < self.now:
                raise RuntimeError("event out of order")
            self.now = t
            fn(t, arg)
            self.events += 1
            if limit and self.events >= limit:
                break
        self._rec(self.now, -1, "end", info="events=%d" % self.events)
        in_queue = sum(len(self.nodes[i].queue) for i in self.senders)
        if self.delivered + self.dropped + in_queue != self.generated:
            raise RuntimeError("packet conservation violated")
        return collect(self.trace)

    # -- contention
    def _contend(self, t: int) -> None:
        self.cycle = None
        if self.probe is not None:
            self.probe(self)
        for node in self.pending_disassoc:
            self._disassociate(t, node)
        self.pending_disassoc = []
        if self.completed >= self.cfg.n_packets:
            self.finished = True
            return
        cands = [i for i in self.senders if self.active[i] and self.nodes[i].queue]
        if not cands:
            self.finished = True
            return
        m = min(self.nodes[i].backoff for i in cands)
        for i in cands:
            self.nodes[i].backoff -= m
        winners = [i for i in cands if self.nodes[i].backoff == 0]
        start = t + self.timing.difs + m * self.timing.slot
        self._at(start, "slot_tick", winners[0], self._on_slot_tick, winners)

    def _on_slot_tick(self, t, winners):
        T = self.timing
        if len(winners) > 1:
            self._rec(t, winners[0], "slot_tick", outcome="collision",
                      info="winners=" + " ".join(map(str, winners)))
            for w in winners:
                pkt = self.nodes[w].queue[0]
                self._tx(t, Frame(FrameKind.RTS, w, (pkt.dst,)), T.rts)
            self._at(t + T.rts + T.sifs + T.cts, "timer_expiry", winners[0],
                     self._on_cts_timeout, winners)
            return
        s = winners[0]
        pkt = self.nodes[s].queue[0]
        self._rec(t, s, "slot_tick", outcome="ok", info="winners=%d" % s)
        self.links.resample(self.rng_fade)
        rts = Frame(FrameKind.RTS, s, (pkt.dst,), flows=((s, pkt.dst),))
        self.cycle = _Cycle(s, pkt.dst, pkt, rts)
        self._tx(t, rts, T.rts, on_end=self._rts_end)

    def _on_cts_timeout(self, t, winners):
        self._rec(t, winners[0], "timer_expiry", outcome="cts_timeout",
                  info="senders=" + " ".join(map(str, winners)))
        for w in winners:
            self._attempt_failed(t, w, Outcome.COLLISION)
        self._contend(t)

    def _rts_end(self, t, frame):
        self._at(t, "frame_delivery", frame.src, self._rts_delivery, frame)

    def _rts_delivery(self, t, frame):
        c = self.cycle
        rx = self._listeners(frame.src)
        self._rec(t, frame.src, "frame_delivery", "RTS", frame.src, frame.dsts)
        cts = None
        for j, h in zip(rx, self._measure(frame.src, rx)):
            reply = on_overhear(self.nodes[j], frame, complex(h), t)
            if reply is not None:
                cts = reply
        if cts is None:
            raise RuntimeError("destination %d did not answer" % c.d)
        c.cts = cts
        self._at(t + self.timing.sifs, "tx_start", c.d, self._cts_start, cts)

    def _cts_start(self, t, cts):
        self._tx(t, cts, self.timing.cts, on_end=self._cts_end)

    def _cts_end(self, t, frame):
        self._at(t, "frame_delivery", frame.src, self._cts_delivery, frame)

    def _cts_delivery(self, t, frame):
        c = self.cycle
        T = self.timing
        c.cts_end = t
        rx = self._listeners(frame.src)
        self._rec(t, frame.src, "frame_delivery", "CTS", frame.src, frame.dsts)
        for j, h in zip(rx, self._measure(frame.src, rx)):
            on_overhear(self.nodes[j], frame, complex(h), t)
        if not self.cfg.coop_on:
            self._at(t + T.sifs, "tx_start", c.s, self._data_start, Mode.DIRECT)
            return
        for r in self._listeners(c.s, c.d):
            plan = relay_overhear(self.nodes[r], c.rts, frame, t, self.ctx)
            if plan is not None:
                c.plans[r] = plan
        base = busy_tone_base(t, T, self.cfg.legacy_extra_slot)
        c.tones_end = base + 2 * T.slot
        c.window_end = c.tones_end + self.cfg.n_relay_slots * T.slot
        slot1 = [r for r, p in sorted(c.plans.items()) if p.mode is Mode.ANCOL]
        # A slot-1 tone announces a better option; COOP-only relays then
        # hold back so that the CTC which follows always proposes ANCOL.
        c.armed = slot1 or sorted(c.plans)
        tone_t = base if slot1 else base + T.slot
        for r in c.armed:
            self._at(tone_t, "tx_start", r, self._tone_start, r)
            p = c.plans[r]
            self._at(c.tones_end + p.slots * T.slot, "timer_expiry", r,
                     self._rbkf_expiry, r)
        if not c.armed:
            self._at(c.tones_end, "tx_start", c.s, self._data_start, Mode.DIRECT)
        else:
            self._at(c.window_end + T.sifs, "timer_expiry", c.s,
                     self._ctc_window_expiry, None)

    def _tone_start(self, t, r):
        p = self.cycle.plans[r]
        info = "slot=%d;rnorm=%.9g;slots=%d;r_dir=%.9g;r_coop=%.9g" % (
            p.tone_slot, p.r_norm, p.slots, p.r_dir, p.r_coop)
        tone = Frame(FrameKind.BUSY_TONE, r, (), duration=self.timing.slot)
        self._tx(t, tone, self.timing.slot, p.mode.value, info)

    def _rbkf_expiry(self, t, r):
        c = self.cycle
        p = c.plans[r]
        if c.ctc_start is not None and c.ctc_start < t:
            self._rec(t, r, "timer_expiry", outcome="cancel", info="rnorm=%.9g" % p.r_norm)
            return
        self._rec(t, r, "timer_expiry", outcome="fire", info="rnorm=%.9g" % p.r_norm)
        c.ctc_start = t
        c.ctc_relays.append(r)
        if p.mode is Mode.ANCOL:
            s2, d2 = p.partner
            ctc = Frame(FrameKind.CTC, r, (c.s, s2), flows=((c.s, c.d), (s2, d2)))
        else:
            ctc = Frame(FrameKind.CTC, r, (c.s, c.d), flows=((c.s, c.d),))
        self._tx(t, ctc, self.timing.ctc, p.mode.value,
                 "rnorm=%.9g" % p.r_norm, on_end=self._ctc_end)

    def _ctc_end(self, t, frame):
        c = self.cycle
        if c.ctc_done:
            return
        c.ctc_done = True
        if len(c.ctc_relays) > 1:
            self._rec(t, c.s, "frame_delivery", "CTC", -1, (), outcome="collision",
                      info="relays=" + " ".join(map(str, c.ctc_relays)))
            start = max(c.window_end, t) + self.timing.sifs
            self._at(start, "tx_start", c.s, self._data_start, Mode.DIRECT)
            return
        self._at(t, "frame_delivery", frame.src, self._ctc_delivery, frame)

    def _ctc_delivery(self, t, frame):
        c = self.cycle
        rx = self._listeners(frame.src)
        self._rec(t, frame.src, "frame_delivery", "CTC", frame.src, frame.dsts)
        for j, h in zip(rx, self._measure(frame.src, rx)):
            on_overhear(self.nodes[j], frame, complex(h), t)
        p = c.plans[frame.src]
        if p.mode is Mode.ANCOL:
            c.decision = ModeDecision(Mode.ANCOL, p.relay, p.partner, p.r_ancol)
        else:
            c.decision = ModeDecision(Mode.COOP, p.relay, None, p.r_coop)
        self._at(t + self.timing.sifs, "tx_start", c.s, self._data_start, c.decision.mode)

    def _ctc_window_expiry(self, t, _):
        c = self.cycle
        if c.ctc_start is None and not c.data_started:
            self._rec(t, c.s, "timer_expiry", outcome="ctc_window")
            self._data_start(t, Mode.DIRECT)

    # -- data phase
    def _secondary_ready(self, s2: int, d2: int) -> bool:
        c = self.cycle
        if s2 not in self.dst or not (self.active[s2] and self.active[d2]):
            return False
        if s2 in (c.s, c.d) or d2 in (c.s, c.d):
            return False
        q = self.nodes[s2].queue
        return bool(q) and q[0].dst == d2

    def _data_start(self, t, mode):
        c = self.cycle
        if c.data_started:
            return
        c.data_started = True
        T = self.timing
        if mode is Mode.DIRECT:
            c.decision = ModeDecision(Mode.DIRECT)
        d = c.decision
        info = "phase=1"
        if d.mode is Mode.ANCOL:
            s2, d2 = d.secondary_pair
            if self._secondary_ready(s2, d2):
                c.secondary = (s2, d2)
            else:
                info = "phase=1;secondary_absent=%d" % s2
        mode_s = (Mode.COOP if d.mode is Mode.ANCOL and c.secondary is None
                  else d.mode).value
        self._tx(t, Frame(FrameKind.DATA, c.s, (c.d,), c.pkt.bits), self.t_data,
                 mode_s, info)
        if c.secondary is not None:
            s2, d2 = c.secondary
            pkt2 = self.nodes[s2].queue[0]
            self._tx(t, Frame(FrameKind.DATA, s2, (d2,), pkt2.bits), self.t_data,
                     mode_s, info)
        end = t + self.t_data
        if d.mode is Mode.DIRECT:
            self._at(end, "frame_delivery", c.s, self._data_delivery, None)
        else:
            self._at(end + T.sifs, "tx_start", d.relay, self._relay_forward, mode_s)

    def _relay_forward(self, t, mode_s):
        c = self.cycle
        dsts = (c.d,) if c.secondary is None else (c.d, c.secondary[1])
        fwd = Frame(FrameKind.DATA, c.decision.relay, dsts[:1], c.pkt.bits)
        self._rec(t, fwd.src, "tx_start", "DATA", fwd.src, dsts, mode_s, "", "phase=2")
        self._at(t + self.t_data, "tx_end", fwd.src, self._relay_forward_end,
                 (dsts, mode_s))

    def _relay_forward_end(self, t, arg):
        dsts, mode_s = arg
        r = self.cycle.decision.relay
        self._rec(t, r, "tx_end", "DATA", r, dsts, mode_s, "", "phase=2")
        self._at(t, "frame_delivery", r, self._data_delivery, None)

    def _data_delivery(self, t, _):
        c = self.cycle
        d = c.decision
        if d.mode is Mode.DIRECT:
            out = direct_cycle(c.s, c.d, self.adj)
        elif d.mode is Mode.COOP or c.secondary is None:
            out = coop_cycle(ModeDecision(Mode.COOP, d.relay), c.s, c.d, self.adj)
        else:
            out = anc_ol_cycle(d, c.s, c.d, self.adj)
        c.outcome = out
        flows = [(c.s, c.d)]
        if out.secondary_joined:
            flows.append(c.secondary)
        for s, dst in flows:
            ok = out.results[s]
            self._rec(t, dst, "frame_delivery", "DATA", s, (dst,), out.mode.value,
                      "ok" if ok else "fail")
        T = self.timing
        end = t
        for s, dst in flows:
            start = end + T.sifs
            end = start + T.ack
            if out.results[s]:
                self._at(start, "tx_start", dst, self._ack_start, (dst, s))
        self._at(end, "timer_expiry", c.s, self._cycle_end, flows)

    def _ack_start(self, t, arg):
        dst, s = arg
        self._tx(t, Frame(FrameKind.ACK, dst, (s,)), self.timing.ack,
                 self.cycle.outcome.mode.value)

    def _cycle_end(self, t, flows):
        c = self.cycle
        out = c.outcome
        oks = " ".join("%d:%d" % (s, int(out.results[s])) for s, _ in flows)
        relay = c.decision.relay if out.mode is not Mode.DIRECT else -1
        self._rec(t, c.s, "cycle_end", "", c.s, tuple(d for _, d in flows),
                  out.mode.value, "ok" if all(out.results.values()) else "fail",
                  "relay=%d;ok=%s" % (relay, oks))
        for s, _ in flows:
            if out.results[s]:
                self._delivered(t, s)
            else:
                self._attempt_failed(t, s, Outcome.FAILURE)
        self._contend(t)

    # -- bookkeeping
    def _delivered(self, t: int, s: int) -> None:
        node = self.nodes[s]
        pkt = node.queue.popleft()
        self.delivered += 1
        self.completed += 1
        self._rec(t, s, "deliver", "DATA", s, (pkt.dst,), outcome="ok",
                  info="bits=%d;hol=%d" % (pkt.bits, pkt.hol))
        dcf_backoff(node, Outcome.SUCCESS, self.rng_mac)
        self.flow_delivered[s] += 1
        if (self.cfg.scenario == "s2"
                and self.flow_delivered[s] % self.cfg.rotation_period == 0):
            self._rotate(t, s)
        self._new_packet(s, t)

    def _rotate(self, t: int, s: int) -> None:
        old = self.dst[s]
        self.dst[s] = self._next_dst(s, old)
        self._rec(t, s, "dest_change", src=s, dsts=(self.dst[s],),
                  info="from=%d" % old)

    def _next_dst(self, s: int, cur: int) -> int:
        for k in range(1, self.n + 1):
            cand = (cur + k) % self.n
            if cand != s and self.active[cand]:
                return cand
        return cur

    def _attempt_failed(self, t: int, s: int, outcome: Outcome) -> None:
        node = self.nodes[s]
        if dcf_backoff(node, outcome, self.rng_mac):
            pkt = node.queue.popleft()
            self.dropped += 1
            self.completed += 1
            self._rec(t, s, "drop", "DATA", s, (pkt.dst,), outcome=outcome.value,
                      info="bits=%d;hol=%d" % (pkt.bits, pkt.hol))
            self._new_packet(s, t)
        else:
            self._rec(t, s, "retx", outcome=outcome.value, info="retry=%d" % node.retry)

    def _on_disassoc(self, t, node):
        if self.cycle is not None:
            self.pending_disassoc.append(node)
        else:
            self._disassociate(t, node)

    def _disassociate(self, t: int, node: int) -> None:
        if not self.active[node]:
            return
        self.active[node] = False
        self._rec(t, node, "disassoc", src=node)
        for j in range(self.n):
            if j != node:
                anfl_maintain(self.nodes[j], "disassociation", t, node=node)
        for s, d in list(self.dst.items()):
            if d == node and self.active[s]:
                self.dst[s] = self._next_dst(s, node)
                q = self.nodes[s].queue
                if q:
                    q[0].dst = self.dst[s]


# ------------------------------------------------------------------ metrics

@dataclass
class Metrics:
    throughput_bps: float = 0.0
    delivered: int = 0
    delivered_bits: int = 0
    dropped: int = 0
    delays_us: List[float] = field(default_factory=list)
    mode_counts: Dict[str, int] = field(
        default_factory=lambda: {"DIRECT": 0, "COOP": 0, "ANCOL": 0})
    retx_count: int = 0
    detection_failures: int = 0
    sim_time_us: float = 0.0

    @property
    def mean_delay_us(self) -> float:
        return float(np.mean(self.delays_us)) if self.delays_us else 0.0

    @property
    def p95_delay_us(self) -> float:
        return float(np.percentile(self.delays_us, 95)) if self.delays_us else 0.0

    @property
    def cycles(self) -> int:
        return sum(self.mode_counts.values())

    def share(self, mode: str) -> float:
        n = self.cycles
        return self.mode_counts[mode] / n if n else 0.0


def _info(text: str) -> Dict[str, str]:
    return dict(kv.split("=", 1) for kv in text.split(";") if kv)


def collect(trace: Sequence[TraceRecord]) -> Metrics:
    """Metrics from a trace alone."""
    m = Metrics()
    end = 0
    for rec in trace:
        end = max(end, rec.time)
        ev = rec.event
        if ev == "deliver":
            info = _info(rec.info)
            m.delivered += 1
            m.delivered_bits += int(info["bits"])
            m.delays_us.append((rec.time - int(info["hol"])) / US)
        elif ev == "cycle_end":
            m.mode_counts[rec.mode] += 1
        elif ev == "retx":
            m.retx_count += 1
        elif ev == "drop":
            m.dropped += 1
        elif ev == "frame_delivery" and rec.frame == "DATA" and rec.outcome == "fail":
            m.detection_failures += 1
    m.sim_time_us = end / US
    if end > 0:
        m.throughput_bps = m.delivered_bits / (end * 1e-9)
    return m


def run(cfg: ExperimentConfig) -> Tuple[Metrics, List[TraceRecord]]:
    sim = Simulator(cfg)
    metrics = sim.run()
    return metrics, sim.trace


# -------------------------------------------------------------- trace I/O

def trace_rows(trace: Sequence[TraceRecord]):
    for r in trace:
        yield ("%d.%03d" % divmod(r.time, 1000), r.node, r.event, r.frame, r.src,
               " ".join(map(str, r.dsts)), r.mode, r.outcome, r.info)


def write_trace(trace: Sequence[TraceRecord], fh) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(TRACE_FIELDS)
    w.writerows(trace_rows(trace))


def trace_hash(trace: Sequence[TraceRecord]) -> str:
    buf = io.StringIO()
    write_trace(trace, buf)
    return hashlib.sha256(buf.getvalue().encode()).hexdigest()


# ----------------------------------------------------------- invariants

def check_trace(trace: Sequence[TraceRecord], cfg: ExperimentConfig) -> List[str]:
    """Protocol-conformance checks over one run's trace; returns the list of
    violations (empty when all hold)."""
    T = Timing.from_config(cfg)
    bad: List[str] = []
    last = -1
    cycle: List[TraceRecord] = []

    def flush(recs):
        if recs:
            bad.extend(_check_cycle(recs, cfg, T))

    for rec in trace:
        if rec.time < last:
            bad.append("time went backwards at %d" % rec.time)
        last = rec.time
        if rec.event == "slot_tick":
            flush(cycle)
            cycle = []
        cycle.append(rec)
        if rec.event == "tx_start" and rec.frame == "CTC" and len(set(rec.dsts)) != 2:
            bad.append("CTC without two destinations at %d" % rec.time)
    flush(cycle)
    return bad


def _check_cycle(recs, cfg, T) -> List[str]:
    bad = []
    t0 = recs[0].time
    if recs[0].event != "slot_tick":
        return bad
    cts = [r for r in recs if r.event == "tx_start" and r.frame == "CTS"]
    if len(cts) > 1:
        bad.append("%d: more than one CTS in a contention round" % t0)
    if recs[0].outcome == "collision":
        if cts:
            bad.append("%d: CTS after an RTS collision" % t0)
        return bad
    tones = [r for r in recs if r.event == "tx_start" and r.frame == "BUSY_TONE"]
    ctcs = [r for r in recs if r.event == "tx_start" and r.frame == "CTC"]
    data1 = [r for r in recs if r.event == "tx_start" and r.frame == "DATA"
             and r.info.startswith("phase=1")]
    data2 = [r for r in recs if r.event == "tx_start" and r.frame == "DATA"
             and r.info == "phase=2"]
    if not cts or not data1:
        return bad
    if not any(r.event == "cycle_end" for r in recs):
        return bad      # cut off by max_events; shape is not final yet
    cts_end = next(r.time for r in recs if r.event == "tx_end" and r.frame == "CTS")
    slots = {int(_info(r.info)["slot"]) for r in tones}
    for r in tones:
        info = _info(r.info)
        if not float(info["r_coop"]) > float(info["r_dir"]):
            bad.append("%d: relay %d toned without R_coop > R_dir" % (t0, r.node))
    if len(slots) > 1:
        bad.append("%d: tones in both slots" % t0)
    base = cts_end + T.sifs + (T.slot if cfg.legacy_extra_slot else 0)
    if not tones:
        if ctcs:
            bad.append("%d: CTC without busy tone" % t0)
        if cfg.coop_on and data1[0].time != base + 2 * T.slot:
            bad.append("%d: direct DATA not at CTS_end+SIFS+2 slots" % t0)
    if ctcs and len(ctcs) == 1:
        want = Mode.ANCOL.value if 1 in slots else Mode.COOP.value
        if ctcs[0].mode != want:
            bad.append("%d: slot-%s tone but CTC proposes %s" % (t0, slots, ctcs[0].mode))
        armed = {r.node: float(_info(r.info)["rnorm"]) for r in tones}
        if armed[ctcs[0].src] < max(armed.values()):
            bad.append("%d: CTC winner %d lacks maximal r_norm" % (t0, ctcs[0].src))
    mode = data1[0].mode
    if mode == "ANCOL":
        seq = [r.frame for r in recs if r.event == "tx_start"]
        if not (1 in slots and ctcs and seq.index("RTS") < seq.index("CTS")
                < seq.index("BUSY_TONE") < seq.index("CTC") < seq.index("DATA")):
            bad.append("%d: ANCOL DATA without RTS, CTS, slot-1 tone, CTC" % t0)
        if len(data1) != 2 or data1[0].time != data1[1].time:
            bad.append("%d: ANCOL phase 1 does not overlap two DATA" % t0)
        if len(data2) != 1:
            bad.append("%d: ANCOL without exactly one relay forward" % t0)
    elif mode == "COOP":
        if len(data1) != 1 or len(data2) != 1:
            bad.append("%d: COOP cycle shape" % t0)
    elif len(data1) != 1 or data2:
        bad.append("%d: DIRECT cycle shape" % t0)
    return bad


def check_state(sim: Simulator) -> List[str]:
    bad = []
    gone = {i for i in range(sim.n) if not sim.active[i]}
    for node in sim.nodes:
        if node.id in gone:
            continue
        if len(node.anfl) > node.anfl.capacity:
            bad.append("node %d: anfl over capacity" % node.id)
        for e in node.anfl:
            if gone & (e.nodes() | {e.relay}):
                bad.append("node %d: anfl references a departed node" % node.id)
        if not node.cw_min <= node.cw <= node.cw_max:
            bad.append("node %d: CW out of range" % node.id)
        if not 0 <= node.backoff <= node.cw:
            bad.append("node %d: backoff out of range" % node.id)
        if node.retry > node.retry_limit:
            bad.append("node %d: retry over limit" % node.id)
    in_queue = sum(len(sim.nodes[i].queue) for i in sim.senders)
    if sim.delivered + sim.dropped + in_queue != sim.generated:
        bad.append("packet conservation")
    return bad
