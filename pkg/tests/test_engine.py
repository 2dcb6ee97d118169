import math

import numpy as np
import pytest
from scipy import stats

import oracles
from cancmac.channel import LinkTable
from cancmac.config import ConfigError, ExperimentConfig, build_config
from cancmac.engine import (KIND_PRIO, Adjudicator, Metrics, Simulator, TraceRecord,
                            build_topology, check_state, check_trace, collect, run,
                            trace_hash, write_trace)
from cancmac.mac import US
from cancmac.phy import constellation, compose_direct, compose_relayed, ml_detect


def cfg(**kw):
    base = dict(n_packets=300, phy_fidelity="rate")
    base.update(kw)
    return build_config(base)


# --------------------------------------------------------------- topology

def test_colocated_nodes_get_max_gain(rng):
    R, dmin = 1e-6, 1e-3
    topo = build_topology(2, R, 20.0, rng, min_distance=dmin)
    ref = 100 * 1e-9 / 0.1
    # every placement is inside min_distance: the law's ceiling for both links
    assert topo.avg_power[0, 1] == pytest.approx(ref * (R / dmin) ** 3, rel=1e-12)
    assert topo.avg_power[1, 0] == topo.avg_power[0, 1]
    assert topo.avg_power[0, 0] == 0


def test_cell_edge_link_hits_configured_snr(rng):
    P, nv, R = 0.1, 1e-9, 50.0
    topo = build_topology(10, R, 17.0, rng, P, nv, 3.0, min_distance=0.01)
    d, p = topo.distances, topo.avg_power
    iu = np.triu_indices(10, 1)
    snr_db = 10 * np.log10(P * p[iu] / nv)
    edge = 17.0 + 30 * np.log10(R / d[iu])
    assert np.allclose(snr_db, edge, atol=1e-9)
    assert np.all(np.hypot(*topo.positions.T) <= R)


def test_pairwise_distance_law():
    rng = np.random.default_rng(10)
    R = 50.0
    d = np.array([build_topology(10, R, 20.0, rng).distances[0, 1] for _ in range(10**4)])
    cdf = np.vectorize(lambda x: oracles.disc_distance_cdf(x, R))
    assert stats.kstest(d, cdf).pvalue > 0.01


def test_topology_needs_two_nodes(rng):
    with pytest.raises(ValueError):
        build_topology(1, 50, 20, rng)


# ---------------------------------------------------------------- run

def test_single_flow_matches_dcf_cycle():
    c = cfg(protocol="DOT11", n_nodes=2, senders=1, avg_snr_db=60.0, n_packets=3000)
    m, _ = run(c)
    assert m.retx_count == 0 and m.dropped == 0
    data_us = c.phy_preamble_us + c.packet_bits / 2 / c.bandwidth_hz * 1e6
    cycle = oracles.dcf_single_flow_cycle_us(c.difs_us, c.slot, c.cw_min, c.rts_us,
                                             c.sifs_us, c.cts_us, data_us, c.ack_us)
    # backoff uniform on {0..16}: per-cycle sd 9*sqrt(288/12) us
    se = c.slot * math.sqrt(((c.cw_min + 1) ** 2 - 1) / 12) / math.sqrt(c.n_packets)
    measured = m.sim_time_us / m.delivered
    assert abs(measured - cycle) < 4 * se
    assert m.throughput_bps == pytest.approx(c.packet_bits / (cycle * 1e-6), rel=0.01)


@pytest.mark.parametrize("proto", ["DOT11", "COOP_MAC", "CANC_MAC"])
def test_run_is_deterministic(proto):
    c = cfg(protocol=proto, phy_fidelity="symbol", n_packets=150)
    (m1, t1), (m2, t2) = run(c), run(c)
    assert trace_hash(t1) == trace_hash(t2)
    assert m1 == m2
    assert trace_hash(run(c.replace(seed=2))[1]) != trace_hash(t1)


def test_scenario_s2_rotation_period():
    c = cfg(scenario="s2", rotation_period=50, n_packets=1200, n_nodes=4)
    sim = Simulator(c)
    sim.run()
    per_flow = {s: 0 for s in sim.senders}
    for rec in sim.trace:
        if rec.event == "deliver":
            per_flow[rec.src] += 1
        elif rec.event == "dest_change":
            assert per_flow[rec.src] % 50 == 0 and per_flow[rec.src] > 0
            assert rec.dsts[0] != rec.src
    changes = sum(r.event == "dest_change" for r in sim.trace)
    assert changes == sum(n // 50 for n in per_flow.values())


def test_s2_rotates_every_500():
    c = cfg(scenario="s2", n_nodes=3, n_packets=3200, protocol="DOT11")
    sim = Simulator(c)
    sim.run()
    per_flow = {s: 0 for s in sim.senders}
    seen = []
    for rec in sim.trace:
        if rec.event == "deliver":
            per_flow[rec.src] += 1
        elif rec.event == "dest_change":
            seen.append(per_flow[rec.src])
    assert seen and all(n % 500 == 0 for n in seen)


def test_invalid_config_rejected_before_running():
    with pytest.raises(ConfigError):
        Simulator(ExperimentConfig(n_packets=0))


def test_conservation_and_invariants():
    for proto in ("DOT11", "COOP_MAC", "CANC_MAC"):
        c = cfg(protocol=proto, n_packets=400, retry_limit=1, avg_snr_db=8.0)
        sim = Simulator(c)
        m = sim.run()
        assert m.dropped > 0
        assert not check_trace(sim.trace, c)
        assert not check_state(sim)
        # an ANCOL cycle may complete two packets at once
        assert c.n_packets <= m.delivered + m.dropped <= c.n_packets + 1


def test_canc_without_cooperation_is_dot11():
    base = cfg(n_packets=400, phy_fidelity="symbol")
    dot = run(base.replace(protocol="DOT11"))[1]
    canc = run(base.replace(protocol="CANC_MAC", enable_coop=False, enable_ancol=False))[1]
    assert trace_hash(dot) == trace_hash(canc)


def test_event_priorities():
    order = sorted(KIND_PRIO, key=KIND_PRIO.get)
    assert order == ["tx_end", "frame_delivery", "timer_expiry", "tx_start", "slot_tick"]


def test_rts_collision_backs_off_both():
    c = cfg(n_nodes=8, n_packets=300)
    sim = Simulator(c)
    sim.run()
    tr = sim.trace
    hits = [i for i, r in enumerate(tr) if r.event == "slot_tick" and r.outcome == "collision"]
    assert hits
    for i in hits[:20]:
        senders = [int(x) for x in tr[i].info.split("=")[1].split()]
        end = next(k for k in range(i + 1, len(tr)) if tr[k].event in ("slot_tick", "end"))
        rest = tr[i + 1:end]
        rts = [r.src for r in rest if r.event == "tx_start" and r.frame == "RTS"]
        assert sorted(rts) == sorted(senders)
        assert not any(r.frame == "CTS" for r in rest)
        after = [r for r in rest if r.event == "timer_expiry"]
        assert after[0].outcome == "cts_timeout"
        failed = [r.node for r in rest if r.event in ("retx", "drop")]
        assert sorted(failed) == sorted(senders)


def test_cycles_use_all_modes_and_tone_rules():
    c = cfg(n_nodes=8, n_packets=1500)
    sim = Simulator(c)
    m = sim.run()
    assert m.mode_counts["ANCOL"] > 0 and m.mode_counts["COOP"] > 0
    assert not check_trace(sim.trace, c)


def test_disassociation_purges_state():
    c = cfg(n_nodes=8, n_packets=1500, disassociations="20000@3,60000@5")
    sim = Simulator(c)
    sim.run()
    assert not sim.active[3] and not sim.active[5]
    assert not check_state(sim)
    for node in sim.nodes:
        if sim.active[node.id]:
            assert not any(3 in k or 5 in k for k in node.est)
    t_gone = max(r.time for r in sim.trace if r.event == "disassoc")
    late = [r for r in sim.trace if r.time > t_gone and r.event == "tx_start"]
    assert late and not any(r.src in (3, 5) or set(r.dsts) & {3, 5} for r in late)


def test_probe_sees_every_cycle():
    c = cfg(n_packets=100)
    sim = Simulator(c)
    calls = []
    sim.probe = lambda s: calls.append(s.now)
    m = sim.run()
    assert len(calls) >= m.cycles
    assert calls == sorted(calls)


# --------------------------------------------------------- adjudication

def _fixed_links(n, power):
    t = LinkTable(np.full((n, n), power))
    return t


def test_noiseless_symbol_fidelity_always_succeeds():
    c = cfg(phy_fidelity="symbol")
    links = _fixed_links(6, 1.0)
    rng = np.random.default_rng(0)
    adj = Adjudicator(c, links, rng, noise_var=0.0)
    for _ in range(30):
        links.resample(rng)
        assert adj.direct(0, 1)
        assert adj.coop(0, 1, 2)
        assert adj.ancol(0, 1, 3, 4, 2) == (True, True)


def test_coop_no_worse_than_direct_at_10db():
    c = cfg(phy_fidelity="symbol", packet_bits=2)
    nv, P = c.noise_var, c.tx_power
    links = _fixed_links(3, 10 * nv / P)
    rng = np.random.default_rng(1)
    adj = Adjudicator(c, links, rng)
    n, fd, fc = 30_000, 0, 0
    for _ in range(n):
        links.resample(rng)
        fd += not adj.direct(0, 1)
        fc += not adj.coop(0, 1, 2)
    assert fc < fd
    assert fd / n > 0.05


def test_coop_with_silent_relay_is_direct(rng):
    const = constellation("QPSK")
    idx = rng.integers(0, 4, 500)
    x = const.points[idx]
    yd = compose_direct(x, None, 0.7 - 0.3j, 0, 1.0, 0.2, rng)
    yr = compose_relayed(x, None, 0.5, 0, 0.8, 0.0, 1.0, 0.2, rng)
    both = ml_detect([yd, yr], [0.7 - 0.3j, 0.0], const, 1.0)
    alone = ml_detect([yd], [0.7 - 0.3j], const, 1.0)
    assert np.array_equal(both, alone)


def test_ancol_frame_success_follows_product_law():
    """Per-receiver frame success of an L-symbol frame is (1-SER)^L."""
    nv = 1e-9
    c1 = cfg(phy_fidelity="symbol", packet_bits=2, noise_var=nv)
    c10 = cfg(phy_fidelity="symbol", packet_bits=20, noise_var=nv)
    links = _fixed_links(5, 0.0)
    # a faded block (12 dB down) of a 25 dB cell, so that errors occur
    g = 0.25 * math.sqrt(10 ** 2.5 * nv / c1.tx_power)
    h = {(0, 1): 0.35, (0, 2): 1.0, (2, 1): 0.8j, (3, 2): -0.9, (3, 1): 0.5 + 0.2j,
         (3, 4): 0.4j, (2, 4): 0.7, (0, 4): 0.3 - 0.3j}
    for (i, j), v in h.items():
        links.set_gain(i, j, g * v)
    rng = np.random.default_rng(5)
    n1 = 40_000
    a1 = Adjudicator(c1, links, rng, perfect_csi=True)
    ok = np.array([a1.ancol(0, 1, 3, 4, 2) for _ in range(n1)])
    ser = 1 - ok.mean(axis=0)
    assert all(0.001 < e < 0.3 for e in ser)
    n10 = 8000
    a10 = Adjudicator(c10, links, rng, perfect_csi=True)
    ok10 = np.array([a10.ancol(0, 1, 3, 4, 2) for _ in range(n10)])
    for k in range(2):
        p = (1 - ser[k]) ** 10
        # binomial error of the frame estimate plus propagated SER error
        se = math.sqrt(p * (1 - p) / n10) + 10 * p * math.sqrt(ser[k] / n1)
        assert abs(ok10[:, k].mean() - p) < 3 * se
    both = np.mean(ok10[:, 0] & ok10[:, 1])
    want = ok10[:, 0].mean() * ok10[:, 1].mean()
    assert abs(both - want) < 3 * math.sqrt(want * (1 - want) / n10) + 0.01


def test_rate_and_symbol_fidelity_agree():
    fr = {}
    for fid in ("rate", "symbol"):
        c = cfg(phy_fidelity=fid, n_packets=1500, avg_snr_db=20.0, packet_bits=4000)
        _, tr = run(c)
        outs = [r.outcome for r in tr if r.event == "frame_delivery" and r.frame == "DATA"]
        fr[fid] = outs.count("ok") / len(outs)
    assert abs(fr["rate"] - fr["symbol"]) < 0.05


# ---------------------------------------------------------------- collect

def test_collect_empty():
    m = collect([])
    assert m == Metrics()
    assert m.mean_delay_us == 0 and m.p95_delay_us == 0 and m.share("COOP") == 0


def test_collect_hand_trace():
    R = TraceRecord
    trace = [
        R(0, 0, "slot_tick", outcome="ok"),
        R(400_000, 0, "cycle_end", mode="DIRECT", outcome="ok"),
        R(400_000, 0, "deliver", "DATA", 0, (1,), outcome="ok", info="bits=4000;hol=0"),
        R(700_000, 2, "retx", outcome="failure"),
        R(700_000, 2, "cycle_end", mode="COOP", outcome="fail"),
        R(1_000_000, 2, "cycle_end", mode="ANCOL", outcome="ok"),
        R(1_000_000, 2, "deliver", "DATA", 2, (3,), outcome="ok", info="bits=4000;hol=100000"),
        R(1_000_000, 4, "deliver", "DATA", 4, (5,), outcome="ok", info="bits=2000;hol=400000"),
        R(1_000_000, 1, "frame_delivery", "DATA", 0, (1,), outcome="fail"),
    ]
    m = collect(trace)
    assert m.delivered == 3 and m.delivered_bits == 10000
    assert m.throughput_bps == pytest.approx(10000 / 1e-3)
    assert m.delays_us == [400.0, 900.0, 600.0]
    assert m.mean_delay_us == pytest.approx(1900 / 3)
    assert m.mode_counts == {"DIRECT": 1, "COOP": 1, "ANCOL": 1}
    assert m.retx_count == 1 and m.detection_failures == 1
    assert m.share("ANCOL") == pytest.approx(1 / 3)


def test_mode_histogram_matches_cycles():
    sim = Simulator(cfg(n_packets=500))
    m = sim.run()
    ends = sum(r.event == "cycle_end" for r in sim.trace)
    assert m.cycles == ends
    assert m.throughput_bps == pytest.approx(m.delivered_bits / (m.sim_time_us * 1e-6))


def test_check_trace_catches_tampering():
    c = cfg(n_packets=600)
    sim = Simulator(c)
    sim.run()
    tr = list(sim.trace)
    assert not check_trace(tr, c)
    # shift a direct DATA start by one microsecond
    i = next(i for i, r in enumerate(tr) if r.event == "tx_start" and r.frame == "DATA"
             and r.mode == "DIRECT")
    bad = tr[:i] + [tr[i]._replace(time=tr[i].time + US)] + tr[i + 1:]
    assert any("direct DATA" in v for v in check_trace(bad, c))
    # drop the relay forward from an ANCOL cycle
    j = next(i for i, r in enumerate(tr) if r.event == "tx_start" and r.info == "phase=2"
             and r.mode == "ANCOL")
    assert any("relay forward" in v for v in check_trace(tr[:j] + tr[j + 1:], c))
    # clock going backwards
    assert check_trace([tr[5], tr[1]], c)


def test_trace_csv_format(tmp_path):
    _, tr = run(cfg(n_packets=20))
    p = tmp_path / "t.csv"
    with open(p, "w") as fh:
        write_trace(tr, fh)
    lines = p.read_text().splitlines()
    assert lines[0] == "time_us,node,event_kind,frame_kind,src,dsts,mode,outcome,info"
    assert len(lines) == len(tr) + 1
