import pytest
from hypothesis import given, strategies as st

from cancmac.config import (ALIASES, ConfigError, ExperimentConfig, build_config,
                            canonical, coerce, parse_kv_text)


def test_defaults_are_the_reference_setup():
    c = ExperimentConfig()
    assert c.bandwidth_hz == 20e6 and c.noise_var == 1e-9
    assert c.sifs_us == 16 and c.difs_us == 34 and c.slot == 9
    assert c.n_relay_slots == 10 and c.anfl_capacity == 20 and c.n_packets == 10000
    assert c.cw_min == 16 and c.cw_max == 1024 and c.retry_limit == 7
    assert c.rts_us == 52 and c.cts_us == 44 and c.ack_us == 44 and c.ctc_us == 47
    assert c.rotation_period == 500 and c.n_pilots == 8
    assert c.coop_rate_form == "paper" and not c.legacy_extra_slot


def test_protocol_switches():
    assert not ExperimentConfig(protocol="DOT11").coop_on
    c = ExperimentConfig(protocol="COOP_MAC")
    assert c.coop_on and not c.ancol_on
    c = ExperimentConfig(protocol="CANC_MAC")
    assert c.coop_on and c.ancol_on
    c = ExperimentConfig(protocol="CANC_MAC", enable_coop=False, enable_ancol=True)
    assert not c.coop_on and not c.ancol_on


@pytest.mark.parametrize("kw", [
    dict(packet_bits=-5), dict(packet_bits=3), dict(n_packets=0), dict(n_nodes=1),
    dict(protocol="ALOHA"), dict(scenario="s3"), dict(n_relay_slots=0),
    dict(cw_min=2048), dict(difs_us=10), dict(senders=99), dict(mode_rule="x"),
    dict(disassociations="5@99"), dict(disassociations="nonsense"),
])
def test_validation_errors(kw):
    with pytest.raises(ConfigError):
        ExperimentConfig(**kw)


def test_error_names_the_key():
    with pytest.raises(ConfigError, match="packet_bits"):
        build_config({"packet_bits": "-5"})
    with pytest.raises(ConfigError, match="unknown key 'bogus'"):
        build_config({"bogus": "1"})
    with pytest.raises(ConfigError, match="n_nodes"):
        build_config({"nodes": "eight"})


def test_parse_kv_text():
    text = "# comment\nnodes = 4\nsnr-db=12.5  # trailing\n\nprotocol=coop_mac\nenable_coop=auto\n"
    got = parse_kv_text(text)
    assert got == {"n_nodes": 4, "avg_snr_db": 12.5, "protocol": "COOP_MAC",
                   "enable_coop": None}
    with pytest.raises(ConfigError, match="line 1"):
        parse_kv_text("nodes 4")


def test_layers_later_wins():
    c = build_config({"n_nodes": 4, "seed": 3}, {"nodes": "8"})
    assert c.n_nodes == 8 and c.seed == 3
    assert build_config().n_nodes == ExperimentConfig().n_nodes


def test_aliases_and_bools():
    assert canonical(" snr-db ") == "avg_snr_db"
    assert set(ALIASES.values()) <= set(ExperimentConfig.__dataclass_fields__)
    assert coerce("reciprocity", "off") is False
    assert coerce("legacy_extra_slot", "YES") is True
    with pytest.raises(ConfigError):
        coerce("reciprocity", "maybe")


def test_disassociation_list():
    c = ExperimentConfig(disassociations="300@2, 100@1")
    assert c.disassociation_list() == [(100.0, 1), (300.0, 2)]


@given(st.integers(2, 64), st.integers(1, 10**6), st.floats(-10, 40),
       st.sampled_from(["DOT11", "COOP_MAC", "CANC_MAC"]), st.sampled_from(["s1", "s2"]))
def test_dump_parse_round_trip(n, seed, snr, proto, scen):
    c = ExperimentConfig(n_nodes=n, seed=seed, avg_snr_db=snr, protocol=proto, scenario=scen)
    assert build_config(parse_kv_text(c.dumps())) == c
