"""Experiment configuration: defaults, validation and flat ``key=value`` I/O."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from typing import Dict, List, Optional, Tuple

PROTOCOLS = ("DOT11", "COOP_MAC", "CANC_MAC")
SCENARIOS = ("s1", "s2")
FIDELITIES = ("symbol", "rate")
MODULATIONS = ("QPSK", "BPSK")


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    protocol: str = "CANC_MAC"
    n_nodes: int = 8
    packet_bits: int = 4000
    avg_snr_db: float = 20.0
    scenario: str = "s1"
    rotation_period: int = 500
    seed: int = 1
    n_packets: int = 10000
    phy_fidelity: str = "symbol"
    modulation: str = "QPSK"
    n_relay_slots: int = 10
    anfl_capacity: int = 20

    # PHY
    bandwidth_hz: float = 20e6
    noise_var: float = 1e-9
    tx_power: float = 0.1
    n_pilots: int = 8
    path_loss_exponent: float = 3.0
    cell_radius_m: float = 50.0
    min_distance_m: float = 2.5
    reciprocity: bool = True
    coop_rate_form: str = "paper"
    ml_weighting: bool = False

    # MAC timing, microseconds. slot_us <= 0 derives the slot from DIFS = SIFS + 2 slots.
    sifs_us: float = 16.0
    difs_us: float = 34.0
    slot_us: float = 0.0
    rts_us: float = 52.0
    cts_us: float = 44.0
    ack_us: float = 44.0
    ctc_us: float = 47.0
    phy_preamble_us: float = 20.0
    cw_min: int = 16
    cw_max: int = 1024
    retry_limit: int = 7
    legacy_extra_slot: bool = False

    # Relay logic
    mode_rule: str = "rates"
    enable_coop: Optional[bool] = None
    enable_ancol: Optional[bool] = None
    backlog_window_us: float = 50000.0
    estimate_staleness_model: str = "frozen"
    estimate_max_age_us: float = 50000.0

    # Traffic and run control
    senders: int = 0
    disassociations: str = ""
    max_events: int = 0

    def __post_init__(self):
        self.validate()

    @property
    def slot(self) -> float:
        if self.slot_us > 0:
            return self.slot_us
        return (self.difs_us - self.sifs_us) / 2

    @property
    def coop_on(self) -> bool:
        if self.enable_coop is not None:
            return self.enable_coop
        return self.protocol in ("COOP_MAC", "CANC_MAC")

    @property
    def ancol_on(self) -> bool:
        if self.enable_ancol is not None:
            return self.enable_ancol and self.coop_on
        return self.protocol == "CANC_MAC"

    def disassociation_list(self) -> List[Tuple[float, int]]:
        out = []
        for item in filter(None, (s.strip() for s in self.disassociations.split(","))):
            t, _, node = item.partition("@")
            out.append((float(t), int(node)))
        return sorted(out)

    def validate(self) -> None:
        def need(cond, key, msg):
            if not cond:
                raise ConfigError("%s: %s (got %r)" % (key, msg, getattr(self, key)))

        need(self.protocol in PROTOCOLS, "protocol", "one of %s" % (PROTOCOLS,))
        need(self.scenario in SCENARIOS, "scenario", "one of %s" % (SCENARIOS,))
        need(self.phy_fidelity in FIDELITIES, "phy_fidelity", "symbol or rate")
        need(self.modulation in MODULATIONS, "modulation", "QPSK or BPSK")
        need(self.coop_rate_form in ("paper", "mrc"), "coop_rate_form", "paper or mrc")
        need(self.mode_rule in ("rates", "overhead"), "mode_rule", "rates or overhead")
        need(self.estimate_staleness_model in ("frozen", "decay"),
             "estimate_staleness_model", "frozen or decay")
        need(self.n_nodes >= 2, "n_nodes", "must be >= 2")
        need(self.packet_bits > 0, "packet_bits", "must be positive")
        bps = 2 if self.modulation == "QPSK" else 1
        need(self.packet_bits % bps == 0, "packet_bits",
             "must be a whole number of symbols")
        need(self.n_packets >= 1, "n_packets", "must be >= 1")
        need(self.n_relay_slots >= 1, "n_relay_slots", "must be >= 1")
        need(self.anfl_capacity >= 1, "anfl_capacity", "must be >= 1")
        need(self.rotation_period > 0, "rotation_period", "must be positive")
        need(self.bandwidth_hz > 0, "bandwidth_hz", "must be positive")
        need(self.noise_var > 0, "noise_var", "must be positive")
        need(self.tx_power > 0, "tx_power", "must be positive")
        need(self.n_pilots >= 1, "n_pilots", "must be >= 1")
        need(self.path_loss_exponent >= 0, "path_loss_exponent", "must be >= 0")
        need(self.cell_radius_m > 0, "cell_radius_m", "must be positive")
        need(self.min_distance_m > 0, "min_distance_m", "must be positive")
        need(1 <= self.cw_min <= self.cw_max, "cw_min", "need 1 <= cw_min <= cw_max")
        need(self.retry_limit >= 0, "retry_limit", "must be >= 0")
        need(0 <= self.senders <= self.n_nodes, "senders", "0 (all) .. n_nodes")
        need(self.difs_us > self.sifs_us >= 0, "difs_us", "must exceed sifs_us")
        for key in ("rts_us", "cts_us", "ack_us", "ctc_us", "phy_preamble_us"):
            need(getattr(self, key) >= 0, key, "must be >= 0")
        need(self.slot > 0, "slot_us", "slot must be positive")
        try:
            for _, node in self.disassociation_list():
                if not 0 <= node < self.n_nodes:
                    raise ValueError
        except ValueError:
            raise ConfigError("disassociations: expected 'time_us@node,...' "
                              "with valid node ids (got %r)" % self.disassociations)

    def replace(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **kw)

    def to_items(self) -> List[Tuple[str, str]]:
        return [(f.name, _fmt(getattr(self, f.name))) for f in fields(self)]

    def dumps(self) -> str:
        return "".join("%s=%s\n" % kv for kv in self.to_items())


def _fmt(v) -> str:
    if v is None:
        return "auto"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


_FIELD_TYPES = {f.name: f for f in fields(ExperimentConfig)}


# Short names accepted in config files and --set.
ALIASES = {"nodes": "n_nodes", "snr_db": "avg_snr_db", "packets": "n_packets",
           "fidelity": "phy_fidelity"}


def canonical(key: str) -> str:
    key = key.strip().replace("-", "_")
    return ALIASES.get(key, key)


def coerce(key: str, raw) -> object:
    key = canonical(key)
    if key not in _FIELD_TYPES:
        raise ConfigError("unknown key %r" % key)
    default = _FIELD_TYPES[key].default
    if not isinstance(raw, str):
        return raw
    raw = raw.strip()
    try:
        if key in ("enable_coop", "enable_ancol"):
            if raw.lower() in ("auto", "none", ""):
                return None
            return _parse_bool(raw)
        if isinstance(default, bool):
            return _parse_bool(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError("%s: cannot parse %r" % (key, raw))
    if key == "protocol":
        return raw.upper()
    if key == "modulation":
        return raw.upper()
    if key == "scenario":
        return raw.lower()
    return raw


def _parse_bool(raw: str) -> bool:
    low = raw.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(raw)


def parse_kv_text(text: str) -> Dict[str, object]:
    out: Dict[str, object] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError("line %d: expected key=value, got %r" % (lineno, line))
        key, value = (s.strip() for s in line.split("=", 1))
        out[canonical(key)] = coerce(key, value)
    return out


def build_config(*layers: Dict[str, object]) -> ExperimentConfig:
    """Defaults overlaid by each mapping in order (later wins)."""
    merged: Dict[str, object] = {}
    for layer in layers:
        for k, v in layer.items():
            merged[canonical(k)] = coerce(k, v)
    return ExperimentConfig(**merged)
