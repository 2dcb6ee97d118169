"""Estimated rates of the direct, cooperative (AF) and overlapped-ANC modes and
the mode selection tests built on them. Rates are in bits/s, times in seconds.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional, Tuple

log = logging.getLogger(__name__)


@dataclass
class RateEstimateRow:
    pair1: Tuple[int, int]
    r_dir: float
    pair2: Optional[Tuple[int, int]] = None
    relay: Optional[int] = None
    r_coop: Optional[float] = None
    r_ancol: Optional[float] = None

    def __post_init__(self):
        if self.r_ancol is not None and (self.pair2 is None or self.relay is None):
            raise ValueError("r_ancol needs a second pair and a relay")
        if self.r_coop is not None and self.relay is None:
            raise ValueError("r_coop needs a relay")
        for r in (self.r_dir, self.r_coop, self.r_ancol):
            if r is not None and r < 0:
                raise ValueError("negative rate")


@dataclass(frozen=True)
class OverheadProfile:
    t_rts: float
    t_cts: float
    t_ctc: float
    t_sifs: float
    t_slot: float
    t_rbkf: float = 0.0

    def __post_init__(self):
        for name in ("t_rts", "t_cts", "t_ctc", "t_sifs", "t_slot", "t_rbkf"):
            if getattr(self, name) < 0:
                raise ValueError("%s must be >= 0" % name)


def r_dir(W: float, P: float, g1: float, noise_var: float) -> float:
    return W * math.log2(1 + P * g1 / noise_var)


def r_coop(W: float, P: float, g1: float, g2: float, g4: float, g: float,
           noise_var: float, form: str = "paper") -> float:
    """Two-slot AF rate.

    ``form="paper"`` takes the second branch as the product of the direct and
    relayed SNRs; ``form="mrc"`` uses their sum (maximal-ratio combining).
    """
    s1 = P * g1 / noise_var
    s2 = P * g2 / noise_var
    a = g4 * g * g
    s_rel = s2 * a / (1 + a)
    if form == "paper":
        second = s1 * s_rel
    elif form == "mrc":
        second = s1 + s_rel
    else:
        raise ValueError("unknown coop rate form %r" % form)
    return (W / 2) * min(math.log2(1 + s2), math.log2(1 + second))


def ancol_snr_sum(P: float, h1: complex, h2: complex, h4: complex,
                  h7: complex, h8: complex, g: float, noise_var: float) -> float:
    """Argument of the log in the overlapped-ANC sum rate, receiver side of
    the flow whose direct link is ``h1`` (cross link ``h8``, relay in from
    the own/other source ``h2``/``h7``, relay out ``h4``)."""
    g1, g2, g4 = abs(h1) ** 2, abs(h2) ** 2, abs(h4) ** 2
    g7, g8 = abs(h7) ** 2, abs(h8) ** 2
    s2 = noise_var
    s4 = noise_var * noise_var
    gg = g * g
    den = 1 + g4 * gg
    cross = (h1 * h2.conjugate() * h7 * h8.conjugate()).real
    return (1 + P * g1 / s2 + P * g8 / s2
            + P * g2 * g4 * gg / (s2 * den)
            + P * g4 * g7 * gg / (s2 * den)
            + P * P * g1 * g4 * g7 * gg / (s4 * den)
            + P * P * g2 * g4 * g8 * gg / (s4 * den)
            - P * P * g4 * cross * gg / (s4 * den))


def r_ancol(W: float, P: float, h1: complex, h2: complex, h4: complex,
            h7: complex, h8: complex, g: float, noise_var: float) -> float:
    arg = ancol_snr_sum(P, h1, h2, h4, h7, h8, g, noise_var)
    return W * math.log2(max(arg, 1.0))


def r_ancol_both(W: float, P: float, fwd: Tuple, rev: Tuple, g: float,
                 noise_var: float) -> float:
    """Conservative sum rate: the smaller of the two receivers' estimates.

    ``fwd``/``rev`` are ``(h_direct, h_src_relay, h_relay_dst, h_other_relay,
    h_cross)`` as seen by each destination.
    """
    return min(r_ancol(W, P, *fwd, g, noise_var),
               r_ancol(W, P, *rev, g, noise_var))


def _airtime(L: float, rate: float) -> float:
    return math.inf if rate <= 0 else L / rate


def coop_beneficial(L: float, r_coop_: float, r_dir_: float,
                    ovhd_coop: float) -> bool:
    return _airtime(L, r_coop_) + ovhd_coop < _airtime(L, r_dir_)


def ancol_beneficial(L: float, r_ancol_: float, r_coop_: float,
                     ovhd_ancol: float, ovhd_coop: float) -> bool:
    return (_airtime(L, r_ancol_) + ovhd_ancol
            < _airtime(L, r_coop_) + ovhd_coop)


def protocol_overhead(p: OverheadProfile) -> float:
    # The CTC is billed as one more CTS.
    return p.t_rts + 2 * p.t_cts + 3 * p.t_sifs + 2 * p.t_slot + p.t_rbkf


def relay_backoff_slots(r_norm: float, n_max: int) -> int:
    if n_max < 1:
        raise ValueError("n_max must be >= 1")
    if not 1.0 <= r_norm <= 2.0:
        log.warning("normalised rate gain %.4g outside [1, 2], clamping", r_norm)
        r_norm = min(2.0, max(1.0, r_norm))
    # Round away float noise such as 1.9*10 = 18.999999999999996.
    return 2 * n_max - math.floor(round(r_norm * n_max, 9))


def normalize_rate_gain(chosen_rate: float, baseline_rate: float) -> float:
    """Packets per direct-packet airtime, clamped to ``[1, 2]``.

    ``chosen_rate`` is the per-packet effective rate of the mode (the sum
    rate for overlapped ANC, which carries two packets per cycle).
    """
    if baseline_rate <= 0:
        return 1.0
    return min(2.0, max(1.0, chosen_rate / baseline_rate))
