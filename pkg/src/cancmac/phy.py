"""Symbol-level transmission model for direct, relayed and interfered frames.

All signal arrays are complex numpy vectors of one sample per symbol; the two
interfering streams are assumed to be aligned at the symbol level.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import brentq
from scipy.special import erfc

# Relative magnitude under which an effective gain counts as zero.
_ZERO_GAIN = 1e-12


class Scheme(str, Enum):
    BPSK = "BPSK"
    QPSK = "QPSK"


@dataclass(frozen=True)
class Constellation:
    scheme: Scheme
    points: np.ndarray
    bits_per_symbol: int

    def __len__(self):
        return len(self.points)


def constellation(scheme) -> Constellation:
    scheme = Scheme(str(scheme).upper())
    if scheme is Scheme.BPSK:
        pts = np.array([1.0 + 0j, -1.0 + 0j])
        return Constellation(scheme, pts, 1)
    # Gray labelled QPSK: index = 2*b0 + b1, I carries b0 and Q carries b1.
    s = 1 / math.sqrt(2)
    pts = np.array([s + 1j * s, s - 1j * s, -s + 1j * s, -s - 1j * s])
    return Constellation(scheme, pts, 2)


@dataclass
class SymbolStream:
    symbols: np.ndarray
    source_id: int = -1

    def __len__(self):
        return len(self.symbols)


class ObservationKind(str, Enum):
    DIRECT = "DIRECT"
    RELAYED = "RELAYED"


@dataclass
class Observation:
    samples: np.ndarray
    kind: ObservationKind

    def __len__(self):
        return len(self.samples)


def bits_to_indices(bits, const: Constellation) -> np.ndarray:
    bits = np.asarray(bits, dtype=np.int64)
    k = const.bits_per_symbol
    if bits.ndim != 1 or len(bits) % k:
        raise ValueError("bit count %d not divisible by %d" % (len(bits), k))
    if np.any((bits != 0) & (bits != 1)):
        raise ValueError("bits must be 0/1")
    if k == 1:
        return bits.copy()
    return bits[0::2] * 2 + bits[1::2]


def indices_to_bits(idx, const: Constellation) -> np.ndarray:
    idx = np.asarray(idx, dtype=np.int64)
    if const.bits_per_symbol == 1:
        return idx.copy()
    out = np.empty(2 * len(idx), dtype=np.int64)
    out[0::2] = idx >> 1
    out[1::2] = idx & 1
    return out


def modulate(bits, const: Constellation, source_id: int = -1) -> SymbolStream:
    return SymbolStream(const.points[bits_to_indices(bits, const)], source_id)


def nearest_indices(samples, const: Constellation) -> np.ndarray:
    d = np.abs(np.asarray(samples)[:, None] - const.points[None, :]) ** 2
    return np.argmin(d, axis=1)


def demodulate(stream, const: Constellation) -> np.ndarray:
    """Hard nearest-point decision back to bits."""
    samples = stream.symbols if isinstance(stream, SymbolStream) else stream
    return indices_to_bits(nearest_indices(samples, const), const)


def relay_gain(tx_power: float, incident_gains: Sequence[float],
               noise_var: float) -> float:
    """Amplify-and-forward scaling that keeps the relay's mean output power at
    ``tx_power`` given unit-power inputs over links of power ``incident_gains``."""
    if not tx_power > 0:
        raise ValueError("tx_power must be positive")
    total = float(sum(incident_gains))
    denom = tx_power * total + noise_var
    if denom <= 0:
        return 0.0
    return math.sqrt(tx_power / denom)


def complex_noise(noise_var: float, n: int, rng: Optional[np.random.Generator]):
    if noise_var <= 0:
        return np.zeros(n, dtype=complex)
    std = math.sqrt(noise_var / 2)
    return std * (rng.standard_normal(n) + 1j * rng.standard_normal(n))


def _symbols(x):
    return x.symbols if isinstance(x, SymbolStream) else np.asarray(x)


def compose_direct(x_a, x_b, h_dir: complex, h_cross: complex,
                   tx_power: float, noise_var: float,
                   rng: Optional[np.random.Generator] = None) -> Observation:
    """``y = sqrt(P) h_dir x_a + sqrt(P) h_cross x_b + n``.

    ``x_b`` may be ``None`` for an interference-free frame.
    """
    xa = _symbols(x_a)
    sp = math.sqrt(tx_power)
    y = sp * h_dir * xa
    if x_b is not None:
        xb = _symbols(x_b)
        if len(xb) != len(xa):
            raise ValueError("streams must have equal length")
        y = y + sp * h_cross * xb
    y = y + complex_noise(noise_var, len(xa), rng)
    return Observation(y, ObservationKind.DIRECT)


def compose_relayed(x_a, x_b, h_sr_a: complex, h_sr_b: complex, h_rd: complex,
                    g: float, tx_power: float, noise_var: float,
                    rng: Optional[np.random.Generator] = None,
                    relay_noise: Optional[np.ndarray] = None) -> Observation:
    """Amplified relay mixture as heard at one destination.

    ``relay_noise`` lets several destinations share the relay's own noise
    realisation; otherwise it is drawn here (before the destination noise).
    """
    xa = _symbols(x_a)
    n = len(xa)
    sp = math.sqrt(tx_power)
    mix = sp * h_sr_a * xa
    if x_b is not None:
        xb = _symbols(x_b)
        if len(xb) != n:
            raise ValueError("streams must have equal length")
        mix = mix + sp * h_sr_b * xb
    if relay_noise is None:
        relay_noise = complex_noise(noise_var, n, rng)
    y = h_rd * g * (mix + relay_noise) + complex_noise(noise_var, n, rng)
    return Observation(y, ObservationKind.RELAYED)


@dataclass(frozen=True)
class EffectiveGains:
    """Detector-side channel parameters (without the ``sqrt(P)`` factor)."""
    dir_a: complex
    dir_b: complex
    rel_a: complex
    rel_b: complex


@dataclass
class JointDetection:
    idx_a: np.ndarray
    idx_b: np.ndarray
    a_detectable: bool
    b_detectable: bool

    @property
    def failed(self) -> bool:
        return not (self.a_detectable or self.b_detectable)


def _is_zero(values, scale):
    return all(abs(v) <= _ZERO_GAIN * scale for v in values)


def ml_joint_detect(y_dir, y_rel, params: EffectiveGains,
                    dict_a: Constellation, dict_b: Constellation,
                    tx_power: float, weights: Tuple[float, float] = (1.0, 1.0),
                    chunk: int = 4096) -> JointDetection:
    """Exhaustive joint ML over all ``|A|*|B|`` symbol pairs.

    Minimises the (optionally weighted) sum of squared distances across the
    direct and relayed observations. Ties resolve to the lowest index of A,
    then of B. A stream whose effective gains are all zero is reported
    undetectable; if both are, the frame is a detection failure.
    """
    yd = y_dir.samples if isinstance(y_dir, Observation) else np.asarray(y_dir)
    yr = y_rel.samples if isinstance(y_rel, Observation) else np.asarray(y_rel)
    if len(yd) != len(yr):
        raise ValueError("observations must be aligned")
    gains = (params.dir_a, params.dir_b, params.rel_a, params.rel_b)
    if not all(np.isfinite(complex(v)) for v in gains):
        raise ValueError("non-finite channel estimate")
    scale = max(abs(v) for v in gains)
    a_ok = scale > 0 and not _is_zero((params.dir_a, params.rel_a), scale)
    b_ok = scale > 0 and not _is_zero((params.dir_b, params.rel_b), scale)

    sp = math.sqrt(tx_power)
    a = dict_a.points
    b = dict_b.points
    nb = len(b)
    pd = (sp * (params.dir_a * a[:, None] + params.dir_b * b[None, :])).ravel()
    pr = (sp * (params.rel_a * a[:, None] + params.rel_b * b[None, :])).ravel()
    wd, wr = weights
    best = np.empty(len(yd), dtype=np.int64)
    for s in range(0, len(yd), chunk):
        e = slice(s, s + chunk)
        d = wd * np.abs(yd[e, None] - pd[None, :]) ** 2
        d += wr * np.abs(yr[e, None] - pr[None, :]) ** 2
        best[e] = np.argmin(d, axis=1)
    return JointDetection(best // nb, best % nb, a_ok, b_ok)


def ml_detect(observations: Sequence, gains: Sequence[complex],
              const: Constellation, tx_power: float,
              weights: Optional[Sequence[float]] = None) -> np.ndarray:
    """Single-stream ML over ``const`` combining any number of branches."""
    if weights is None:
        weights = [1.0] * len(observations)
    sp = math.sqrt(tx_power)
    d = None
    for y, h, w in zip(observations, gains, weights):
        y = y.samples if isinstance(y, Observation) else np.asarray(y)
        term = w * np.abs(y[:, None] - sp * h * const.points[None, :]) ** 2
        d = term if d is None else d + term
    return np.argmin(d, axis=1)


def frame_success(detected: Tuple, truth: Tuple) -> Tuple[bool, bool]:
    """Per-stream success: every symbol must match (no FEC)."""
    out = []
    for det, ref in zip(detected, truth):
        det = _symbols(det) if not isinstance(det, np.ndarray) else det
        ref = _symbols(ref) if not isinstance(ref, np.ndarray) else ref
        if len(det) != len(ref):
            raise ValueError("length mismatch")
        out.append(bool(np.array_equal(det, ref)))
    return tuple(out)


def _q(x):
    return 0.5 * erfc(x / math.sqrt(2))


def symbol_error_rate(scheme, snr_lin: float) -> float:
    """AWGN symbol error probability for unit-energy symbols at ``Es/N0``."""
    scheme = Scheme(str(scheme).upper())
    if scheme is Scheme.BPSK:
        return float(_q(math.sqrt(2 * snr_lin)))
    p = _q(math.sqrt(snr_lin))
    return float(1 - (1 - p) ** 2)


def required_snr(n_symbols: int, scheme, success: float = 0.5) -> float:
    """SNR at which an uncoded frame of ``n_symbols`` succeeds with
    probability ``success`` over AWGN."""
    if n_symbols < 1:
        raise ValueError("n_symbols must be >= 1")
    target = 1 - success ** (1.0 / n_symbols)
    return brentq(lambda s: symbol_error_rate(scheme, s) - target, 1e-9, 1e4,
                  xtol=1e-12)
