"""Rayleigh block-fading links, pilot-based estimation and the reference
topology's channel naming.

Channel coefficients are plain Python/numpy complex numbers. The power of a
link is ``gamma = |h|**2``.
"""
from __future__ import annotations

import functools
from dataclasses import dataclass, field
from typing import Dict, Iterable, Optional, Tuple, Union

import numpy as np

ComplexGain = complex
ArrayOrScalar = Union[complex, np.ndarray]

# Reference five-node topology: N1->N2 and N4->N5 are the unicast flows, N3
# is the relay. Name -> (transmitter, receiver).
FIG1_CHANNELS: Dict[str, Tuple[str, str]] = {
    "h1": ("N1", "N2"),
    "h2": ("N1", "N3"),
    "h3": ("N1", "N5"),
    "h4": ("N3", "N2"),
    "h5": ("N3", "N5"),
    "h6": ("N4", "N5"),
    "h7": ("N4", "N3"),
    "h8": ("N4", "N2"),
}


@dataclass(frozen=True)
class NoiseModel:
    variance: float = 1e-9      # watts
    bandwidth: float = 20e6     # hertz

    def __post_init__(self):
        if not self.variance > 0:
            raise ValueError("noise variance must be positive")
        if not self.bandwidth > 0:
            raise ValueError("bandwidth must be positive")


@functools.lru_cache(maxsize=None)
def _upper(n: int):
    return np.triu_indices(n, 1)


def _normal_pair(rng: np.random.Generator, shape):
    # One call yields the same stream as two consecutive draws of ``shape``.
    if not isinstance(shape, tuple):
        shape = (int(shape),) if np.isscalar(shape) else tuple(shape)
    z = rng.standard_normal((2,) + shape)
    return z[0], z[1]


def sample_block_gain(avg_power, rng: np.random.Generator, size=None):
    """Draw a Rayleigh coefficient with ``E|h|^2 = avg_power``.

    ``avg_power`` may be an array, in which case one coefficient is drawn per
    element (``size`` defaults to its shape).
    """
    avg_power = np.asarray(avg_power, dtype=float)
    if np.any(avg_power < 0):
        raise ValueError("avg_power must be non-negative")
    if size is None:
        size = avg_power.shape
    std = np.sqrt(avg_power / 2.0)
    re, im = _normal_pair(rng, size)
    h = std * (re + 1j * im)
    if np.ndim(h) == 0:
        return complex(h)
    return h


def estimate_gain(true_gain: ArrayOrScalar, n_pilots: int, pilot_snr: float,
                  rng: np.random.Generator) -> ArrayOrScalar:
    """Least-squares pilot estimate: ``h + e`` with per-component error
    variance ``1 / (2 * n_pilots * pilot_snr)``.

    ``pilot_snr`` is the transmit SNR ``P / sigma^2`` seen by one pilot of a
    unit-gain link, so the error does not depend on the link's own power.
    """
    if n_pilots < 1:
        raise ValueError("n_pilots must be >= 1")
    if not pilot_snr > 0:
        raise ValueError("pilot_snr must be positive")
    h = np.asarray(true_gain, dtype=complex)
    std = np.sqrt(1.0 / (2.0 * n_pilots * pilot_snr))
    re, im = _normal_pair(rng, h.shape)
    e = std * (re + 1j * im)
    out = h + e
    if out.ndim == 0:
        return complex(out)
    return out


def snr(tx_power: float, gain_power: float, noise_var: float) -> float:
    if not noise_var > 0:
        raise ValueError("noise_var must be positive")
    return tx_power * gain_power / noise_var


def path_loss_power(distance, ref_distance: float, exponent: float,
                    ref_power: float, min_distance: float):
    """Log-distance mean link power, equal to ``ref_power`` at
    ``ref_distance`` and saturating below ``min_distance``."""
    d = np.maximum(np.asarray(distance, dtype=float), min_distance)
    return ref_power * (ref_distance / d) ** exponent


@dataclass
class LinkEntry:
    true_gain: complex
    est_gain: Optional[complex] = None
    est_time: float = -np.inf


@dataclass
class LinkTable:
    """True and most recent estimated gain for every node pair of the cell.

    With ``reciprocal`` set, ``(i, j)`` and ``(j, i)`` share one entry.
    Average powers come from the topology; :meth:`resample` draws a new
    fading block for every pair at once.
    """
    avg_power: np.ndarray
    reciprocal: bool = True
    _gains: np.ndarray = field(init=False, repr=False)
    _est: Dict[Tuple[int, int], Tuple[complex, float]] = field(
        init=False, repr=False, default_factory=dict)

    def __post_init__(self):
        self.avg_power = np.asarray(self.avg_power, dtype=float)
        n = self.avg_power.shape[0]
        if self.avg_power.shape != (n, n):
            raise ValueError("avg_power must be square")
        if np.any(self.avg_power < 0):
            raise ValueError("avg_power must be non-negative")
        self._gains = np.zeros((n, n), dtype=complex)
        # Per-link Rayleigh scale, fixed for the table's lifetime.
        self._std = np.sqrt(self.avg_power / 2.0)

    @property
    def n_nodes(self) -> int:
        return self.avg_power.shape[0]

    def resample(self, rng: np.random.Generator) -> None:
        n = self.n_nodes
        if self.reciprocal:
            iu = _upper(n)
            std = self._std[iu]
            re, im = _normal_pair(rng, std.shape)
            h = std * (re + 1j * im)
            g = np.zeros((n, n), dtype=complex)
            g[iu] = h
            g[(iu[1], iu[0])] = h
        else:
            g = sample_block_gain(self.avg_power, rng)
            np.fill_diagonal(g, 0)
        self._gains = g

    def set_gain(self, i: int, j: int, h: complex) -> None:
        self._gains[i, j] = h
        if self.reciprocal:
            self._gains[j, i] = h

    def gain(self, i: int, j: int) -> complex:
        """True coefficient of the link ``i -> j``."""
        return complex(self._gains[i, j])

    @property
    def gains(self) -> np.ndarray:
        return self._gains

    def _key(self, i: int, j: int) -> Tuple[int, int]:
        if self.reciprocal and i > j:
            return (j, i)
        return (i, j)

    def record_estimate(self, i: int, j: int, h: complex, t: float) -> None:
        key = self._key(i, j)
        old = self._est.get(key)
        if old is not None and t < old[1]:
            raise ValueError("estimate time went backwards for %r" % (key,))
        self._est[key] = (complex(h), t)

    def entry(self, i: int, j: int) -> LinkEntry:
        est = self._est.get(self._key(i, j))
        if est is None:
            return LinkEntry(self.gain(i, j))
        return LinkEntry(self.gain(i, j), est[0], est[1])

    def pairs(self) -> Iterable[Tuple[int, int]]:
        n = self.n_nodes
        for i in range(n):
            for j in range(n):
                if i != j and (not self.reciprocal or i < j):
                    yield (i, j)
