"""Uplink radio model: channel maps, channel-inversion power control, AWGN
corruption of symbol vectors and of 16QAM-modulated text."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import erfc


class SingularChannelError(ValueError):
    pass


@dataclass
class ChannelMap:
    """Per-cell linear channel gain |h|^2, indexed ``gains[x, y]``."""

    gains: np.ndarray
    phases: np.ndarray | None = None

    def __post_init__(self):
        self.gains = np.asarray(self.gains, dtype=np.float64)
        if self.gains.ndim != 2:
            raise ValueError(f"gains must be 2-D, got shape {self.gains.shape}")
        if not np.all(np.isfinite(self.gains)) or np.any(self.gains < 0):
            raise ValueError("gains must be finite and non-negative")
        if self.phases is None:
            self.phases = np.zeros_like(self.gains)
        else:
            self.phases = np.mod(np.asarray(self.phases, dtype=np.float64), 2 * np.pi)

    @property
    def shape(self):
        return self.gains.shape

    def gain(self, cell):
        return float(self.gains[cell[0], cell[1]])


@dataclass(frozen=True)
class LinkBudget:
    """Target received power ``p_r``, noise power ``sigma2`` and per-UE
    transmit budget ``p_th`` (all in watts)."""

    p_r: float
    sigma2: float
    p_th: float
    eta: float = field(init=False)

    def __post_init__(self):
        if self.p_r <= 0 or self.p_th <= 0 or self.sigma2 < 0:
            raise ValueError(f"invalid link budget {self.p_r=}, {self.sigma2=}, {self.p_th=}")
        object.__setattr__(self, "eta", self.p_r / self.p_th)

    @classmethod
    def from_snr_db(cls, snr_db, p_th, p_r=1.0):
        return cls(p_r=p_r, sigma2=p_r / 10 ** (snr_db / 10), p_th=p_th)

    @property
    def snr(self):
        return np.inf if self.sigma2 == 0 else self.p_r / self.sigma2


def tx_power(gain, budget: LinkBudget):
    """Channel-inversion transmit power P_r / |h|^2."""
    if gain <= 0:
        raise SingularChannelError("zero channel gain: cell unreachable on the uplink")
    return budget.p_r / gain


def is_weak(gain, eta):
    # strict: gain == eta is served within budget
    return gain < eta


def received_snr(gain, budget: LinkBudget):
    return tx_power(gain, budget) * gain / budget.sigma2


def quantize_map(cmap: ChannelMap, eta) -> np.ndarray:
    """Weak-cell mask (True where |h|^2 < eta)."""
    return cmap.gains < eta


# ------------------------------------------------------------------ symbol link

def normalize_symbols(symbols):
    s = np.asarray(symbols, dtype=np.complex128)
    p = np.mean(np.abs(s) ** 2)
    return s / np.sqrt(p) if p > 0 else s


def symbol_noise_std(budget: LinkBudget):
    """Per-real-dimension noise std after scaling the received symbols by
    1/sqrt(P_r)."""
    return np.sqrt(budget.sigma2 / budget.p_r / 2.0)


def transmit_symbols(symbols, budget: LinkBudget, rng, gain=None):
    """Send unit-power complex symbols over the inverted uplink.

    With channel inversion and coherent phase compensation the BS sees
    sqrt(P_r)*m + n regardless of the cell gain; the result is rescaled by
    1/sqrt(P_r) so the caller gets m + n' with var(n') = sigma^2 / P_r.
    """
    s = np.asarray(symbols, dtype=np.complex128)
    if gain is not None:
        amp = np.sqrt(tx_power(gain, budget) * gain)
    else:
        amp = np.sqrt(budget.p_r)
    if budget.sigma2 == 0:
        return s * (amp / np.sqrt(budget.p_r))
    rng = np.random.default_rng(rng)
    std = np.sqrt(budget.sigma2 / 2.0)
    n = rng.normal(0.0, std, s.shape) + 1j * rng.normal(0.0, std, s.shape)
    return (amp * s + n) / np.sqrt(budget.p_r)


# ------------------------------------------------------------------ 16QAM text link

# 2-bit Gray code per axis: 00 -> -3, 01 -> -1, 11 -> +1, 10 -> +3
_GRAY_LEVELS = np.array([-3.0, -1.0, 3.0, 1.0])
_LEVEL_TO_BITS = np.array([0b00, 0b01, 0b11, 0b10])
_QAM_NORM = np.sqrt(10.0)


def qam16_constellation():
    """Unit-average-energy points indexed by 4-bit label (I bits high)."""
    labels = np.arange(16)
    return (_GRAY_LEVELS[labels >> 2] + 1j * _GRAY_LEVELS[labels & 3]) / _QAM_NORM


def qam16_modulate(nibbles):
    nibbles = np.asarray(nibbles, dtype=np.int64)
    return qam16_constellation()[nibbles]


def qam16_demodulate(symbols):
    s = np.asarray(symbols) * _QAM_NORM
    # nearest of -3,-1,1,3 per axis, as index 0..3
    i_idx = np.clip(np.floor((s.real + 4) / 2), 0, 3).astype(np.int64)
    q_idx = np.clip(np.floor((s.imag + 4) / 2), 0, 3).astype(np.int64)
    return (_LEVEL_TO_BITS[i_idx] << 2) | _LEVEL_TO_BITS[q_idx]


def bytes_to_nibbles(data: bytes):
    b = np.frombuffer(bytes(data), dtype=np.uint8).astype(np.int64)
    return np.stack([b >> 4, b & 0xF], axis=-1).ravel()


def nibbles_to_bytes(nibbles) -> bytes:
    n = np.asarray(nibbles, dtype=np.int64).reshape(-1, 2)
    return ((n[:, 0] << 4) | n[:, 1]).astype(np.uint8).tobytes()


def awgn(symbols, snr_db, rng):
    """Complex AWGN at Es/N0 = snr_db for unit-energy symbols."""
    if np.isinf(snr_db) and snr_db > 0:
        return np.asarray(symbols, dtype=np.complex128)
    n0 = 10 ** (-snr_db / 10)
    std = np.sqrt(n0 / 2)
    shape = np.shape(symbols)
    return symbols + rng.normal(0, std, shape) + 1j * rng.normal(0, std, shape)


def transmit_text(text, snr_db, rng) -> str:
    """ASCII/8-bit text -> 16QAM -> AWGN -> hard decisions -> text.

    Accepts ``str`` (encoded latin-1) or ``bytes``; returns the same type.
    """
    as_str = isinstance(text, str)
    raw = text.encode("latin-1") if as_str else bytes(text)
    if not raw:
        return text
    rng = np.random.default_rng(rng)
    rx = awgn(qam16_modulate(bytes_to_nibbles(raw)), snr_db, rng)
    out = nibbles_to_bytes(qam16_demodulate(rx))
    return out.decode("latin-1") if as_str else out


def qfunc(x):
    return 0.5 * erfc(np.asarray(x) / np.sqrt(2.0))


def qam16_ser(snr_db):
    """Symbol error rate of Gray 16QAM with coherent detection, Es/N0 in dB.

    Exact for square QAM: 3Q(sqrt(Es/5N0)) - 2.25 Q(sqrt(Es/5N0))^2.
    """
    q = qfunc(np.sqrt(10 ** (np.asarray(snr_db) / 10) / 5.0))
    return 3.0 * q - 2.25 * q * q


def qam16_ser_approx(snr_db):
    return 3.0 * qfunc(np.sqrt(10 ** (np.asarray(snr_db) / 10) / 5.0))


# ------------------------------------------------------------------ synthetic maps

def _segment_blocked(x0, y0, x1, y1, buildings, samples_per_cell=8):
    d = max(abs(x1 - x0), abs(y1 - y0))
    if d == 0:
        return False
    n = int(np.ceil(d * samples_per_cell))
    ts = np.linspace(0.0, 1.0, n + 1)[1:-1]
    xs = np.rint(x0 + ts * (x1 - x0)).astype(int)
    ys = np.rint(y0 + ts * (y1 - y0)).astype(int)
    hit = buildings[xs, ys]
    # the BS sits on a building and the start cell is the UE's own
    hit &= ~((xs == x1) & (ys == y1)) & ~((xs == x0) & (ys == y0))
    return bool(hit.any())


def _smooth_field(field_, radius=2):
    offs = np.arange(-radius, radius + 1)
    k = np.exp(-0.5 * (offs / max(radius / 2.0, 1e-9)) ** 2)
    k /= np.sqrt((k ** 2).sum())  # unit-variance output for white input
    out = field_
    for axis in (0, 1):
        pad = [(0, 0), (0, 0)]
        pad[axis] = (radius, radius)
        p = np.pad(out, pad, mode="reflect")
        out = sum(k[i] * np.take(p, np.arange(i, i + out.shape[axis]), axis=axis)
                  for i in range(len(k)))
    return out


def synth_map(width, height, bs, buildings=None, pathloss_exponent=3.0,
              shadowing_std_db=0.0, seed=0, k0=1e-6, blockage=1e-3,
              correlation_radius=2) -> ChannelMap:
    """Log-distance path loss with correlated log-normal shadowing and a fixed
    attenuation for cells whose straight line to the BS crosses a building.

    ``k0`` is the gain at unit distance (one cell).
    """
    if buildings is None:
        buildings = np.zeros((width, height), dtype=bool)
    buildings = np.asarray(buildings, dtype=bool)
    rng = np.random.default_rng(seed)
    xs, ys = np.meshgrid(np.arange(width), np.arange(height), indexing="ij")
    d = np.maximum(np.hypot(xs - bs[0], ys - bs[1]), 1.0)
    gains = k0 * d ** (-pathloss_exponent)
    if shadowing_std_db > 0:
        s = _smooth_field(rng.standard_normal((width, height)), correlation_radius)
        gains = gains * 10 ** (shadowing_std_db * s / 10)
    for x in range(width):
        for y in range(height):
            if _segment_blocked(x, y, bs[0], bs[1], buildings):
                gains[x, y] *= blockage
    return ChannelMap(gains)
