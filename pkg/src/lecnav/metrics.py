"""CPPR, Savitzky-Golay smoothing of reward curves and convergence detection."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.signal import savgol_coeffs


class IncompleteEpisode(ValueError):
    pass


@dataclass
class RunCurve:
    values: np.ndarray
    scheme: str = ""
    seed: int = 0
    config_hash: str = ""
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)

    def __len__(self):
        return len(self.values)


# ------------------------------------------------------------------ CPPR

def cppr(gains_j, eta, lengths, t):
    """Weak-cell visits of one UE over steps 1..t, divided by the longest
    travel time in the episode.

    ``gains_j[u-1]`` is the gain of the cell the UE occupies after step u;
    entries past its own travel time are ignored.  ``lengths`` holds every
    UE's travel time, ``None`` for a UE that never arrived.
    """
    if any(T is None for T in lengths):
        raise IncompleteEpisode("CPPR is defined only when every UE has arrived")
    t_max = max(lengths)
    if not 0 <= t <= t_max:
        raise ValueError(f"t={t} outside [0, {t_max}]")
    if t_max == 0:
        return 0.0
    g = np.asarray(gains_j, dtype=float)
    return float(np.count_nonzero(g[:t] < eta) / t_max)


def cppr_curve(gains_j, eta, lengths):
    """CPPR at t = 0..max_j T_j."""
    t_max = max(T for T in lengths) if None not in lengths else None
    if t_max is None:
        raise IncompleteEpisode("CPPR is defined only when every UE has arrived")
    return np.array([cppr(gains_j, eta, lengths, t) for t in range(t_max + 1)])


def record_cppr(record):
    """Final CPPR per (episode, UE) of a rollout record, NaN where some UE
    of that episode did not arrive."""
    weak = record.weak.sum(axis=0).astype(float)   # (B, J)
    lengths = record.travel_times().max(axis=1, keepdims=True).astype(float)
    complete = record.done.all(axis=1, keepdims=True) & (lengths > 0)
    out = np.divide(weak, lengths, out=np.zeros_like(weak), where=lengths > 0)
    return np.where(complete, out, np.nan)


# ------------------------------------------------------------------ smoothing

def desk_window(n_episodes, poly_order=3):
    """About a tenth of the run, odd, and long enough for the polynomial."""
    w = max(int(round(n_episodes / 10)), poly_order + 2)
    if w % 2 == 0:
        w += 1
    while w > n_episodes and w > poly_order + 1:
        w -= 2
    return w


def smooth(curve, poly_order=3, window=301):
    """Savitzky-Golay smoothing; near the edges the window shrinks
    symmetrically (down to a single point at the ends)."""
    y = np.asarray(getattr(curve, "values", curve), dtype=float)
    n = len(y)
    if window % 2 == 0 or window <= poly_order or window > n:
        raise ValueError(f"need odd window with {poly_order} < window <= {n}, got {window}")
    half = window // 2
    out = np.empty(n)
    if n - 2 * half > 0:
        c = savgol_coeffs(window, poly_order, use="dot")
        out[half:n - half] = np.convolve(y, c[::-1], mode="valid")
    for i in list(range(min(half, n))) + list(range(max(n - half, half), n)):
        h = min(i, n - 1 - i, half)
        wl = 2 * h + 1
        c = savgol_coeffs(wl, min(poly_order, wl - 1), use="dot") if wl > 1 else np.ones(1)
        out[i] = c @ y[i - h:i + h + 1]
    if isinstance(curve, RunCurve):
        return RunCurve(out, curve.scheme, curve.seed, curve.config_hash, dict(curve.extra))
    return out


def convergence_episode(smoothed, fraction=0.8):
    """Earliest index from which the smoothed curve stays at or above
    ``fraction`` times its maximum; None if the last point is below."""
    y = np.asarray(getattr(smoothed, "values", smoothed), dtype=float)
    if len(y) == 0:
        return None
    thr = fraction * y.max()
    below = np.flatnonzero(y < thr)
    if len(below) == 0:
        return 0
    e = int(below[-1]) + 1
    return e if e < len(y) else None


# ------------------------------------------------------------------ summaries

def top_k_of_m(times, k=8):
    """Indices of the ``k`` least time-consuming scenarios (stable on ties)."""
    times = np.asarray(times, dtype=float)
    if not 0 < k <= len(times):
        raise ValueError(f"k={k} must lie in [1, {len(times)}]")
    return np.argsort(times, kind="stable")[:k]


def reduction(e_ec, e_lec):
    """Relative drop in convergence episodes, (e_EC - e_LEC) / e_EC."""
    if e_ec is None or e_lec is None:
        return None
    if e_ec == 0:
        return 0.0 if e_lec == 0 else -np.inf
    return (e_ec - e_lec) / e_ec
