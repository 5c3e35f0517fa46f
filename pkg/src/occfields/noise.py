"""SPAD-style photon-count noise.

Each bin becomes a Poisson draw with mean C * m + B, where B is a base
noise level drawn uniformly from [a, b] once per volume (or once per bin
with ``per_bin=True``). Draws come from a Philox counter-based generator so
a seed fixes the output regardless of threading.
"""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from .transient import TransientVolume

DEFAULT_PEAK_PHOTONS = 100.0


def scale_for_peak(m: np.ndarray, peak_photons: float = DEFAULT_PEAK_PHOTONS) -> float:
    """C that maps the peak bin of a clean volume to ``peak_photons`` counts."""
    peak = float(np.max(m))
    if peak <= 0:
        raise ValueError("cannot derive C from an all-zero volume")
    return peak_photons / peak


def spad_counts(m: np.ndarray, C: float, a: float, b: float, seed: int = 0,
                per_bin: bool = False) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if not C > 0:
        raise ValueError("C must be positive")
    if a < 0 or b < a:
        raise ValueError("need 0 <= a <= b")
    if np.any(m < 0) or not np.all(np.isfinite(m)):
        raise ValueError("measurement must be finite and non-negative")
    rng = np.random.Generator(np.random.Philox(seed))
    base = rng.uniform(a, b, size=m.shape) if per_bin else rng.uniform(a, b)
    return rng.poisson(C * m + base).astype(np.float64)


def add_spad_noise(volume: TransientVolume, C: float | None = None, a: float = 0.0, b: float = 0.0,
                   seed: int = 0, per_bin: bool = False,
                   peak_photons: float = DEFAULT_PEAK_PHOTONS) -> TransientVolume:
    """Noisy copy of ``volume``; C defaults to ``scale_for_peak(volume.data, peak_photons)``."""
    if C is None:
        C = scale_for_peak(volume.data, peak_photons)
    return replace(volume, data=spad_counts(volume.data, C, a, b, seed, per_bin))
