"""Eulerian motion magnification: Laplacian pyramid decomposition, zero-phase
Butterworth temporal band-pass filtering, amplification, and reconstruction of
the isolated motion sequence.

The output reconstructs from the amplified, temporally filtered levels only;
the unfiltered input is never added back, so a static input maps to the exact
zero-motion value. The residual low-pass is treated as one more level: it is
band-passed like the difference bands (its DC appearance content is removed by
the filter) and contributes only in-band temporal variation.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.ndimage import convolve1d
from scipy.signal import butter, sosfiltfilt

from .errors import ConfigError, DataError
from .seqio import Sequence

# 5-tap binomial smoothing kernel; up/downsampling pads by mirror reflection
# (no edge duplication), which the reconstruction round trip depends on.
_KERNEL = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0

DEFAULT_LEVELS = 3
DEFAULT_BETA = 20.0


@dataclass
class BandpassSpec:
    """Butterworth band-pass parameters for a given sampling rate."""

    low_hz: float
    high_hz: float
    order: int = 2
    fps: float = 100.0

    def __post_init__(self):
        if not 0 < self.low_hz < self.high_hz < self.fps / 2:
            raise ConfigError(
                f"need 0 < low < high < fps/2, got ({self.low_hz}, {self.high_hz}) "
                f"at fps {self.fps}"
            )
        if self.order < 1:
            raise ConfigError(f"filter order must be >= 1, got {self.order}")


def default_band(fps: float) -> BandpassSpec:
    return BandpassSpec(low_hz=0.4, high_hz=4.0, order=2, fps=fps)


@dataclass
class Pyramid:
    """K difference bands (full resolution first) plus the low-pass residual."""

    bands: list[np.ndarray]
    residual: np.ndarray

    @property
    def levels(self) -> int:
        return len(self.bands)


def _blur(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    out = convolve1d(img, kernel, axis=0, mode="mirror")
    return convolve1d(out, kernel, axis=1, mode="mirror")


def _down(img: np.ndarray) -> np.ndarray:
    return _blur(img, _KERNEL)[::2, ::2]


def _up(img: np.ndarray) -> np.ndarray:
    h, w = img.shape[:2]
    out = np.zeros((2 * h, 2 * w) + img.shape[2:], dtype=np.float64)
    out[::2, ::2] = img
    return _blur(out, 2.0 * _KERNEL)


def _check_divisible(h: int, w: int, levels: int) -> None:
    step = 1 << levels
    if h % step or w % step:
        raise DataError(f"image size {h}x{w} not divisible by 2^{levels}")


def laplacian_decompose(frame: np.ndarray, levels: int = DEFAULT_LEVELS) -> Pyramid:
    """Split a (H, W[, C]) image into difference bands and a residual."""
    frame = np.asarray(frame, dtype=np.float64)
    _check_divisible(frame.shape[0], frame.shape[1], levels)
    bands = []
    g = frame
    for _ in range(levels):
        down = _down(g)
        bands.append(g - _up(down))
        g = down
    return Pyramid(bands=bands, residual=g)


def laplacian_reconstruct(pyr: Pyramid) -> np.ndarray:
    g = pyr.residual
    for band in reversed(pyr.bands):
        g = band + _up(g)
    return g


def temporal_bandpass(signal: np.ndarray, spec: BandpassSpec) -> np.ndarray:
    """Zero-phase (forward-backward) Butterworth band-pass along axis 0.

    The temporal mean is removed first; the pass-band gain of the combined
    forward-backward application is the squared one-pass magnitude response.
    """
    signal = np.asarray(signal, dtype=np.float64)
    t = signal.shape[0]
    if t < 4:
        raise DataError(f"need at least 4 samples along time, got {t}")
    sos = butter(spec.order, [spec.low_hz, spec.high_hz], btype="bandpass",
                 fs=spec.fps, output="sos")
    centered = signal - signal.mean(axis=0, keepdims=True)
    padlen = min(t - 1, 6 * (spec.order + 1))
    return sosfiltfilt(sos, centered, axis=0, padlen=padlen)


def magnify_motion_raw(
    seq: Sequence, beta: float, spec: BandpassSpec, levels: int = DEFAULT_LEVELS
) -> np.ndarray:
    """Amplified motion signal before clamping, as a signed (T,H,W,C) array."""
    t, h, w, _ = seq.frames.shape
    _check_divisible(h, w, levels)
    pyrs = [laplacian_decompose(seq.frames[i], levels) for i in range(t)]
    level_stacks = [
        np.stack([pyrs[i].bands[k] for i in range(t)]) for k in range(levels)
    ]
    level_stacks.append(np.stack([pyrs[i].residual for i in range(t)]))
    amplified = [beta * temporal_bandpass(stack, spec) for stack in level_stacks]
    out = np.empty_like(seq.frames)
    for i in range(t):
        pyr = Pyramid(bands=[amplified[k][i] for k in range(levels)],
                      residual=amplified[levels][i])
        out[i] = laplacian_reconstruct(pyr)
    return out


def magnify_sequence(
    seq: Sequence, beta: float, spec: BandpassSpec, levels: int = DEFAULT_LEVELS
) -> Sequence:
    """Isolated motion sequence: clamp the raw signal to [-1, 1], map to [0, 1]."""
    raw = magnify_motion_raw(seq, beta, spec, levels)
    mapped = (np.clip(raw, -1.0, 1.0) + 1.0) / 2.0
    return replace(seq, frames=mapped)
