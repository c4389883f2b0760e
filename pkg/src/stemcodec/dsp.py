"""Deterministic signal-processing kernels.

Everything here is a pure function: no global state, no RNG, bit-identical
output for identical input. The numpy half is the reference surface used by
tests and offline tools; the torch half provides the same mel-power frames
as differentiable ops for the codec losses.

Conventions (fixed across the package):
  * framing is center-less: frame t covers samples [t*hop, t*hop + win);
    trailing samples that do not fill a frame are dropped
  * window is periodic Hann: w[n] = 0.5 - 0.5*cos(2*pi*n/N)
  * mel scale is HTK (2595*log10(1 + f/700)), 64 triangular filters over
    [0, rate/2]; a filter whose triangle covers no FFT bin gets weight 1 at
    the bin nearest its center so every row has support
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np
import torch

N_MELS = 64


@dataclass(frozen=True)
class Waveform:
    """Mono audio: sample values (expected range [-1, 1]) plus their rate."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        object.__setattr__(self, "samples", samples)
        if samples.ndim != 1:
            raise ValueError(f"waveform must be 1-D, got shape {samples.shape}")
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


@dataclass(frozen=True)
class MelFilterbank:
    """64 triangular filters mapping a one-sided power spectrum to mel bands."""

    weights: np.ndarray  # (N_MELS, n_fft//2 + 1)
    sample_rate: int
    n_fft: int


@dataclass(frozen=True)
class MelSpectrogram:
    frames: np.ndarray  # (num_frames, N_MELS), non-negative power
    scale: int  # window length in samples
    hop: int  # scale // 4


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def hann_window(n: int) -> np.ndarray:
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


@functools.lru_cache(maxsize=None)
def _filterbank_cached(sample_rate: int, n_fft: int) -> MelFilterbank:
    n_bins = n_fft // 2 + 1
    bin_freqs = np.arange(n_bins) * (sample_rate / n_fft)
    mel_points = mel_to_hz(np.linspace(hz_to_mel(0.0), hz_to_mel(sample_rate / 2.0), N_MELS + 2))
    weights = np.zeros((N_MELS, n_bins), dtype=np.float64)
    for m in range(N_MELS):
        lo, center, hi = mel_points[m], mel_points[m + 1], mel_points[m + 2]
        rising = (bin_freqs - lo) / max(center - lo, 1e-12)
        falling = (hi - bin_freqs) / max(hi - center, 1e-12)
        weights[m] = np.clip(np.minimum(rising, falling), 0.0, None)
        if not weights[m].any():
            # Triangle narrower than the bin spacing: keep the filter usable.
            weights[m, int(np.argmin(np.abs(bin_freqs - center)))] = 1.0
    return MelFilterbank(weights=weights, sample_rate=sample_rate, n_fft=n_fft)


def mel_filterbank(sample_rate: int, n_fft: int) -> MelFilterbank:
    if sample_rate <= 0 or n_fft <= 0:
        raise ValueError("sample_rate and n_fft must be positive")
    return _filterbank_cached(int(sample_rate), int(n_fft))


def resample(w: Waveform, target_rate: int) -> Waveform:
    """Linear-interpolation resampling (not polyphase; fine at desk scale).

    Output length is round(T * target_rate / source_rate).
    """
    if target_rate <= 0:
        raise ValueError(f"target_rate must be positive, got {target_rate}")
    if not np.all(np.isfinite(w.samples)):
        raise ValueError("cannot resample non-finite samples")
    if target_rate == w.sample_rate:
        return Waveform(w.samples.copy(), w.sample_rate)
    n_in = len(w)
    n_out = int(round(n_in * target_rate / w.sample_rate))
    if n_in == 0 or n_out == 0:
        return Waveform(np.zeros(n_out, dtype=np.float64), target_rate)
    positions = np.arange(n_out, dtype=np.float64) * (w.sample_rate / target_rate)
    positions = np.minimum(positions, n_in - 1)
    out = np.interp(positions, np.arange(n_in, dtype=np.float64), w.samples)
    return Waveform(out, target_rate)


def frame_count(n_samples: int, window_len: int, hop: int) -> int:
    if n_samples < window_len:
        return 0
    return (n_samples - window_len) // hop + 1


def stft(w: Waveform, window_len: int, hop: int) -> np.ndarray:
    """Hann-windowed one-sided STFT, shape (num_frames, window_len//2 + 1)."""
    if hop < 1 or window_len < hop:
        raise ValueError(f"need window_len >= hop >= 1, got window_len={window_len} hop={hop}")
    if len(w) < window_len:
        raise ValueError(f"input too short: {len(w)} samples < window_len {window_len}")
    n_frames = frame_count(len(w), window_len, hop)
    window = hann_window(window_len)
    strides = (w.samples.strides[0] * hop, w.samples.strides[0])
    frames = np.lib.stride_tricks.as_strided(
        w.samples, shape=(n_frames, window_len), strides=strides, writeable=False
    )
    return np.fft.rfft(frames * window, axis=-1)


def mel_spectrogram(w: Waveform, scale: int) -> MelSpectrogram:
    """64-bin mel power spectrogram at window length `scale`, hop `scale/4`."""
    if scale <= 0 or scale & (scale - 1):
        raise ValueError(f"scale must be a power of two, got {scale}")
    if scale % 4:
        raise ValueError(f"scale must be divisible by 4, got {scale}")
    if scale > len(w):
        raise ValueError(f"scale {scale} exceeds signal length {len(w)}")
    hop = scale // 4
    spectrum = stft(w, scale, hop)
    power = spectrum.real**2 + spectrum.imag**2
    fb = mel_filterbank(w.sample_rate, scale)
    return MelSpectrogram(frames=power @ fb.weights.T, scale=scale, hop=hop)


def log_mel(m: MelSpectrogram, eps: float = 1e-5) -> np.ndarray:
    """Elementwise ln(max(power, eps)); eps floors the zero-power frames."""
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    return np.log(np.maximum(m.frames, eps))


# torch mirror of the mel pipeline, for differentiable losses ----------------


@functools.lru_cache(maxsize=None)
def _torch_constants(sample_rate: int, n_fft: int, dtype: torch.dtype):
    fb = torch.from_numpy(mel_filterbank(sample_rate, n_fft).weights.T).to(dtype)
    win = torch.from_numpy(hann_window(n_fft)).to(dtype)
    return fb, win


def mel_power_frames(x: torch.Tensor, scale: int, sample_rate: int) -> torch.Tensor:
    """Mel power frames of x (..., T) -> (..., num_frames, 64), differentiable.

    Matches mel_spectrogram() frame for frame when given the same float64 data.
    """
    if scale > x.shape[-1]:
        raise ValueError(f"scale {scale} exceeds signal length {x.shape[-1]}")
    hop = scale // 4
    fb, win = _torch_constants(sample_rate, scale, x.dtype)
    frames = x.unfold(-1, scale, hop) * win
    power = torch.view_as_real(torch.fft.rfft(frames, dim=-1)).square().sum(-1)
    return power @ fb
