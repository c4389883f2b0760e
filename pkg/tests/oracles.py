"""Brute-force reference implementations used only by tests.

Nothing here may call into stemcodec's DSP/loss code paths: the point is to
re-derive expected values from first principles (explicit DFT sums, explicit
triangle filters, explicit norms) so the production code is checked against
an independent route.
"""

import numpy as np


def naive_dft(frame: np.ndarray) -> np.ndarray:
    """Full N-point DFT as an explicit O(N^2) sum."""
    n = len(frame)
    k = np.arange(n).reshape(-1, 1)
    t = np.arange(n).reshape(1, -1)
    basis = np.exp(-2j * np.pi * k * t / n)
    return basis @ frame.astype(np.float64)


def naive_hann(n: int) -> np.ndarray:
    return np.array([0.5 - 0.5 * np.cos(2.0 * np.pi * i / n) for i in range(n)])


def naive_mel_weights(sample_rate: int, n_fft: int, n_mels: int = 64) -> np.ndarray:
    """HTK-mel triangular filters, built independently of the package."""

    def to_mel(f):
        return 2595.0 * np.log10(1.0 + f / 700.0)

    def from_mel(m):
        return 700.0 * (10.0 ** (m / 2595.0) - 1.0)

    n_bins = n_fft // 2 + 1
    freqs = np.arange(n_bins) * sample_rate / n_fft
    edges = from_mel(np.linspace(0.0, to_mel(sample_rate / 2.0), n_mels + 2))
    weights = np.zeros((n_mels, n_bins))
    for m in range(n_mels):
        lo, mid, hi = edges[m], edges[m + 1], edges[m + 2]
        for b, f in enumerate(freqs):
            if lo < f < hi:
                weights[m, b] = (f - lo) / (mid - lo) if f <= mid else (hi - f) / (hi - mid)
            elif f == mid:
                weights[m, b] = 1.0
        if not weights[m].any():
            weights[m, int(np.argmin(np.abs(freqs - mid)))] = 1.0
    return weights


def naive_mel_power(signal: np.ndarray, sample_rate: int, scale: int) -> np.ndarray:
    """Mel power frames via explicit framing + naive DFT. (frames, 64)."""
    hop = scale // 4
    window = naive_hann(scale)
    weights = naive_mel_weights(sample_rate, scale)
    rows = []
    start = 0
    while start + scale <= len(signal):
        spectrum = naive_dft(signal[start : start + scale] * window)[: scale // 2 + 1]
        power = np.abs(spectrum) ** 2
        rows.append(weights @ power)
        start += hop
    return np.array(rows)


def naive_spectral_loss(
    targets: np.ndarray,
    estimates: np.ndarray,
    sample_rate: int,
    scales=(64, 128, 256, 512, 1024, 2048),
    alpha: float = 1.0,
    eps: float = 1e-5,
) -> float:
    """Multi-scale mel loss: per frame ||dS||_1 + alpha*||dlogS||_2, frame-mean
    per scale, scale-mean, summed over sources. targets/estimates: (S, T)."""
    total = 0.0
    for src in range(targets.shape[0]):
        per_scale = []
        for scale in scales:
            mel_t = naive_mel_power(targets[src], sample_rate, scale)
            mel_e = naive_mel_power(estimates[src], sample_rate, scale)
            frame_terms = []
            for t in range(mel_t.shape[0]):
                l1 = np.sum(np.abs(mel_t[t] - mel_e[t]))
                dlog = np.log(np.maximum(mel_t[t], eps)) - np.log(np.maximum(mel_e[t], eps))
                l2 = np.sqrt(np.sum(dlog**2))
                frame_terms.append(l1 + alpha * l2)
            per_scale.append(np.mean(frame_terms))
        total += np.mean(per_scale)
    return float(total)


def naive_si_sdr(reference: np.ndarray, estimate: np.ndarray, clamp_db: float = 100.0) -> float:
    """SI-SDR from the projection definition, written out longhand."""
    alpha = float(np.dot(estimate, reference) / np.dot(reference, reference))
    target = alpha * reference
    signal_energy = float(np.sum(target**2))
    error_energy = float(np.sum((target - estimate) ** 2))
    if error_energy <= 1e-12 * signal_energy:
        return clamp_db
    value = 10.0 * np.log10(signal_energy / error_energy)
    return float(np.clip(value, -clamp_db, clamp_db))
