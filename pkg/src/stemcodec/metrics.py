"""Scale-invariant SDR, its improvement over the mixture, and the chunked
evaluation protocol (4 s windows, 2 s overlap, at least two active sources).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping

import numpy as np

from .data import StemSet
from .dsp import Waveform

log = logging.getLogger(__name__)

CLAMP_DB = 100.0
ACTIVITY_RMS = 1e-4  # roughly -80 dBFS


@dataclass(frozen=True)
class EvalReport:
    per_stem_si_sdri: dict[str, float]
    all_mean: float
    chunk_count: int
    per_stem_chunks: dict[str, int]


def _samples(x) -> np.ndarray:
    if isinstance(x, Waveform):
        return x.samples
    return np.asarray(x, dtype=np.float64)


def si_sdr(reference, estimate, clamp_db: float = CLAMP_DB) -> float:
    """10*log10(||a*ref||^2 / ||a*ref - est||^2) with a the projection gain;
    clamped to +/-clamp_db, +clamp_db when the error is negligible."""
    ref = _samples(reference)
    est = _samples(estimate)
    if ref.shape != est.shape:
        raise ValueError(f"length mismatch: {ref.shape} vs {est.shape}")
    ref_energy = float(np.dot(ref, ref))
    if ref_energy == 0.0:
        raise ValueError("si_sdr undefined for an all-zero reference")
    alpha = float(np.dot(est, ref)) / ref_energy
    target = alpha * ref
    signal = float(np.dot(target, target))
    error = float(np.sum((target - est) ** 2))
    if error <= 1e-12 * signal:
        return clamp_db
    if signal == 0.0:
        return -clamp_db
    return float(np.clip(10.0 * np.log10(signal / error), -clamp_db, clamp_db))


def si_sdri(reference, estimate, mixture, clamp_db: float = CLAMP_DB) -> float:
    """Improvement of the estimate over just using the mixture."""
    return si_sdr(reference, estimate, clamp_db) - si_sdr(reference, mixture, clamp_db)


def rms(x) -> float:
    s = _samples(x)
    return float(np.sqrt(np.mean(s**2))) if s.size else 0.0


Separator = Callable[[StemSet], Mapping[str, object]]


def evaluate(
    separator: Separator,
    tracks: Iterable[StemSet],
    chunk_seconds: float = 4.0,
    overlap_seconds: float = 2.0,
    activity_threshold: float = ACTIVITY_RMS,
    clamp_db: float = CLAMP_DB,
) -> EvalReport:
    """Slide a window over each track; score chunks with >= 2 active sources.

    The separator receives each chunk StemSet and must derive its estimates
    from chunk.mixture alone (fixtures may peek at the stems). Inactive stems
    within an evaluated chunk are skipped: SI-SDR has no meaning for a silent
    reference. Per-stem values are sorted before averaging so the report does
    not depend on track order.
    """
    if overlap_seconds >= chunk_seconds:
        raise ValueError("overlap must be smaller than the chunk")
    values: dict[str, list[float]] = {}
    chunk_count = 0
    for track in tracks:
        rate = track.sample_rate
        size = int(round(chunk_seconds * rate))
        hop = size - int(round(overlap_seconds * rate))
        if len(track) < size:
            log.warning("skipping track shorter than one %.3gs chunk (%d samples)", chunk_seconds, len(track))
            continue
        for start in range(0, len(track) - size + 1, hop):
            window = slice(start, start + size)
            refs = {n: w.samples[window] for n, w in track.stems.items()}
            active = {n for n, r in refs.items() if np.sqrt(np.mean(r**2)) > activity_threshold}
            if len(active) < 2:
                continue
            piece = StemSet(
                stems={n: Waveform(r, rate) for n, r in refs.items()},
                mixture=Waveform(track.mixture.samples[window], rate),
            )
            estimates = separator(piece)
            chunk_count += 1
            for name in active:
                value = si_sdri(refs[name], _samples(estimates[name]), piece.mixture, clamp_db)
                values.setdefault(name, []).append(value)
    per_stem = {n: float(np.mean(sorted(v))) for n, v in sorted(values.items())}
    all_mean = float(np.mean(list(per_stem.values()))) if per_stem else float("nan")
    return EvalReport(
        per_stem_si_sdri=per_stem,
        all_mean=all_mean,
        chunk_count=chunk_count,
        per_stem_chunks={n: len(v) for n, v in sorted(values.items())},
    )


def format_report(report: EvalReport) -> str:
    """Plain-text table, one row per stem plus the All average."""
    lines = [
        "Stem        SI-SDRi (dB)   chunks",
        "---------------------------------",
    ]
    for name, value in report.per_stem_si_sdri.items():
        lines.append(f"{name:<12}{value:>10.2f}   {report.per_stem_chunks[name]:>6d}")
    lines.append("---------------------------------")
    lines.append(f"{'All':<12}{report.all_mean:>10.2f}   {report.chunk_count:>6d}")
    return "\n".join(lines) + "\n"


def report_to_kv(report: EvalReport) -> str:
    """Machine-readable form: one key=value per line.

    Keys: chunk_count, si_sdri.<stem>, chunks.<stem>, si_sdri.all
    """
    lines = [f"chunk_count={report.chunk_count}"]
    for name, value in report.per_stem_si_sdri.items():
        lines.append(f"si_sdri.{name}={value!r}")
        lines.append(f"chunks.{name}={report.per_stem_chunks[name]}")
    lines.append(f"si_sdri.all={report.all_mean!r}")
    return "\n".join(lines) + "\n"


def parse_kv(text: str) -> dict[str, float]:
    out = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        key, _, value = line.partition("=")
        out[key] = float(value)
    return out
