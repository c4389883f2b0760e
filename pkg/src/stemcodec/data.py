"""Dataset ingestion and the synthetic toy dataset.

Track layout on disk (one directory per track):

    <track>/stems/<name>.wav     16-bit PCM mono, one file per stem
    <track>/mix.wav              written by the toy generator; ignored by
                                 load_track, which always re-derives the
                                 mixture as the sum of the stems

Split manifests are plain text, one track directory per line, relative to
the manifest file's directory.
"""

from __future__ import annotations

import struct
import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dsp import Waveform, resample
from .errors import AudioFormatError, DatasetError

DEFAULT_STEMS = ("bass", "drums", "guitar", "piano")
PCM_SCALE = 32768.0
MIXTURE_PEAK = 0.95


@dataclass
class StemSet:
    """Named source waveforms plus their sum."""

    stems: dict[str, Waveform]
    mixture: Waveform

    def __post_init__(self):
        lengths = {name: len(w) for name, w in self.stems.items()}
        rates = {w.sample_rate for w in self.stems.values()} | {self.mixture.sample_rate}
        if len(set(lengths.values()) | {len(self.mixture)}) != 1:
            raise ValueError(f"stem lengths disagree: {lengths}, mixture {len(self.mixture)}")
        if len(rates) != 1:
            raise ValueError(f"sample rates disagree: {rates}")

    @property
    def stem_names(self) -> tuple[str, ...]:
        return tuple(self.stems)

    @property
    def sample_rate(self) -> int:
        return self.mixture.sample_rate

    def __len__(self) -> int:
        return len(self.mixture)

    @classmethod
    def from_stems(cls, stems: dict[str, Waveform]) -> "StemSet":
        total = np.sum([w.samples for w in stems.values()], axis=0)
        rate = next(iter(stems.values())).sample_rate
        return cls(stems=stems, mixture=Waveform(total, rate))


@dataclass
class DatasetSplit:
    train: list[Path] = field(default_factory=list)
    validation: list[Path] = field(default_factory=list)
    test: list[Path] = field(default_factory=list)

    def __post_init__(self):
        seen = set()
        for name in ("train", "validation", "test"):
            tracks = {str(t) for t in getattr(self, name)}
            if tracks & seen:
                raise ValueError(f"split '{name}' overlaps another split")
            seen |= tracks


def read_wav(path) -> Waveform:
    """Read a 16-bit PCM RIFF/WAVE file; stereo is downmixed by averaging."""
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as f:
            channels = f.getnchannels()
            width = f.getsampwidth()
            rate = f.getframerate()
            comptype = f.getcomptype()
            raw = f.readframes(f.getnframes())
    except (wave.Error, EOFError, struct.error) as exc:
        raise AudioFormatError(f"{path}: malformed WAV ({exc})") from exc
    if comptype != "NONE":
        raise AudioFormatError(f"{path}: compressed WAV ({comptype}) not supported")
    if width != 2:
        raise AudioFormatError(f"{path}: only 16-bit PCM supported, got {8 * width}-bit")
    if channels not in (1, 2):
        raise AudioFormatError(f"{path}: {channels} channels not supported")
    pcm = np.frombuffer(raw, dtype="<i2").astype(np.float64)
    if channels == 2:
        pcm = (pcm[0::2] + pcm[1::2]) / 2.0
    return Waveform(pcm / PCM_SCALE, rate)


def write_wav(path, w: Waveform) -> None:
    """Write mono 16-bit PCM; rounds half away from zero and clips to range."""
    pcm = _float_to_pcm(w.samples)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(w.sample_rate)
        f.writeframes(pcm.tobytes())


def _float_to_pcm(samples: np.ndarray) -> np.ndarray:
    scaled = samples * PCM_SCALE
    rounded = np.sign(scaled) * np.floor(np.abs(scaled) + 0.5)
    return np.clip(rounded, -32768, 32767).astype("<i2")


def load_track(dir_path, sample_rate: int = 22050, stem_names=DEFAULT_STEMS) -> StemSet:
    """Load one track directory into an aligned, peak-normalized StemSet.

    Stems are resampled to `sample_rate`, truncated to the shortest stem,
    and the mixture (their sum) is peak-normalized to 0.95 with the same
    gain applied to every stem so additivity is preserved.
    """
    dir_path = Path(dir_path)
    stems = {}
    for name in stem_names:
        wav_path = dir_path / "stems" / f"{name}.wav"
        if not wav_path.exists():
            raise DatasetError(f"missing stem file: {wav_path}")
        stems[name] = resample(read_wav(wav_path), sample_rate)
    n = min(len(w) for w in stems.values())
    arrays = {name: w.samples[:n] for name, w in stems.items()}
    mixture = np.sum(list(arrays.values()), axis=0)
    peak = np.max(np.abs(mixture)) if n else 0.0
    gain = MIXTURE_PEAK / peak if peak > 0 else 1.0
    return StemSet(
        stems={name: Waveform(a * gain, sample_rate) for name, a in arrays.items()},
        mixture=Waveform(mixture * gain, sample_rate),
    )


def chunk(track: StemSet, seconds: float = 4.0, hop_seconds: float | None = None) -> list[StemSet]:
    """Aligned fixed-length windows; the final partial window is dropped."""
    if hop_seconds is None:
        hop_seconds = seconds
    if hop_seconds <= 0:
        raise ValueError(f"hop_seconds must be positive, got {hop_seconds}")
    rate = track.sample_rate
    size = int(round(seconds * rate))
    hop = int(round(hop_seconds * rate))
    chunks = []
    for start in range(0, len(track) - size + 1, hop):
        window = slice(start, start + size)
        chunks.append(
            StemSet(
                stems={n: Waveform(w.samples[window], rate) for n, w in track.stems.items()},
                mixture=Waveform(track.mixture.samples[window], rate),
            )
        )
    return chunks


def split_sizes(n_tracks: int) -> tuple[int, int, int]:
    """70/15/15 split; remainders fall to the test split."""
    n_train = int(round(0.70 * n_tracks))
    n_val = int(round(0.15 * n_tracks))
    return n_train, n_val, n_tracks - n_train - n_val


def write_manifest(path, track_dirs) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(f"{d}\n" for d in track_dirs))


def read_manifest(path) -> list[Path]:
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"manifest not found: {path}")
    base = path.parent
    return [base / line.strip() for line in path.read_text().splitlines() if line.strip()]


# toy dataset -----------------------------------------------------------------

_MIDI_A4 = 69
_FREQ_A4 = 440.0

# per-stem peak levels; they sum below 1.0 so the PCM mixture cannot clip
_STEM_PEAKS = {"bass": 0.25, "drums": 0.20, "guitar": 0.22, "piano": 0.25}

_PENTATONIC = np.array([0, 3, 5, 7, 10])


def _midi_to_hz(midi) -> np.ndarray:
    return _FREQ_A4 * 2.0 ** ((np.asarray(midi, dtype=np.float64) - _MIDI_A4) / 12.0)


def _adsr(n: int, rate: int, attack: float, release: float) -> np.ndarray:
    env = np.ones(n)
    a = min(int(attack * rate), n)
    r = min(int(release * rate), n)
    if a:
        env[:a] = np.linspace(0.0, 1.0, a, endpoint=False)
    if r:
        env[n - r :] = np.minimum(env[n - r :], np.linspace(1.0, 0.0, r))
    return env


def _harmonic_tone(freq: float, n: int, rate: int, harmonics, nyquist_frac=0.45) -> np.ndarray:
    t = np.arange(n) / rate
    out = np.zeros(n)
    for k in harmonics:
        if k * freq < nyquist_frac * rate:
            out += np.sin(2 * np.pi * k * freq * t) / k
    return out


def _scale_walk(rng, n_steps: int, base_midi: int, span: int) -> np.ndarray:
    """Random walk over a pentatonic scale starting near base_midi."""
    degrees = np.arange(span)
    pos = rng.integers(0, span)
    notes = []
    for _ in range(n_steps):
        pos = int(np.clip(pos + rng.integers(-2, 3), 0, span - 1))
        octave, degree = divmod(degrees[pos], len(_PENTATONIC))
        notes.append(base_midi + 12 * octave + _PENTATONIC[degree])
    return np.array(notes)


def _bandpass_noise(rng, n: int, rate: int, lo_hz: float, hi_hz: float) -> np.ndarray:
    noise = rng.standard_normal(n)
    spectrum = np.fft.rfft(noise)
    freqs = np.fft.rfftfreq(n, 1.0 / rate)
    spectrum[(freqs < lo_hz) | (freqs > hi_hz)] = 0.0
    out = np.fft.irfft(spectrum, n)
    peak = np.max(np.abs(out))
    return out / peak if peak > 0 else out


def _events(rng, n_slots: int, rest_prob: float) -> np.ndarray:
    active = rng.random(n_slots) >= rest_prob
    if n_slots and not active.any():
        active[0] = True
    return active


def _gen_bass(rng, n: int, rate: int, beat: int) -> np.ndarray:
    out = np.zeros(n)
    n_beats = n // beat
    notes = _scale_walk(rng, n_beats, base_midi=33, span=8)  # A1 region
    active = _events(rng, n_beats, rest_prob=0.10)
    gate = int(0.9 * beat)
    for b in range(n_beats):
        if not active[b]:
            continue
        tone = _harmonic_tone(_midi_to_hz(notes[b]), gate, rate, harmonics=(1, 3, 5, 7, 9))
        out[b * beat : b * beat + gate] += tone * _adsr(gate, rate, 0.005, 0.05)
    return out


def _gen_drums(rng, n: int, rate: int, beat: int) -> np.ndarray:
    out = np.zeros(n)
    noise = _bandpass_noise(rng, n, rate, 2500.0, 9000.0)
    half = beat // 2
    n_hits = n // half
    active = _events(rng, n_hits, rest_prob=0.05)
    decay = np.exp(-np.arange(half) / (0.030 * rate))
    for h in range(n_hits):
        if not active[h]:
            continue
        accent = 1.0 if h % 2 == 0 else 0.6
        seg = slice(h * half, h * half + half)
        out[seg] += noise[seg] * decay[: out[seg].shape[0]] * accent
    return out


def _gen_guitar(rng, n: int, rate: int, beat: int) -> np.ndarray:
    out = np.zeros(n)
    slot = 2 * beat
    n_slots = max(n // slot, 1)
    roots = _scale_walk(rng, n_slots, base_midi=52, span=6)  # E3 region
    active = _events(rng, n_slots, rest_prob=0.08)
    gate = int(0.95 * slot)
    for s in range(n_slots):
        if not active[s] or s * slot + gate > n:
            continue
        chord = np.zeros(gate)
        for offset in (0, 4, 7):
            chord += _harmonic_tone(_midi_to_hz(roots[s] + offset), gate, rate, harmonics=range(1, 7))
        out[s * slot : s * slot + gate] += chord * _adsr(gate, rate, 0.03, 0.1)
    return out


def _gen_piano(rng, n: int, rate: int, beat: int) -> np.ndarray:
    out = np.zeros(n)
    half = beat // 2
    n_notes = n // half
    notes = _scale_walk(rng, n_notes, base_midi=76, span=10)  # E5 region
    active = _events(rng, n_notes, rest_prob=0.15)
    length = min(2 * half, n)
    decay = np.exp(-np.arange(length) / (0.25 * rate))
    t = np.arange(length) / rate
    for k in range(n_notes):
        if not active[k]:
            continue
        end = min(k * half + length, n)
        seg = end - k * half
        out[k * half : end] += np.sin(2 * np.pi * _midi_to_hz(notes[k]) * t[:seg]) * decay[:seg]
    return out


_GENERATORS = {
    "bass": _gen_bass,
    "drums": _gen_drums,
    "guitar": _gen_guitar,
    "piano": _gen_piano,
}


def generate_toy_track(seed: int, track_index: int, seconds: float, sample_rate: int = 22050) -> dict[str, np.ndarray]:
    """Four timbrally distinct stems for one track, deterministic in (seed, index)."""
    n = int(round(seconds * sample_rate))
    master = np.random.default_rng([seed, track_index])
    bpm = 90 + int(master.integers(0, 51))
    beat = int(round(60.0 / bpm * sample_rate))
    stems = {}
    for name, gen in _GENERATORS.items():
        rng = np.random.default_rng([seed, track_index, sum(map(ord, name))])
        raw = gen(rng, n, sample_rate, beat)
        peak = np.max(np.abs(raw))
        stems[name] = raw * (_STEM_PEAKS[name] / peak) if peak > 0 else raw
    return stems


def make_toy_dataset(n_tracks: int, seconds: float, seed: int, out_dir, sample_rate: int = 22050) -> DatasetSplit:
    """Write a Slakh-style toy dataset plus split manifests; returns the split.

    Stems are quantized to 16-bit PCM individually and mix.wav is the exact
    integer sum of the stem PCM, so mixture additivity holds bit-for-bit.
    """
    if n_tracks < 3:
        raise ValueError(f"need at least 3 tracks for a 3-way split, got {n_tracks}")
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DatasetError(f"cannot create dataset dir {out_dir}: {exc}") from exc

    track_names = []
    for i in range(n_tracks):
        name = f"track{i:04d}"
        track_names.append(name)
        stems = generate_toy_track(seed, i, seconds, sample_rate)
        pcm_sum = np.zeros(int(round(seconds * sample_rate)), dtype=np.int32)
        for stem_name, samples in stems.items():
            pcm = _float_to_pcm(samples)
            pcm_sum += pcm.astype(np.int32)
            write_wav(out_dir / name / "stems" / f"{stem_name}.wav", Waveform(samples, sample_rate))
        write_wav(out_dir / name / "mix.wav", Waveform(pcm_sum / PCM_SCALE, sample_rate))

    n_train, n_val, n_test = split_sizes(n_tracks)
    split = DatasetSplit(
        train=[out_dir / t for t in track_names[:n_train]],
        validation=[out_dir / t for t in track_names[n_train : n_train + n_val]],
        test=[out_dir / t for t in track_names[n_train + n_val :]],
    )
    write_manifest(out_dir / "train.txt", track_names[:n_train])
    write_manifest(out_dir / "validation.txt", track_names[n_train : n_train + n_val])
    write_manifest(out_dir / "test.txt", track_names[n_train + n_val :])
    return split
