"""Audio and alignment front-end.

Waveform conditioning, log-mel / energy / F0 extraction on a 12 ms hop and
48 ms window, alignment ingestion, and the per-utterance feature cache.
"""

from __future__ import annotations

import io
import math
import os
import struct
import wave
from dataclasses import dataclass
from fractions import Fraction
from typing import Dict, List, Mapping, NamedTuple, Sequence

import numpy as np
from scipy.signal import get_window, resample_poly

from .config import (
    HOP_LENGTH,
    HOP_SECONDS,
    N_FFT,
    N_MEL,
    SAMPLE_RATE,
    WIN_LENGTH,
)

SUPPORTED_RATES = (16000, 22050, 24000, 44100, 48000)
PEAK_TARGET = 10.0 ** (-6.0 / 20.0)
LOG_FLOOR = 1e-5
F0_MIN = 50.0
F0_MAX = 600.0
VOICING_THRESHOLD = 0.3
CACHE_MAGIC = b"MSMSFEAT1"


class FeatureError(ValueError):
    """Raised for malformed audio, alignments or cache files."""


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __len__(self) -> int:
        return len(self.samples)


# ---------------------------------------------------------------------------
# WAV I/O
# ---------------------------------------------------------------------------

def read_wav(path: str) -> Waveform:
    """Read a 16-bit PCM mono RIFF file into floats in [-1, 1)."""
    with wave.open(os.fspath(path), "rb") as f:
        if f.getnchannels() != 1:
            raise FeatureError(f"{path}: expected mono, got {f.getnchannels()} channels")
        if f.getsampwidth() != 2:
            raise FeatureError(f"{path}: expected 16-bit PCM")
        rate = f.getframerate()
        data = f.readframes(f.getnframes())
    samples = np.frombuffer(data, dtype="<i2").astype(np.float64) / 32768.0
    return Waveform(samples, rate)


def wav_bytes(samples: np.ndarray, sample_rate: int = SAMPLE_RATE) -> bytes:
    pcm = np.clip(np.round(np.asarray(samples, dtype=np.float64) * 32767.0), -32768, 32767)
    buf = io.BytesIO()
    with wave.open(buf, "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(sample_rate)
        f.writeframes(pcm.astype("<i2").tobytes())
    return buf.getvalue()


def write_wav(path: str, samples: np.ndarray, sample_rate: int = SAMPLE_RATE) -> None:
    with open(path, "wb") as f:
        f.write(wav_bytes(samples, sample_rate))


# ---------------------------------------------------------------------------
# Conditioning and spectral analysis
# ---------------------------------------------------------------------------

def condition_wave(samples, sample_rate: int) -> Waveform:
    """Resample to 16 kHz and peak-normalize to -6 dBFS."""
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise FeatureError("waveform must be a nonempty 1-D array")
    if not np.all(np.isfinite(x)):
        raise FeatureError("waveform contains non-finite samples")
    if sample_rate not in SUPPORTED_RATES:
        raise FeatureError(f"unsupported sample rate {sample_rate}")
    if sample_rate != SAMPLE_RATE:
        ratio = Fraction(SAMPLE_RATE, sample_rate)
        x = resample_poly(x, ratio.numerator, ratio.denominator)
    peak = np.max(np.abs(x))
    if peak == 0.0:
        raise FeatureError("cannot normalize silence")
    return Waveform(x * (PEAK_TARGET / peak), SAMPLE_RATE)


def num_frames(n_samples: int) -> int:
    return -(-n_samples // HOP_LENGTH)


def _frames(samples: np.ndarray) -> np.ndarray:
    """Centered (F, N_FFT) frames; frame t is centered on sample t * hop."""
    n = len(samples)
    if n < HOP_LENGTH:
        raise FeatureError(f"input of {n} samples is shorter than one hop ({HOP_LENGTH})")
    pad = N_FFT // 2
    padded = np.pad(samples, pad, mode="reflect")
    count = num_frames(n)
    idx = np.arange(N_FFT)[None, :] + HOP_LENGTH * np.arange(count)[:, None]
    return padded[idx]


def analysis_window() -> np.ndarray:
    """Periodic Hann of the analysis length, zero-padded to the FFT size."""
    win = get_window("hann", WIN_LENGTH, fftbins=True)
    left = (N_FFT - WIN_LENGTH) // 2
    return np.pad(win, (left, N_FFT - WIN_LENGTH - left))


def stft(samples: np.ndarray) -> np.ndarray:
    """Complex spectrogram of shape (F, N_FFT // 2 + 1)."""
    return np.fft.rfft(_frames(np.asarray(samples, dtype=np.float64)) * analysis_window(), axis=1)


def istft(spec: np.ndarray, length: int | None = None) -> np.ndarray:
    """Weighted overlap-add inverse of :func:`stft`."""
    n_frames = spec.shape[0]
    win = analysis_window()
    frames = np.fft.irfft(spec, n=N_FFT, axis=1) * win
    total = N_FFT + HOP_LENGTH * (n_frames - 1)
    out = np.zeros(total)
    norm = np.zeros(total)
    for t in range(n_frames):
        s = t * HOP_LENGTH
        out[s:s + N_FFT] += frames[t]
        norm[s:s + N_FFT] += win ** 2
    nz = norm > 1e-8
    out[nz] /= norm[nz]
    out = out[N_FFT // 2:]
    if length is None:
        length = n_frames * HOP_LENGTH
    if len(out) < length:
        out = np.pad(out, (0, length - len(out)))
    return out[:length]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


_FILTERBANK_CACHE: Dict[tuple, np.ndarray] = {}


def mel_filterbank(n_mel: int = N_MEL, fmin: float = 0.0, fmax: float = SAMPLE_RATE / 2) -> np.ndarray:
    """Triangular (n_mel, N_FFT // 2 + 1) filterbank with unit peaks."""
    key = (n_mel, fmin, fmax)
    if key not in _FILTERBANK_CACHE:
        freqs = np.fft.rfftfreq(N_FFT, 1.0 / SAMPLE_RATE)
        edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mel + 2))
        lower = (freqs[None, :] - edges[:-2, None]) / (edges[1:-1] - edges[:-2])[:, None]
        upper = (edges[2:, None] - freqs[None, :]) / (edges[2:] - edges[1:-1])[:, None]
        _FILTERBANK_CACHE[key] = np.maximum(0.0, np.minimum(lower, upper))
    return _FILTERBANK_CACHE[key]


def mel_center_frequencies(n_mel: int = N_MEL) -> np.ndarray:
    return mel_to_hz(np.linspace(hz_to_mel(0.0), hz_to_mel(SAMPLE_RATE / 2), n_mel + 2))[1:-1]


def mel_spectrogram(w: Waveform) -> np.ndarray:
    """Natural-log mel magnitude spectrogram of shape (F, 80)."""
    mag = np.abs(stft(w.samples))
    return np.log(np.maximum(mag @ mel_filterbank().T, LOG_FLOOR))


def frame_energy(w: Waveform) -> np.ndarray:
    """Per-frame L2 norm of the linear magnitude spectrum."""
    return np.linalg.norm(np.abs(stft(w.samples)), axis=1)


def estimate_f0(w: Waveform) -> np.ndarray:
    """Per-frame F0 in Hz from the normalized autocorrelation; 0 marks unvoiced.

    Each frame uses the 48 ms segment centered on the frame. The smallest-lag
    local maximum reaching 90% of the best candidate is taken, which keeps
    period multiples from winning on clean harmonic signals.
    """
    frames = _frames(np.asarray(w.samples, dtype=np.float64))
    left = (N_FFT - WIN_LENGTH) // 2
    seg = frames[:, left:left + WIN_LENGTH]
    n = WIN_LENGTH

    spec = np.fft.rfft(seg, n=2 * n, axis=1)
    acf = np.fft.irfft(np.abs(spec) ** 2, n=2 * n, axis=1)[:, :n]
    sq = np.concatenate([np.zeros((len(seg), 1)), np.cumsum(seg ** 2, axis=1)], axis=1)
    total = sq[:, -1:]

    lag_lo = int(math.ceil(SAMPLE_RATE / F0_MAX))
    lag_hi = int(math.floor(SAMPLE_RATE / F0_MIN))
    lags = np.arange(lag_lo - 1, lag_hi + 2)
    e_head = sq[:, n - lags]  # energy of seg[:n - lag]
    e_tail = total - sq[:, lags]  # energy of seg[lag:]
    denom = np.sqrt(e_head * e_tail)
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.where(denom > 1e-12, acf[:, lags] / denom, 0.0)

    f0 = np.zeros(len(seg))
    for t in range(len(seg)):
        if total[t, 0] <= 1e-10:
            continue
        rt = r[t]
        inner = rt[1:-1]
        is_peak = (inner >= rt[:-2]) & (inner >= rt[2:])
        cand = np.nonzero(is_peak)[0] + 1
        if cand.size == 0:
            continue
        best = rt[cand].max()
        if best < VOICING_THRESHOLD:
            continue
        i = cand[np.argmax(rt[cand] >= 0.9 * best)]
        a, b, c = rt[i - 1], rt[i], rt[i + 1]
        curv = a - 2.0 * b + c
        delta = 0.5 * (a - c) / curv if curv < 0 else 0.0
        f0[t] = SAMPLE_RATE / (lags[i] + delta)
    return f0


# ---------------------------------------------------------------------------
# Alignments
# ---------------------------------------------------------------------------

class Interval(NamedTuple):
    phoneme: str
    start: float
    end: float


AlignmentIntervals = List[Interval]


def parse_alignment(text: str) -> AlignmentIntervals:
    """Parse tab-separated ``phoneme start end`` rows; ``#`` starts a comment line."""
    entries: AlignmentIntervals = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fields = raw.rstrip("\r\n").split("\t")
        if len(fields) != 3:
            raise FeatureError(f"expected 3 tab-separated fields at line {lineno}")
        phoneme = fields[0].strip()
        if not phoneme:
            raise FeatureError(f"empty phoneme at line {lineno}")
        try:
            start, end = float(fields[1]), float(fields[2])
        except ValueError:
            raise FeatureError(f"unparsable number at line {lineno}") from None
        if not (math.isfinite(start) and math.isfinite(end)):
            raise FeatureError(f"unparsable number at line {lineno}")
        if end <= start:
            raise FeatureError(f"end before start at line {lineno}")
        if entries:
            prev = entries[-1].end
            if abs(start - prev) > 1e-6:
                kind = "overlapping" if start < prev else "non-contiguous"
                raise FeatureError(f"{kind} interval at line {lineno}")
        elif abs(start) > 1e-6:
            raise FeatureError(f"first interval must start at 0 (line {lineno})")
        entries.append(Interval(phoneme, start, end))
    if not entries:
        raise FeatureError("no intervals")
    return entries


def format_alignment(entries: Sequence[Interval]) -> str:
    return "".join(f"{p}\t{s!r}\t{e!r}\n" for p, s, e in entries)


def intervals_to_durations(entries: Sequence[Interval], mel_frames: int) -> np.ndarray:
    """Convert interval end times to per-phoneme frame counts summing to ``mel_frames``."""
    bounds = [int(math.floor(e.end / HOP_SECONDS + 0.5)) for e in entries]
    durations = np.diff(np.array([0] + bounds, dtype=np.int64))
    drift = int(durations.sum()) - mel_frames
    if abs(drift) > 2:
        raise FeatureError(
            f"alignment/audio mismatch: {durations.sum()} aligned frames vs {mel_frames} mel frames"
        )
    durations[-1] -= drift
    if durations[-1] < 0:
        raise FeatureError("alignment/audio mismatch: negative final duration")
    return durations.astype(np.int32)


# ---------------------------------------------------------------------------
# Utterance records
# ---------------------------------------------------------------------------

@dataclass
class AlignedUtterance:
    id: str
    phonemes: np.ndarray  # int32 (L,)
    durations: np.ndarray  # int32 (L,)
    pitch: np.ndarray  # float32 (F,), Hz or normalized
    energy: np.ndarray  # float32 (F,)
    mel: np.ndarray  # float32 (F, n_mel)
    speaker_id: int
    style_id: int

    def __post_init__(self):
        self.phonemes = np.asarray(self.phonemes, dtype=np.int32)
        self.durations = np.asarray(self.durations, dtype=np.int32)
        self.pitch = np.asarray(self.pitch, dtype=np.float32)
        self.energy = np.asarray(self.energy, dtype=np.float32)
        self.mel = np.asarray(self.mel, dtype=np.float32)

    @property
    def n_frames(self) -> int:
        return int(self.mel.shape[0])

    def validate(self, normalized: bool = False) -> None:
        f = self.n_frames
        if len(self.phonemes) < 1 or len(self.phonemes) != len(self.durations):
            raise FeatureError(f"{self.id}: phoneme/duration length mismatch")
        if int(self.durations.sum()) != f or len(self.pitch) != f or len(self.energy) != f:
            raise FeatureError(
                f"{self.id}: inconsistent lengths (durations {self.durations.sum()}, "
                f"pitch {len(self.pitch)}, energy {len(self.energy)}, mel {f})"
            )
        if np.any(self.durations < 0):
            raise FeatureError(f"{self.id}: negative duration")
        if not normalized and (np.any(self.pitch < 0) or np.any(self.energy < 0)):
            raise FeatureError(f"{self.id}: negative pitch or energy")


def build_utterance(
    wav_path: str,
    alignment_path: str,
    phoneme_map: Mapping[str, int],
    speaker_id: int,
    style_id: int,
    utt_id: str | None = None,
) -> AlignedUtterance:
    raw = read_wav(wav_path)
    w = condition_wave(raw.samples, raw.sample_rate)
    mel = mel_spectrogram(w)
    energy = frame_energy(w)
    pitch = estimate_f0(w)
    with open(alignment_path, encoding="utf-8") as f:
        intervals = parse_alignment(f.read())
    ids = []
    for iv in intervals:
        if iv.phoneme not in phoneme_map:
            raise FeatureError(f"unknown phoneme {iv.phoneme!r} in {alignment_path}")
        ids.append(phoneme_map[iv.phoneme])
    durations = intervals_to_durations(intervals, mel.shape[0])
    if utt_id is None:
        utt_id = os.path.splitext(os.path.basename(wav_path))[0]
    utt = AlignedUtterance(utt_id, ids, durations, pitch, energy, mel, speaker_id, style_id)
    utt.validate()
    return utt


_HEADER = struct.Struct("<IIIii")


def utterance_bytes(utt: AlignedUtterance) -> bytes:
    uid = utt.id.encode("utf-8")
    n_mel = utt.mel.shape[1]
    parts = [
        CACHE_MAGIC,
        struct.pack("<H", len(uid)),
        uid,
        _HEADER.pack(len(utt.phonemes), utt.n_frames, n_mel, utt.speaker_id, utt.style_id),
        utt.phonemes.astype("<i4").tobytes(),
        utt.durations.astype("<i4").tobytes(),
        utt.pitch.astype("<f4").tobytes(),
        utt.energy.astype("<f4").tobytes(),
        np.ascontiguousarray(utt.mel, dtype="<f4").tobytes(),
    ]
    return b"".join(parts)


def utterance_from_bytes(data: bytes) -> AlignedUtterance:
    if not data.startswith(CACHE_MAGIC):
        raise FeatureError("bad feature cache magic")
    pos = len(CACHE_MAGIC)
    try:
        (id_len,) = struct.unpack_from("<H", data, pos)
        pos += 2
        uid = data[pos:pos + id_len].decode("utf-8")
        pos += id_len
        n_ph, n_fr, n_mel, spk, sty = _HEADER.unpack_from(data, pos)
        pos += _HEADER.size
    except struct.error:
        raise FeatureError("truncated feature cache") from None
    expected = pos + 4 * (2 * n_ph + 2 * n_fr + n_fr * n_mel)
    if len(data) != expected:
        raise FeatureError(f"feature cache size {len(data)} != expected {expected}")

    def take(count, dtype):
        nonlocal pos
        arr = np.frombuffer(data, dtype=dtype, count=count, offset=pos)
        pos += 4 * count
        return arr.astype(dtype[1:])

    phonemes = take(n_ph, "<i4")
    durations = take(n_ph, "<i4")
    pitch = take(n_fr, "<f4")
    energy = take(n_fr, "<f4")
    mel = take(n_fr * n_mel, "<f4").reshape(n_fr, n_mel)
    return AlignedUtterance(uid, phonemes, durations, pitch, energy, mel, spk, sty)


def save_utterance(path: str, utt: AlignedUtterance) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(utterance_bytes(utt))
    os.replace(tmp, path)


def load_utterance(path: str) -> AlignedUtterance:
    with open(path, "rb") as f:
        return utterance_from_bytes(f.read())
