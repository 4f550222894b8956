"""Deterministic synthetic multi-speaker corpus.

Every speaker is a harmonic voice with its own base F0 and resonance peak,
and records in exactly one style: a pitch-contour family plus a duration
scale. Phonemes come from a 16-symbol toy inventory (12 voiced, 4 noise-like)
and alignments are written exactly, since the generator places the
boundaries itself.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Dict, List

import numpy as np

from .config import HOP_LENGTH, HOP_SECONDS, SAMPLE_RATE
from .features import Interval, format_alignment, wav_bytes

VOICED_PHONEMES = ("a", "e", "i", "o", "u", "aa", "ee", "oo", "m", "n", "l", "r")
UNVOICED_PHONEMES = ("s", "f", "sh", "h")
INVENTORY = VOICED_PHONEMES + UNVOICED_PHONEMES

# Second resonance per voiced phoneme (Hz) and band centre per noise phoneme.
_PHONEME_FORMANT = dict(zip(VOICED_PHONEMES, np.linspace(700.0, 2600.0, len(VOICED_PHONEMES))))
_NOISE_BAND = {"s": (4500.0, 7500.0), "f": (2000.0, 7800.0), "sh": (2500.0, 4500.0), "h": (800.0, 3000.0)}
_BASE_DURATION = dict(zip(INVENTORY, [9, 8, 7, 9, 8, 10, 9, 10, 6, 6, 5, 5, 7, 6, 7, 5]))

STYLE_FAMILIES = ("rising", "falling", "flat")
_DURATION_SCALE = {"rising": 1.0, "falling": 1.3, "flat": 0.8}
_CONTOUR_SPAN = 8.0  # semitones covered by rising/falling contours
_VIBRATO_HZ = 5.0
_VIBRATO_DEPTH = 0.5  # semitones
_SPEAKER_F0 = (110.0, 210.0, 155.0, 250.0, 130.0, 185.0)
_SPEAKER_RESONANCE = (600.0, 1500.0, 1000.0, 2000.0, 800.0, 1250.0)


@dataclass(frozen=True)
class SpeakerSpec:
    name: str
    style: str
    family: str
    base_f0: float
    resonance: float


def speaker_specs(n_speakers: int) -> List[SpeakerSpec]:
    """Speaker k records style family ``STYLE_FAMILIES[k % 3]``."""
    specs = []
    for k in range(n_speakers):
        family = STYLE_FAMILIES[k % len(STYLE_FAMILIES)]
        rnd = k // len(STYLE_FAMILIES)
        style = family if rnd == 0 else f"{family}{rnd + 1}"
        f0 = _SPEAKER_F0[k % len(_SPEAKER_F0)] * (1.0 + 0.07 * (k // len(_SPEAKER_F0)))
        res = _SPEAKER_RESONANCE[k % len(_SPEAKER_RESONANCE)]
        specs.append(SpeakerSpec(f"spk{k}", style, family, f0, res))
    return specs


def contour_semitones(family: str, u: np.ndarray, t_seconds: np.ndarray) -> np.ndarray:
    """Pitch offset in semitones at normalized utterance time ``u`` in [0, 1]."""
    if family == "rising":
        return _CONTOUR_SPAN * (u - 0.5)
    if family == "falling":
        return _CONTOUR_SPAN * (0.5 - u)
    if family == "flat":
        return _VIBRATO_DEPTH * np.sin(2 * np.pi * _VIBRATO_HZ * t_seconds)
    raise ValueError(f"unknown style family {family!r}")


def style_family(style_name: str) -> str:
    return style_name.rstrip("0123456789")


def _harmonic_segment(f0: np.ndarray, phase: np.ndarray, formant: float, resonance: float) -> np.ndarray:
    k_max = int(7800.0 // f0.min())
    k = np.arange(1, k_max + 1)[None, :]
    freq = f0[:, None] * k
    amp = (0.35 / k
           + np.exp(-0.5 * ((freq - resonance) / 250.0) ** 2)
           + 0.6 * np.exp(-0.5 * ((freq - formant) / 180.0) ** 2))
    amp = np.where(freq < 7900.0, amp, 0.0)
    return np.sum(amp * np.sin(phase[:, None] * k), axis=1)


def _noise_segment(n: int, band, rng: np.random.Generator) -> np.ndarray:
    spec = np.fft.rfft(rng.standard_normal(n))
    freqs = np.fft.rfftfreq(n, 1.0 / SAMPLE_RATE)
    spec[(freqs < band[0]) | (freqs > band[1])] = 0.0
    out = np.fft.irfft(spec, n=n)
    return out / (np.std(out) + 1e-12)


def synthesize_utterance(spk: SpeakerSpec, phonemes: List[str], durations: List[int],
                         rng: np.random.Generator, offset: float, scale: float) -> np.ndarray:
    """Render an utterance whose phoneme ``i`` spans exactly ``durations[i]`` hops."""
    n = int(sum(durations)) * HOP_LENGTH
    t = np.arange(n) / SAMPLE_RATE
    u = np.arange(n) / max(n - 1, 1)
    semis = offset + scale * contour_semitones(spk.family, u, t)
    f0 = spk.base_f0 * 2.0 ** (semis / 12.0)
    phase = 2 * np.pi * np.cumsum(f0) / SAMPLE_RATE
    out = np.zeros(n)
    ramp = int(0.002 * SAMPLE_RATE)
    start = 0
    for ph, d in zip(phonemes, durations):
        stop = start + d * HOP_LENGTH
        if stop > start:
            if ph in _PHONEME_FORMANT:
                seg = _harmonic_segment(f0[start:stop], phase[start:stop], _PHONEME_FORMANT[ph], spk.resonance)
                seg /= np.sqrt(np.mean(seg ** 2)) + 1e-12
            else:
                seg = 0.25 * _noise_segment(stop - start, _NOISE_BAND[ph], rng)
            env = np.ones(stop - start)
            r = min(ramp, (stop - start) // 2)
            if r > 0:
                env[:r] = np.linspace(0.0, 1.0, r)
                env[-r:] = np.linspace(1.0, 0.0, r)
            out[start:stop] = seg * env
        start = stop
    return 0.9 * out / np.max(np.abs(out))


@dataclass
class SyntheticCorpus:
    manifest_path: str
    speakers: List[SpeakerSpec]
    true_f0: Dict[str, np.ndarray]


def random_text(rng: np.random.Generator, min_len: int = 8, max_len: int = 14) -> List[str]:
    n = int(rng.integers(min_len, max_len + 1))
    text = []
    for _ in range(n):
        pool = UNVOICED_PHONEMES if rng.random() < 0.15 else VOICED_PHONEMES
        text.append(pool[int(rng.integers(len(pool)))])
    text[0] = VOICED_PHONEMES[int(rng.integers(len(VOICED_PHONEMES)))]
    text[-1] = VOICED_PHONEMES[int(rng.integers(len(VOICED_PHONEMES)))]
    return text


def generate_synthetic_corpus(out_dir: str, n_speakers: int = 3, utterances_each: int = 8,
                              seed: int = 0, heterogeneity: float = 1.0) -> SyntheticCorpus:
    """Write WAVs, alignments and ``manifest.tsv`` under ``out_dir``.

    ``heterogeneity`` scales the per-utterance random F0 offset (up to +-3
    semitones) and contour-range jitter; 0 gives every utterance of a speaker
    the same pitch statistics.

    The corpus is parallel: utterance ``i`` of every speaker reads the same
    text, so the phoneme sequence alone never identifies the contour style.
    """
    if n_speakers < 2:
        raise ValueError("need at least 2 speakers")
    os.makedirs(os.path.join(out_dir, "wav"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "align"), exist_ok=True)
    rows = []
    true_f0 = {}
    texts = [random_text(np.random.default_rng([seed, i])) for i in range(utterances_each)]
    for k, spk in enumerate(speaker_specs(n_speakers)):
        for i in range(utterances_each):
            rng = np.random.default_rng([seed, k, i])
            text = texts[i]
            dscale = _DURATION_SCALE[spk.family]
            durations = [max(2, int(round(_BASE_DURATION[p] * dscale * rng.uniform(0.85, 1.15))))
                         for p in text]
            offset = heterogeneity * rng.uniform(-3.0, 3.0)
            scale = 1.0 + heterogeneity * rng.uniform(-0.3, 0.3)
            audio = synthesize_utterance(spk, text, durations, rng, offset, scale)
            uid = f"{spk.name}_{spk.style}_{i:03d}"
            wav_rel = os.path.join("wav", f"{uid}.wav")
            ali_rel = os.path.join("align", f"{uid}.tsv")
            with open(os.path.join(out_dir, wav_rel), "wb") as f:
                f.write(wav_bytes(audio))
            bounds = np.cumsum([0] + durations)
            intervals = [Interval(p, float(bounds[j] * HOP_SECONDS), float(bounds[j + 1] * HOP_SECONDS))
                         for j, p in enumerate(text)]
            with open(os.path.join(out_dir, ali_rel), "w", encoding="utf-8") as f:
                f.write(format_alignment(intervals))
            frames_u = np.arange(bounds[-1]) * HOP_LENGTH / max(bounds[-1] * HOP_LENGTH - 1, 1)
            frames_t = np.arange(bounds[-1]) * HOP_SECONDS
            true_f0[uid] = spk.base_f0 * 2.0 ** (
                (offset + scale * contour_semitones(spk.family, frames_u, frames_t)) / 12.0)
            rows.append("\t".join([uid, wav_rel, ali_rel, " ".join(text), spk.name, spk.style]))
    manifest = os.path.join(out_dir, "manifest.tsv")
    with open(manifest, "w", encoding="utf-8") as f:
        f.write("\n".join(rows) + "\n")
    return SyntheticCorpus(manifest, speaker_specs(n_speakers), true_f0)
