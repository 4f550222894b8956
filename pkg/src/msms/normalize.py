"""Utterance-level and speaker-level pitch/energy normalization."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .features import AlignedUtterance

SCOPES = ("utterance", "speaker")


class NormalizationError(ValueError):
    pass


@dataclass(frozen=True)
class NormStats:
    pitch_mean: float
    pitch_std: float
    energy_mean: float
    energy_std: float
    scope: str
    voiced_frames_used: int


def compute_stats(utterances, scope: str = "utterance") -> NormStats:
    """Mean and population std of voiced pitch and of energy over all frames.

    ``scope="utterance"`` takes exactly one utterance; ``scope="speaker"``
    pools every frame of the given utterances, which must share a speaker.
    """
    if isinstance(utterances, AlignedUtterance):
        utterances = [utterances]
    utts = sorted(utterances, key=lambda u: u.id)
    if scope not in SCOPES:
        raise NormalizationError(f"unknown scope {scope!r}")
    if not utts:
        raise NormalizationError("no utterances")
    if scope == "utterance" and len(utts) != 1:
        raise NormalizationError("utterance scope needs exactly one utterance")
    if scope == "speaker" and len({u.speaker_id for u in utts}) != 1:
        raise NormalizationError("speaker scope needs utterances of a single speaker")

    pitch = np.concatenate([np.asarray(u.pitch, dtype=np.float64) for u in utts])
    energy = np.concatenate([np.asarray(u.energy, dtype=np.float64) for u in utts])
    voiced = pitch[pitch > 0]
    if voiced.size < 2:
        raise NormalizationError("insufficient voiced frames")
    p_std = float(voiced.std())
    e_std = float(energy.std())
    if p_std <= 0.0 or e_std <= 0.0:
        raise NormalizationError("degenerate stats")
    return NormStats(float(voiced.mean()), p_std, float(energy.mean()), e_std, scope, int(voiced.size))


def apply_norm(utt: AlignedUtterance, stats: NormStats) -> AlignedUtterance:
    """Return a copy with z-scored pitch (voiced frames only) and energy.

    Unvoiced frames keep the exact value 0.
    """
    pitch = np.asarray(utt.pitch, dtype=np.float64)
    voiced = pitch > 0
    norm_pitch = np.where(voiced, (pitch - stats.pitch_mean) / stats.pitch_std, 0.0)
    norm_energy = (np.asarray(utt.energy, dtype=np.float64) - stats.energy_mean) / stats.energy_std
    return replace(utt, pitch=norm_pitch.astype(np.float32), energy=norm_energy.astype(np.float32))


def denormalize(values, stats: NormStats, channel: str = "pitch", mask=None) -> np.ndarray:
    """Map normalized values back to original units.

    ``mask`` selects the positions to map (for pitch, the voiced frames);
    positions outside it come back as 0.
    """
    v = np.asarray(values, dtype=np.float64)
    if channel == "pitch":
        out = v * stats.pitch_std + stats.pitch_mean
    elif channel == "energy":
        out = v * stats.energy_std + stats.energy_mean
    else:
        raise NormalizationError(f"unknown channel {channel!r}")
    if mask is not None:
        out = np.where(np.asarray(mask, dtype=bool), out, 0.0)
    return out


def normalize_corpus(
    utterances: Sequence[AlignedUtterance], mode: str = "utt"
) -> Tuple[List[AlignedUtterance], Dict[str, NormStats]]:
    """Normalize every utterance with per-utterance (``utt``) or per-speaker (``spk``) stats.

    Returns the normalized utterances in input order and the stats keyed by
    utterance id (``utt``) or ``"speaker:<id>"`` (``spk``).
    """
    if mode == "utt":
        stats = {u.id: compute_stats(u, "utterance") for u in utterances}
        return [apply_norm(u, stats[u.id]) for u in utterances], stats
    if mode == "spk":
        by_speaker: Dict[int, List[AlignedUtterance]] = {}
        for u in utterances:
            by_speaker.setdefault(u.speaker_id, []).append(u)
        spk_stats = {s: compute_stats(us, "speaker") for s, us in sorted(by_speaker.items())}
        normed = [apply_norm(u, spk_stats[u.speaker_id]) for u in utterances]
        return normed, {f"speaker:{s}": st for s, st in spk_stats.items()}
    raise NormalizationError(f"unknown norm mode {mode!r}")


def voiced_moments(utt: AlignedUtterance, voiced_mask=None) -> Tuple[float, float]:
    """Mean and population std of the voiced pitch frames of a normalized utterance.

    Without ``voiced_mask`` the nonzero frames are taken as voiced.
    """
    p = np.asarray(utt.pitch, dtype=np.float64)
    mask = p != 0 if voiced_mask is None else np.asarray(voiced_mask, dtype=bool)
    voiced = p[mask]
    return float(voiced.mean()), float(voiced.std())


def stats_rows(stats: Dict[str, NormStats]) -> str:
    lines = ["id\tscope\tpitch_mean\tpitch_std\tenergy_mean\tenergy_std\tvoiced_frames"]
    for key in sorted(stats):
        s = stats[key]
        lines.append(
            f"{key}\t{s.scope}\t{s.pitch_mean:.9g}\t{s.pitch_std:.9g}\t"
            f"{s.energy_mean:.9g}\t{s.energy_std:.9g}\t{s.voiced_frames_used}"
        )
    return "\n".join(lines) + "\n"
