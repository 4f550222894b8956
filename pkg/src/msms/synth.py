"""Inference, Griffin-Lim inversion and artifact export."""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import torch

from .config import HOP_LENGTH, SAMPLE_RATE
from .features import LOG_FLOOR, PEAK_TARGET, istft, mel_filterbank, stft, write_wav
from .model import AcousticModel, VarianceOutputs, interpolate_style
from .trainer import Checkpoint

GRIFFIN_LIM_ITERS = 60


class SynthesisError(ValueError):
    pass


@dataclass
class SynthesisRequest:
    phonemes: Union[str, Sequence[str]]
    speaker: str
    style: str
    source_style: Optional[str] = None
    style_weight: float = 1.0
    seed: int = 0

    def symbols(self) -> List[str]:
        return self.phonemes.split() if isinstance(self.phonemes, str) else list(self.phonemes)


@dataclass
class SynthesisResult:
    mel: np.ndarray  # (F, n_mel)
    log_durations: np.ndarray  # (L,)
    durations: np.ndarray  # (L,)
    pitch: np.ndarray  # (F,) normalized
    energy: np.ndarray  # (F,) normalized
    phoneme_ids: List[int]
    style_weight: float

    @property
    def frame_phonemes(self) -> np.ndarray:
        return np.repeat(self.phoneme_ids, self.durations)


class Synthesizer:
    """Read-only inference over a checkpoint's model and name maps."""

    def __init__(self, checkpoint: Checkpoint, model: Optional[AcousticModel] = None):
        self.checkpoint = checkpoint
        self.model = model if model is not None else checkpoint.model()
        self.model.eval()
        meta = checkpoint.meta
        self.speakers: Dict[str, int] = meta.get("speakers", {})
        self.styles: Dict[str, int] = meta.get("styles", {})
        self.phonemes: Dict[str, int] = meta.get("phonemes", {})

    def _lookup(self, table: Dict[str, int], name: str, what: str) -> int:
        if name not in table:
            raise SynthesisError(f"unknown {what} {name!r}")
        return table[name]

    def style_vector(self, req: SynthesisRequest) -> torch.Tensor:
        tgt = self._lookup(self.styles, req.style, "style")
        if req.source_style is None:
            if req.style_weight != 1.0:
                raise SynthesisError("style weight needs a source style")
            return self.model.style_vector(tgt)
        src = self._lookup(self.styles, req.source_style, "style")
        return interpolate_style(self.model, src, tgt, req.style_weight)

    @torch.no_grad()
    def synthesize(self, req: SynthesisRequest) -> SynthesisResult:
        ids = [self._lookup(self.phonemes, p, "phoneme") for p in req.symbols()]
        spk = self._lookup(self.speakers, req.speaker, "speaker")
        mel, var = self.model.forward_infer(ids, spk, self.style_vector(req))
        return _result(mel, var, ids, req.style_weight)


def _result(mel: torch.Tensor, var: VarianceOutputs, ids: List[int], w: float) -> SynthesisResult:
    return SynthesisResult(
        mel.numpy().copy(), var.log_durations[0].numpy().copy(), var.durations[0].numpy().copy(),
        var.pitch[0].numpy().copy(), var.energy[0].numpy().copy(), list(ids), w,
    )


def synthesize(req: SynthesisRequest, checkpoint: Checkpoint) -> SynthesisResult:
    return Synthesizer(checkpoint).synthesize(req)


def griffin_lim(mel: np.ndarray, n_iter: int = GRIFFIN_LIM_ITERS, seed: int = 0,
                return_errors: bool = False):
    """Invert a (F, 80) natural-log mel spectrogram to a 16 kHz waveform.

    The mel magnitudes are mapped back to linear frequency with the
    filterbank pseudo-inverse (clipped at zero), then the phase is refined
    for ``n_iter`` rounds. Output is peak-normalized to -6 dBFS.

    With ``return_errors`` the per-iteration spectral convergence
    ``|| |STFT(x)| - S ||_F / ||S||_F`` is returned as well.
    """
    mel = np.asarray(mel, dtype=np.float64)
    if not np.all(np.isfinite(mel)):
        raise SynthesisError("mel spectrogram is not finite")
    if np.all(mel <= np.log(LOG_FLOOR) + 1e-6):
        raise SynthesisError("silent spectrogram")
    fb = mel_filterbank(mel.shape[1])
    target = np.maximum(np.exp(mel) @ np.linalg.pinv(fb).T, 0.0)
    n_frames = mel.shape[0]
    length = n_frames * HOP_LENGTH
    rng = np.random.default_rng(seed)
    angles = np.exp(2j * np.pi * rng.random(target.shape))
    errors = []
    norm = np.linalg.norm(target) + 1e-12
    x = istft(target * angles, length)
    for _ in range(n_iter):
        spec = stft(x)[:n_frames]
        errors.append(float(np.linalg.norm(np.abs(spec) - target) / norm))
        angles = np.exp(1j * np.angle(spec))
        x = istft(target * angles, length)
    peak = np.max(np.abs(x))
    if peak > 0:
        x = x * (PEAK_TARGET / peak)
    return (x, errors) if return_errors else x


def dominant_frequency(samples: np.ndarray, sample_rate: int = SAMPLE_RATE) -> float:
    spec = np.abs(np.fft.rfft(samples * np.hanning(len(samples))))
    return float(np.fft.rfftfreq(len(samples), 1.0 / sample_rate)[np.argmax(spec)])


# ---------------------------------------------------------------------------
# Export
# ---------------------------------------------------------------------------

def trajectory_csv(values: np.ndarray) -> str:
    return "".join(f"{i},{float(v):.9g}\n" for i, v in enumerate(values))


def read_trajectory_csv(path: str) -> np.ndarray:
    with open(path) as f:
        rows = [line.split(",") for line in f if line.strip()]
    return np.array([float(r[1]) for r in rows])


def graymap_bytes(mel: np.ndarray) -> bytes:
    """Binary PGM with time on the x axis and the lowest band on the bottom row."""
    img = np.asarray(mel, dtype=np.float64).T[::-1]
    lo, hi = img.min(), img.max()
    scaled = np.zeros_like(img) if hi <= lo else (img - lo) / (hi - lo)
    pixels = np.round(scaled * 255.0).astype(np.uint8)
    height, width = pixels.shape
    return f"P5\n{width} {height}\n255\n".encode("ascii") + pixels.tobytes()


def export_artifacts(result: SynthesisResult, prefix: str, audio: Optional[np.ndarray] = None) -> Dict[str, str]:
    """Write pitch/energy/duration CSVs, a mel graymap and optionally a WAV.

    Returns the written paths keyed by artifact kind.
    """
    parent = os.path.dirname(prefix)
    if parent:
        os.makedirs(parent, exist_ok=True)
    paths = {
        "pitch": f"{prefix}.pitch.csv",
        "energy": f"{prefix}.energy.csv",
        "durations": f"{prefix}.durations.csv",
        "mel": f"{prefix}.mel.pgm",
    }
    with open(paths["pitch"], "w") as f:
        f.write(trajectory_csv(result.pitch))
    with open(paths["energy"], "w") as f:
        f.write(trajectory_csv(result.energy))
    with open(paths["durations"], "w") as f:
        f.write("".join(f"{i},{int(d)},{float(ld):.9g}\n"
                        for i, (d, ld) in enumerate(zip(result.durations, result.log_durations))))
    with open(paths["mel"], "wb") as f:
        f.write(graymap_bytes(result.mel))
    if audio is not None:
        paths["wav"] = f"{prefix}.wav"
        write_wav(paths["wav"], audio)
    return paths


def transition_sweep(synth: Synthesizer, req: SynthesisRequest, weights: Sequence[float],
                     out_dir: Optional[str] = None, vocode: bool = False) -> List[SynthesisResult]:
    """One synthesis per target-style weight; optionally export artifacts plus ``index.tsv``."""
    if req.source_style is None:
        raise SynthesisError("a sweep needs a source style")
    for w in weights:
        if not 0.0 <= w <= 1.0:
            raise SynthesisError(f"style weight {w} outside [0, 1]")
    results = []
    index = ["weight\tframes\tpitch\tenergy\tdurations\tmel\twav"]
    for k, w in enumerate(weights):
        r = synth.synthesize(SynthesisRequest(req.phonemes, req.speaker, req.style,
                                              req.source_style, float(w), req.seed))
        results.append(r)
        if out_dir:
            audio = griffin_lim(r.mel, seed=req.seed) if vocode else None
            paths = export_artifacts(r, os.path.join(out_dir, f"w{k:02d}"), audio)
            index.append("\t".join([f"{w:.9g}", str(len(r.pitch)), paths["pitch"], paths["energy"],
                                    paths["durations"], paths["mel"], paths.get("wav", "-")]))
    if out_dir:
        with open(os.path.join(out_dir, "index.tsv"), "w") as f:
            f.write("\n".join(index) + "\n")
    return results


def sweep_continuity(results: Sequence[SynthesisResult]) -> Dict[str, float]:
    """Largest change between neighbouring sweep entries.

    ``log_durations`` is compared directly. Pitch is compared only between
    neighbours with identical frame counts, since rounded durations make the
    frame axis itself jump.
    """
    ld = [0.0]
    pitch = [0.0]
    for a, b in zip(results, results[1:]):
        ld.append(float(np.max(np.abs(a.log_durations - b.log_durations))))
        if len(a.pitch) == len(b.pitch):
            pitch.append(float(np.max(np.abs(a.pitch - b.pitch))))
    return {"log_durations": max(ld), "pitch": max(pitch)}
