"""Corpus ingestion, batching, loss, optimization schedule and checkpoints."""

from __future__ import annotations

import json
import logging
import math
import os
import struct
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .config import ModelConfig, TrainingSchedule
from .features import AlignedUtterance, build_utterance, load_utterance, save_utterance
from .model import AcousticModel, VarianceOutputs, backward, build_model
from .normalize import normalize_corpus

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"MSMS1"
CHECKPOINT_VERSION = 1
LOSS_TERMS = ("mel", "duration", "pitch", "energy")


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


class ManifestError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------

@dataclass
class ManifestEntry:
    id: str
    wav_path: str
    alignment_path: str
    phonemes: List[str]
    speaker: str
    style: str


@dataclass
class Manifest:
    entries: List[ManifestEntry]
    speakers: Dict[str, int]
    styles: Dict[str, int]
    phonemes: Dict[str, int]


def load_manifest(path: str) -> Manifest:
    """Read a tab-separated manifest: id, wav, alignment, phonemes, speaker, style.

    Relative paths are resolved against the manifest's directory. Speakers,
    styles and phonemes get dense ids in order of first appearance.
    """
    base = os.path.dirname(os.path.abspath(path))
    entries: List[ManifestEntry] = []
    seen = set()
    speakers: Dict[str, int] = {}
    styles: Dict[str, int] = {}
    phonemes: Dict[str, int] = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip() or line.startswith("#"):
                continue
            fields = line.rstrip("\r\n").split("\t")
            if len(fields) != 6 or not all(x.strip() for x in fields):
                raise ManifestError(f"{path}: expected 6 non-empty fields at line {lineno}")
            uid, wav, ali, phon, spk, sty = (x.strip() for x in fields)
            if uid in seen:
                raise ManifestError(f"{path}: duplicate utterance id {uid!r} at line {lineno}")
            seen.add(uid)
            symbols = phon.split()
            for s in symbols:
                phonemes.setdefault(s, len(phonemes))
            speakers.setdefault(spk, len(speakers))
            styles.setdefault(sty, len(styles))
            if speakers[spk] != styles[sty]:
                raise ManifestError(
                    f"{path}: speaker {spk!r} and style {sty!r} must pair one-to-one (line {lineno})"
                )
            entries.append(ManifestEntry(uid, os.path.join(base, wav), os.path.join(base, ali),
                                         symbols, spk, sty))
    if not entries:
        raise ManifestError(f"{path}: empty manifest")
    return Manifest(entries, speakers, styles, phonemes)


def build_corpus(manifest: Manifest, cache_dir: Optional[str] = None) -> List[AlignedUtterance]:
    """Extract features for every manifest entry, reusing cache files when present."""
    utts = []
    for e in manifest.entries:
        cache = os.path.join(cache_dir, f"{e.id}.feat") if cache_dir else None
        if cache and os.path.exists(cache):
            utt = load_utterance(cache)
        else:
            utt = build_utterance(e.wav_path, e.alignment_path, manifest.phonemes,
                                  manifest.speakers[e.speaker], manifest.styles[e.style], e.id)
            expected = [manifest.phonemes[s] for s in e.phonemes]
            if utt.phonemes.tolist() != expected:
                raise ManifestError(f"{e.id}: alignment phonemes differ from manifest phonemes")
            if cache:
                os.makedirs(cache_dir, exist_ok=True)
                save_utterance(cache, utt)
        utts.append(utt)
    return utts


# ---------------------------------------------------------------------------
# Batching and loss
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    phonemes: torch.Tensor  # (B, L) long
    phoneme_lengths: torch.Tensor  # (B,)
    phoneme_mask: torch.Tensor  # (B, L) bool
    durations: torch.Tensor  # (B, L) long
    pitch: torch.Tensor  # (B, F)
    energy: torch.Tensor  # (B, F)
    mel: torch.Tensor  # (B, F, n_mel)
    frame_lengths: torch.Tensor  # (B,)
    frame_mask: torch.Tensor  # (B, F) bool
    speaker_ids: torch.Tensor
    style_ids: torch.Tensor

    def __len__(self) -> int:
        return self.phonemes.shape[0]


def collate(utts: Sequence[AlignedUtterance], dtype: torch.dtype = torch.float32,
            extra_frames: int = 0, extra_phonemes: int = 0) -> Batch:
    """Pad utterances into a batch; ``extra_*`` append additional padding."""
    if not utts:
        raise ValueError("cannot collate an empty list")
    b = len(utts)
    max_l = max(len(u.phonemes) for u in utts) + extra_phonemes
    max_f = max(u.n_frames for u in utts) + extra_frames
    n_mel = utts[0].mel.shape[1]
    phonemes = torch.zeros(b, max_l, dtype=torch.long)
    durations = torch.zeros(b, max_l, dtype=torch.long)
    pitch = torch.zeros(b, max_f, dtype=dtype)
    energy = torch.zeros(b, max_f, dtype=dtype)
    mel = torch.zeros(b, max_f, n_mel, dtype=dtype)
    for i, u in enumerate(utts):
        n, f = len(u.phonemes), u.n_frames
        phonemes[i, :n] = torch.from_numpy(u.phonemes.astype(np.int64))
        durations[i, :n] = torch.from_numpy(u.durations.astype(np.int64))
        pitch[i, :f] = torch.from_numpy(u.pitch).to(dtype)
        energy[i, :f] = torch.from_numpy(u.energy).to(dtype)
        mel[i, :f] = torch.from_numpy(u.mel).to(dtype)
    p_len = torch.tensor([len(u.phonemes) for u in utts])
    f_len = torch.tensor([u.n_frames for u in utts])
    return Batch(
        phonemes, p_len, torch.arange(max_l)[None] < p_len[:, None], durations,
        pitch, energy, mel, f_len, torch.arange(max_f)[None] < f_len[:, None],
        torch.tensor([u.speaker_id for u in utts]), torch.tensor([u.style_id for u in utts]),
    )


def _fit_width(x: torch.Tensor, width: int) -> torch.Tensor:
    if x.shape[1] == width:
        return x
    if x.shape[1] > width:
        return x[:, :width]
    pad = [0, 0] * (x.dim() - 2) + [0, width - x.shape[1]]
    return torch.nn.functional.pad(x, pad)


def _masked_mean(x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    m = mask.to(x.dtype)
    while m.dim() < x.dim():
        m = m[..., None]
    m = m.expand_as(x)
    return (x * m).sum() / m.sum()


def loss_total(mel_hat: torch.Tensor, var: VarianceOutputs, batch: Batch):
    """L1 mel loss plus MSE on log(d + 1) durations, pitch and energy.

    Every term is a mean over the valid (unpadded) cells only.

    Returns:
        (total scalar, dict of the four per-term scalars)
    """
    width = batch.mel.shape[1]
    mel_hat = _fit_width(mel_hat, width)
    terms = {
        "mel": _masked_mean((mel_hat - batch.mel).abs(), batch.frame_mask),
        "duration": _masked_mean(
            (var.log_durations - torch.log(batch.durations.to(var.log_durations.dtype) + 1.0)) ** 2,
            batch.phoneme_mask),
        "pitch": _masked_mean((_fit_width(var.pitch, width) - batch.pitch) ** 2, batch.frame_mask),
        "energy": _masked_mean((_fit_width(var.energy, width) - batch.energy) ** 2, batch.frame_mask),
    }
    for name, value in terms.items():
        if not bool(torch.isfinite(value)):
            raise TrainingError(f"non-finite {name} loss")
    return terms["mel"] + terms["duration"] + terms["pitch"] + terms["energy"], terms


# ---------------------------------------------------------------------------
# Optimization
# ---------------------------------------------------------------------------

def noam_lr(step: int, schedule: Optional[TrainingSchedule] = None) -> float:
    """Linear warmup to ``peak_lr`` then inverse-square-root decay."""
    schedule = schedule or TrainingSchedule()
    if step < 1:
        raise ValueError(f"learning-rate step must be >= 1, got {step}")
    w = schedule.warmup_steps
    return schedule.peak_lr * min(step / w, math.sqrt(w / step))


def init_moments(params: Dict[str, torch.Tensor]) -> Dict[str, Tuple[torch.Tensor, torch.Tensor]]:
    return {k: (torch.zeros_like(p), torch.zeros_like(p)) for k, p in params.items()}


@torch.no_grad()
def optimizer_step(params: Dict[str, torch.Tensor], grads: Dict[str, torch.Tensor],
                   moments: Dict[str, Tuple[torch.Tensor, torch.Tensor]], step: int,
                   schedule: TrainingSchedule, lr: Optional[float] = None) -> None:
    """Adam with bias correction, then decoupled weight decay, applied in place."""
    lr = noam_lr(step, schedule) if lr is None else lr
    b1, b2, eps = schedule.beta1, schedule.beta2, schedule.eps
    c1 = 1.0 - b1 ** step
    c2 = 1.0 - b2 ** step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise TrainingError(f"gradient shape {tuple(g.shape)} != parameter {name} {tuple(p.shape)}")
        m, v = moments[name]
        m.mul_(b1).add_(g, alpha=1.0 - b1)
        v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
        update = (m / c1) / ((v / c2).sqrt() + eps)
        new = p - lr * update
        new = new - lr * schedule.weight_decay * new
        if not bool(torch.isfinite(new).all()):
            raise TrainingError(f"non-finite update for {name}")
        p.copy_(new)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    config: ModelConfig
    params: Dict[str, np.ndarray]
    moments: Dict[str, Tuple[np.ndarray, np.ndarray]]
    step: int
    schedule: TrainingSchedule
    meta: dict = field(default_factory=dict)

    def model(self, dtype: torch.dtype = torch.float32) -> AcousticModel:
        model = build_model(self.config)
        state = {k: torch.from_numpy(v.copy()) for k, v in self.params.items()}
        model.load_state_dict(state)
        model.to(dtype)
        model.eval()
        return model

    @classmethod
    def from_model(cls, model: AcousticModel, schedule: TrainingSchedule, step: int = 0,
                   moments=None, meta=None) -> "Checkpoint":
        params = {k: v.detach().to(torch.float32).numpy().copy() for k, v in model.named_parameters()}
        if moments is None:
            mom = {k: (np.zeros_like(v), np.zeros_like(v)) for k, v in params.items()}
        else:
            mom = {k: (m.detach().to(torch.float32).numpy().copy(),
                       v.detach().to(torch.float32).numpy().copy()) for k, (m, v) in moments.items()}
        return cls(model.config, params, mom, step, schedule, dict(meta or {}))


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    names = sorted(ckpt.params)
    header = {
        "config": json.loads(ckpt.config.to_json()),
        "schedule": json.loads(ckpt.schedule.to_json()),
        "step": ckpt.step,
        "meta": ckpt.meta,
        "tensors": [[n, list(ckpt.params[n].shape)] for n in names],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(blob)), blob]
    for n in names:
        parts.append(np.ascontiguousarray(ckpt.params[n], dtype="<f4").tobytes())
    for n in names:
        m, v = ckpt.moments[n]
        parts.append(np.ascontiguousarray(m, dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(v, dtype="<f4").tobytes())
    return b"".join(parts)


def checkpoint_from_bytes(data: bytes) -> Checkpoint:
    if not data.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError("bad checkpoint magic")
    pos = len(CHECKPOINT_MAGIC)
    if len(data) < pos + 8:
        raise CheckpointError("truncated checkpoint")
    version, n = struct.unpack_from("<II", data, pos)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos += 8
    try:
        header = json.loads(data[pos:pos + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise CheckpointError("truncated or corrupt checkpoint header") from None
    pos += n
    shapes = [(name, tuple(shape)) for name, shape in header["tensors"]]
    sizes = [int(np.prod(s)) for _, s in shapes]
    if len(data) != pos + 4 * 3 * sum(sizes):
        raise CheckpointError("truncated checkpoint")

    def take(count, shape):
        nonlocal pos
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=pos).astype(np.float32)
        pos += 4 * count
        return arr.reshape(shape)

    params = {name: take(size, shape) for (name, shape), size in zip(shapes, sizes)}
    moments = {}
    for (name, shape), size in zip(shapes, sizes):
        moments[name] = (take(size, shape), take(size, shape))
    return Checkpoint(ModelConfig.from_dict(header["config"]), params, moments, header["step"],
                      TrainingSchedule(**header["schedule"]), header["meta"])


def save_checkpoint(path: str, ckpt: Checkpoint) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(checkpoint_bytes(ckpt))
    os.replace(tmp, path)


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as f:
        return checkpoint_from_bytes(f.read())


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    checkpoint: Checkpoint
    model: AcousticModel
    log: List[dict]


def batch_indices(n: int, step: int, batch_size: int, seed: int) -> List[int]:
    """Utterance indices for a 1-based step: a fresh seeded permutation per epoch."""
    per_epoch = max(1, math.ceil(n / batch_size))
    epoch, k = divmod(step - 1, per_epoch)
    order = np.random.default_rng([seed, epoch]).permutation(n)
    return sorted(order[k * batch_size:(k + 1) * batch_size].tolist())


def format_log_row(row: dict) -> str:
    return "\t".join([str(row["step"]), f"{row['lr']:.9g}", f"{row['total']:.9g}"]
                     + [f"{row[t]:.9g}" for t in LOSS_TERMS])


def train(
    utterances: Sequence[AlignedUtterance],
    config: ModelConfig,
    schedule: TrainingSchedule,
    norm_mode: str = "utt",
    out_dir: Optional[str] = None,
    meta: Optional[dict] = None,
    resume: Optional[Checkpoint] = None,
    stop_at: Optional[int] = None,
    on_step: Optional[Callable[[dict], None]] = None,
) -> TrainResult:
    """Teacher-forced training on raw (unnormalized) utterances.

    Batches and dropout masks are functions of (seed, step) only, so a run
    resumed from a checkpoint continues exactly as the uninterrupted run.
    With ``out_dir`` set, checkpoints are written every
    ``schedule.checkpoint_every`` steps plus at the end, and the loss log is
    appended to ``loss.tsv``.
    """
    for u in utterances:
        if u.mel.shape[1] != config.n_mel:
            raise ValueError(f"{u.id}: {u.mel.shape[1]} mel bands, model expects {config.n_mel}")
    data, _ = normalize_corpus(utterances, norm_mode)
    meta = dict(meta or {})
    meta["norm_mode"] = norm_mode
    if resume is not None:
        model = resume.model()
        moments = {k: (torch.from_numpy(m.copy()), torch.from_numpy(v.copy()))
                   for k, (m, v) in resume.moments.items()}
        start = resume.step
        meta = {**resume.meta, **meta}
    else:
        model = build_model(config, seed=schedule.seed)
        moments = None
        start = 0
    params = dict(model.named_parameters())
    if moments is None:
        moments = init_moments({k: p.detach() for k, p in params.items()})
    end = schedule.total_steps if stop_at is None else min(stop_at, schedule.total_steps)

    log_file = None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        log_file = open(os.path.join(out_dir, "loss.tsv"), "a" if resume else "w")
        if not resume:
            log_file.write("step\tlr\ttotal\tmel\tduration\tpitch\tenergy\n")
    log: List[dict] = []
    ckpt_path = os.path.join(out_dir, "checkpoint.msms") if out_dir else None
    try:
        model.train()
        for step in range(start + 1, end + 1):
            batch = collate([data[i] for i in batch_indices(len(data), step, schedule.batch_size,
                                                            schedule.seed)])
            torch.manual_seed(schedule.seed * 1_000_003 + step)
            mel_hat, var = model.forward_batch(batch)
            try:
                total, terms = loss_total(mel_hat, var, batch)
            except TrainingError as exc:
                raise TrainingError(f"step {step}: {exc}; last good checkpoint kept at {ckpt_path}") from exc
            grads = backward(total, model)
            lr = noam_lr(step, schedule)
            optimizer_step({k: p.data for k, p in params.items()}, grads, moments, step, schedule, lr)
            row = {"step": step, "lr": lr, "total": total.item(),
                   **{k: v.item() for k, v in terms.items()}}
            log.append(row)
            if log_file:
                log_file.write(format_log_row(row) + "\n")
            if on_step:
                on_step(row)
            if step % 100 == 0:
                logger.info("step %d lr %.3g loss %.4f", step, lr, row["total"])
            if ckpt_path and (step % schedule.checkpoint_every == 0 or step == end):
                save_checkpoint(ckpt_path, Checkpoint.from_model(model, schedule, step, moments, meta))
    finally:
        if log_file:
            log_file.close()
        model.eval()
    final_step = log[-1]["step"] if log else start
    return TrainResult(Checkpoint.from_model(model, schedule, final_step, moments, meta), model, log)


def manifest_meta(manifest: Manifest) -> dict:
    return {"speakers": manifest.speakers, "styles": manifest.styles, "phonemes": manifest.phonemes}
