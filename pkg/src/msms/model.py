"""Acoustic model with a style-conditioned variance adaptor and a speaker-conditioned decoder.

The style embedding is added only to the inputs of the three variance
predictors. Under teacher forcing their outputs are bypassed, so the frame
hidden stream handed to the decoder never depends on the style id. The speaker
embedding is added only at the decoder input, so predicted prosody never
depends on the speaker id.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Optional, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .config import ModelConfig

VARIANCE_KINDS = ("duration", "pitch", "energy")


class ModelError(ValueError):
    """Raised for invalid model inputs."""


class GradientError(FloatingPointError):
    """Raised when a parameter receives a non-finite gradient."""


@dataclass
class VarianceOutputs:
    """Predicted prosody for a batch.

    Attributes:
        log_durations: (B, L) predicted log(d + 1) per phoneme.
        pitch: (B, F) predicted normalized pitch per frame.
        energy: (B, F) predicted normalized energy per frame.
        durations: (B, L) integer frame counts used for length regulation.
        frame_lengths: (B,) number of valid frames per item.
    """

    log_durations: torch.Tensor
    pitch: torch.Tensor
    energy: torch.Tensor
    durations: torch.Tensor
    frame_lengths: torch.Tensor

    @property
    def frame_count(self) -> int:
        return int(self.frame_lengths.max())


def sinusoid_positions(length: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    pos = torch.arange(length, dtype=torch.float64)[:, None]
    i = torch.arange(0, dim, 2, dtype=torch.float64)
    angle = pos / torch.pow(10000.0, i / dim)
    table = torch.zeros(length, dim, dtype=torch.float64)
    table[:, 0::2] = torch.sin(angle)
    table[:, 1::2] = torch.cos(angle[:, : dim // 2])
    return table.to(dtype)


def lengths_to_mask(lengths: torch.Tensor, max_len: Optional[int] = None) -> torch.Tensor:
    max_len = int(lengths.max()) if max_len is None else max_len
    return torch.arange(max_len, device=lengths.device)[None, :] < lengths[:, None]


class MultiHeadSelfAttention(nn.Module):
    def __init__(self, hidden_dim: int, heads: int, dropout: float):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(hidden_dim, 3 * hidden_dim)
        self.out = nn.Linear(hidden_dim, hidden_dim)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        b, t, h = x.shape
        q, k, v = self.qkv(x).view(b, t, 3, self.heads, h // self.heads).permute(2, 0, 3, 1, 4)
        scores = q @ k.transpose(-1, -2) / math.sqrt(h // self.heads)
        scores = scores.masked_fill(~mask[:, None, None, :], float("-inf"))
        attn = self.dropout(torch.softmax(scores, dim=-1))
        return self.out((attn @ v).transpose(1, 2).reshape(b, t, h))


class FFTBlock(nn.Module):
    """Self-attention followed by a two-layer 1-D convolutional feed-forward, post-norm."""

    def __init__(self, hidden_dim: int, heads: int, ffn_dim: int, kernel: int, dropout: float):
        super().__init__()
        self.attn = MultiHeadSelfAttention(hidden_dim, heads, dropout)
        self.norm1 = nn.LayerNorm(hidden_dim)
        self.conv1 = nn.Conv1d(hidden_dim, ffn_dim, kernel, padding=kernel // 2)
        self.conv2 = nn.Conv1d(ffn_dim, hidden_dim, 1)
        self.norm2 = nn.LayerNorm(hidden_dim)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        m = mask[..., None].to(x.dtype)
        x = self.norm1(x + self.dropout(self.attn(x, mask))) * m
        y = self.conv2(F.relu(self.conv1(x.transpose(1, 2)))).transpose(1, 2)
        return self.norm2(x + self.dropout(y)) * m


class VariancePredictor(nn.Module):
    """Two (conv -> ReLU -> LayerNorm -> dropout) stages and a scalar projection."""

    def __init__(self, hidden_dim: int, filter_dim: int, kernel: int, dropout: float):
        super().__init__()
        self.conv1 = nn.Conv1d(hidden_dim, filter_dim, kernel, padding=kernel // 2)
        self.norm1 = nn.LayerNorm(filter_dim)
        self.conv2 = nn.Conv1d(filter_dim, filter_dim, kernel, padding=kernel // 2)
        self.norm2 = nn.LayerNorm(filter_dim)
        self.proj = nn.Linear(filter_dim, 1)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        m = mask[..., None].to(x.dtype)
        x = x * m
        x = self.dropout(self.norm1(F.relu(self.conv1(x.transpose(1, 2)).transpose(1, 2)))) * m
        x = self.dropout(self.norm2(F.relu(self.conv2(x.transpose(1, 2)).transpose(1, 2)))) * m
        return self.proj(x).squeeze(-1) * mask.to(x.dtype)


def length_regulate(hidden: torch.Tensor, durations) -> torch.Tensor:
    """Repeat row ``i`` of an (L, H) sequence ``durations[i]`` times."""
    durations = torch.as_tensor(durations, dtype=torch.long)
    if hidden.dim() != 2 or durations.dim() != 1 or durations.numel() != hidden.shape[0]:
        raise ModelError(
            f"durations of length {durations.numel()} do not match hidden {tuple(hidden.shape)}"
        )
    if bool((durations < 0).any()):
        raise ModelError("durations must be non-negative")
    if int(durations.sum()) == 0:
        raise ModelError("empty output")
    return torch.repeat_interleave(hidden, durations, dim=0)


def length_regulate_batch(hidden: torch.Tensor, durations: torch.Tensor, src_mask: torch.Tensor):
    """Batched length regulation; returns zero-padded (B, F, H) frames and frame lengths."""
    rows = []
    for b in range(hidden.shape[0]):
        n = int(src_mask[b].sum())
        rows.append(length_regulate(hidden[b, :n], durations[b, :n]))
    lengths = torch.tensor([len(r) for r in rows], dtype=torch.long)
    return nn.utils.rnn.pad_sequence(rows, batch_first=True), lengths


def quantize_bins(values: torch.Tensor, config: ModelConfig) -> torch.Tensor:
    low, high = config.bin_range
    v = values.detach().clamp(low, high)
    bins = torch.floor((v - low) / (high - low) * config.n_bins).long()
    return bins.clamp(0, config.n_bins - 1)


def quantize_embed(values: torch.Tensor, table: torch.Tensor, config: ModelConfig) -> torch.Tensor:
    """Look up the bin embedding of every value; ``table`` is (n_bins, H)."""
    return F.embedding(quantize_bins(values, config), table)


def inference_durations(log_durations: torch.Tensor) -> torch.Tensor:
    """Invert the log(d + 1) duration target, rounding half up and keeping every phoneme."""
    return torch.clamp(torch.floor(torch.exp(log_durations) - 1.0 + 0.5), min=1).long()


def interpolate_style(model: "AcousticModel", src_style_id: int, tgt_style_id: int, w: float) -> torch.Tensor:
    """Affine mix ``(1 - w) * e_src + w * e_tgt`` of two style-table rows."""
    if not 0.0 <= w <= 1.0:
        raise ModelError(f"style weight {w} outside [0, 1]")
    e_src = model.style_vector(src_style_id)
    e_tgt = model.style_vector(tgt_style_id)
    if w == 0.0:
        return e_src
    if w == 1.0:
        return e_tgt
    return (1.0 - w) * e_src + w * e_tgt


class AcousticModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        h = config.hidden_dim
        self.phoneme_embedding = nn.Embedding(config.phoneme_vocab_size, h)
        self.speaker_embedding = nn.Embedding(config.n_speakers, h)
        self.style_embedding = nn.Embedding(config.n_styles, h)
        self.encoder = nn.ModuleList(
            FFTBlock(h, config.attention_heads, config.ffn_dim, config.conv_kernel, config.dropout)
            for _ in range(config.encoder_layers)
        )
        self.duration_predictor = self._predictor()
        self.pitch_predictor = self._predictor()
        self.energy_predictor = self._predictor()
        self.pitch_bins = nn.Embedding(config.n_bins, h)
        self.energy_bins = nn.Embedding(config.n_bins, h)
        self.decoder = nn.ModuleList(
            FFTBlock(h, config.attention_heads, config.ffn_dim, config.conv_kernel, config.dropout)
            for _ in range(config.decoder_layers)
        )
        self.mel_proj = nn.Linear(h, config.n_mel)
        for table in (self.phoneme_embedding, self.speaker_embedding, self.style_embedding,
                      self.pitch_bins, self.energy_bins):
            nn.init.normal_(table.weight, 0.0, h ** -0.5)

    def _predictor(self) -> VariancePredictor:
        c = self.config
        return VariancePredictor(c.hidden_dim, c.variance_filter_dim, c.variance_kernel, c.dropout)

    @property
    def dtype(self) -> torch.dtype:
        return self.mel_proj.weight.dtype

    # -- components -------------------------------------------------------

    def check_phonemes(self, phonemes: torch.Tensor, mask: torch.Tensor) -> None:
        valid = phonemes[mask]
        bad = (valid < 0) | (valid >= self.config.phoneme_vocab_size)
        if bool(bad.any()):
            raise ModelError(f"phoneme id {int(valid[bad][0])} out of vocabulary "
                             f"(size {self.config.phoneme_vocab_size})")
        if phonemes.shape[1] > self.config.max_input_length:
            raise ModelError(f"input length {phonemes.shape[1]} exceeds "
                             f"{self.config.max_input_length}")
        if bool((mask.sum(1) < 1).any()):
            raise ModelError("empty phoneme sequence")

    def encode(self, phonemes: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """(B, L) phoneme ids -> (B, L, H) hidden sequence."""
        self.check_phonemes(phonemes, mask)
        ids = phonemes.masked_fill(~mask, 0)
        x = self.phoneme_embedding(ids) * math.sqrt(self.config.hidden_dim)
        x = (x + sinusoid_positions(x.shape[1], x.shape[2], x.dtype)) * mask[..., None].to(x.dtype)
        for block in self.encoder:
            x = block(x, mask)
        return x

    def predict_variance(self, hidden: torch.Tensor, style_emb: Optional[torch.Tensor],
                         which: str, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        """Scalar prediction per position from ``hidden`` plus the broadcast style vector.

        ``hidden`` is (B, T, H) or (T, H); ``style_emb`` is (B, H), (H,) or None.
        """
        if which not in VARIANCE_KINDS:
            raise ModelError(f"unknown variance kind {which!r}")
        squeeze = hidden.dim() == 2
        if squeeze:
            hidden = hidden[None]
        if mask is None:
            mask = torch.ones(hidden.shape[:2], dtype=torch.bool)
        if style_emb is not None:
            if style_emb.shape[-1] != hidden.shape[-1]:
                raise ModelError(f"style vector has {style_emb.shape[-1]} entries, "
                                 f"expected {hidden.shape[-1]}")
            if style_emb.dim() == 1:
                style_emb = style_emb[None]
            hidden = hidden + style_emb[:, None, :]
        out = getattr(self, f"{which}_predictor")(hidden, mask)
        return out[0] if squeeze else out

    def variance_adapt(
        self,
        hidden: torch.Tensor,
        src_mask: torch.Tensor,
        style_emb: torch.Tensor,
        durations: Optional[torch.Tensor] = None,
        pitch: Optional[torch.Tensor] = None,
        energy: Optional[torch.Tensor] = None,
        frame_lengths: Optional[torch.Tensor] = None,
    ):
        """Predict prosody and build the frame-level hidden stream.

        Teacher mode (``durations``, ``pitch`` and ``energy`` given) regulates
        with target durations and embeds target pitch/energy; inference mode
        uses the predictions. The style vector only feeds the predictors.

        Returns:
            (frame_hidden (B, F, H), frame_mask (B, F), VarianceOutputs)
        """
        teacher = durations is not None
        if teacher and (pitch is None or energy is None):
            raise ModelError("teacher mode needs durations, pitch and energy targets")
        log_d = self.predict_variance(hidden, style_emb, "duration", src_mask)
        if teacher:
            used = durations.long() * src_mask
        else:
            used = inference_durations(log_d.detach()) * src_mask
            total = int(used.sum(1).max())
            if total > self.config.max_frames:
                raise ModelError(f"runaway duration: {total} frames > max_frames {self.config.max_frames}")

        frames, lengths = length_regulate_batch(hidden, used, src_mask)
        if teacher:
            expected = frame_lengths if frame_lengths is not None else torch.full(
                (pitch.shape[0],), pitch.shape[1], dtype=torch.long)
            if pitch.shape[1] > frames.shape[1]:
                frames = F.pad(frames, (0, 0, 0, pitch.shape[1] - frames.shape[1]))
            if (not torch.equal(lengths, expected.long()) or pitch.shape[1] != frames.shape[1]
                    or energy.shape != pitch.shape):
                raise ModelError(
                    f"target durations sum to {lengths.tolist()} frames but pitch/energy "
                    f"targets have {expected.tolist()}"
                )
        frame_mask = lengths_to_mask(lengths, frames.shape[1])
        m = frame_mask[..., None].to(frames.dtype)

        pitch_hat = self.predict_variance(frames, style_emb, "pitch", frame_mask)
        frames = frames + quantize_embed(pitch if teacher else pitch_hat, self.pitch_bins.weight,
                                         self.config) * m
        energy_hat = self.predict_variance(frames, style_emb, "energy", frame_mask)
        frames = frames + quantize_embed(energy if teacher else energy_hat, self.energy_bins.weight,
                                         self.config) * m
        return frames, frame_mask, VarianceOutputs(log_d, pitch_hat, energy_hat, used, lengths)

    def decode(self, frame_hidden: torch.Tensor, frame_mask: torch.Tensor,
               speaker_ids: torch.Tensor) -> torch.Tensor:
        """(B, F, H) frames plus speaker embedding -> (B, F, n_mel) log-mel."""
        if frame_hidden.shape[-1] != self.config.hidden_dim:
            raise ModelError(f"frame hidden width {frame_hidden.shape[-1]} != {self.config.hidden_dim}")
        self._check_ids(speaker_ids, self.config.n_speakers, "speaker")
        x = frame_hidden + self.speaker_embedding(speaker_ids)[:, None, :]
        x = (x + sinusoid_positions(x.shape[1], x.shape[2], x.dtype)) * frame_mask[..., None].to(x.dtype)
        for block in self.decoder:
            x = block(x, frame_mask)
        return self.mel_proj(x) * frame_mask[..., None].to(x.dtype)

    @staticmethod
    def _check_ids(ids: torch.Tensor, limit: int, what: str) -> None:
        if bool(((ids < 0) | (ids >= limit)).any()):
            raise ModelError(f"{what} id out of range [0, {limit})")

    def style_vector(self, style_id: int) -> torch.Tensor:
        if not 0 <= style_id < self.config.n_styles:
            raise ModelError(f"style id {style_id} out of range [0, {self.config.n_styles})")
        return self.style_embedding.weight[style_id]

    # -- assembled passes ------------------------------------------------

    def forward_teacher(self, phonemes, src_mask, durations, pitch, energy, frame_lengths,
                        speaker_ids, style_ids):
        """Teacher-forced pass over a padded batch; returns (mel_hat, VarianceOutputs)."""
        self._check_ids(style_ids, self.config.n_styles, "style")
        hidden = self.encode(phonemes, src_mask)
        style = self.style_embedding(style_ids)
        frames, frame_mask, var = self.variance_adapt(
            hidden, src_mask, style, durations, pitch, energy, frame_lengths)
        return self.decode(frames, frame_mask, speaker_ids), var

    def forward_batch(self, batch):
        return self.forward_teacher(batch.phonemes, batch.phoneme_mask, batch.durations,
                                    batch.pitch, batch.energy, batch.frame_lengths,
                                    batch.speaker_ids, batch.style_ids)

    def forward_infer(self, phonemes: Sequence[int], speaker_id: int, style_emb: torch.Tensor):
        """Synthesize one utterance from an arbitrary style vector.

        Returns (mel_hat (F, n_mel), VarianceOutputs with batch dimension 1).
        """
        style_emb = torch.as_tensor(style_emb, dtype=self.dtype)
        if style_emb.shape != (self.config.hidden_dim,):
            raise ModelError(f"style vector must have shape ({self.config.hidden_dim},)")
        if not bool(torch.isfinite(style_emb).all()):
            raise ModelError("style vector is not finite")
        ids = torch.as_tensor(list(phonemes), dtype=torch.long)[None]
        mask = torch.ones_like(ids, dtype=torch.bool)
        hidden = self.encode(ids, mask)
        frames, frame_mask, var = self.variance_adapt(hidden, mask, style_emb[None])
        mel = self.decode(frames, frame_mask, torch.tensor([speaker_id]))
        return mel[0], var


def build_model(config: ModelConfig, seed: int = 0, dtype: torch.dtype = torch.float32) -> AcousticModel:
    """Construct a model with parameters drawn from a seeded generator."""
    state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    try:
        model = AcousticModel(config)
    finally:
        torch.random.set_rng_state(state)
    return model.to(dtype)


def parameter_family(name: str) -> str:
    return name.split(".", 1)[0]


def backward(loss: torch.Tensor, model: nn.Module) -> Dict[str, torch.Tensor]:
    """Gradients of a scalar ``loss`` for every named parameter.

    Parameters outside the recorded graph get zero gradients.

    Raises:
        GradientError: if any gradient is NaN or infinite.
    """
    named = list(model.named_parameters())
    grads = torch.autograd.grad(loss, [p for _, p in named], allow_unused=True)
    out = {}
    for (name, p), g in zip(named, grads):
        g = torch.zeros_like(p) if g is None else g
        if not bool(torch.isfinite(g).all()):
            raise GradientError(f"non-finite gradient for {name}")
        out[name] = g
    return out
