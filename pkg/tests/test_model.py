import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from msms.config import ModelConfig
from msms.model import (
    GradientError,
    ModelError,
    backward,
    build_model,
    inference_durations,
    interpolate_style,
    length_regulate,
    quantize_bins,
    quantize_embed,
)
from msms.trainer import loss_total
from msms.verify import random_batch, tiny_config


@pytest.fixture(scope="module")
def config():
    return ModelConfig(phoneme_vocab_size=16, hidden_dim=32, encoder_layers=2, decoder_layers=2,
                       attention_heads=2, n_speakers=3, n_styles=3)


@pytest.fixture(scope="module")
def model(config):
    return build_model(config, seed=1, dtype=torch.float64).eval()


def ones_mask(n):
    return torch.ones(1, n, dtype=torch.bool)


class TestConfig:
    def test_heads_must_divide(self):
        with pytest.raises(ValueError):
            ModelConfig(hidden_dim=30, attention_heads=4)

    def test_bins(self):
        with pytest.raises(ValueError):
            ModelConfig(n_bins=1)
        with pytest.raises(ValueError):
            ModelConfig(bin_range=(1.0, -1.0))

    def test_json_round_trip(self, config):
        assert ModelConfig.from_json(config.to_json()) == config


class TestEncode:
    def test_shape(self, model):
        ids = torch.tensor([[1, 2, 3, 4, 5, 6, 7]])
        assert model.encode(ids, ones_mask(7)).shape == (1, 7, 32)

    def test_deterministic_in_eval(self, model):
        ids = torch.tensor([[3, 1, 4, 1, 5]])
        assert torch.equal(model.encode(ids, ones_mask(5)), model.encode(ids, ones_mask(5)))

    def test_permutation_changes_output(self, model):
        with torch.no_grad():
            a = model.encode(torch.tensor([[3, 7, 2, 9]]), ones_mask(4))
            b = model.encode(torch.tensor([[7, 3, 2, 9]]), ones_mask(4))
        assert (a - b).abs().max().item() > 1e-3

    def test_out_of_vocabulary_reports_index(self, model):
        with pytest.raises(ModelError, match="phoneme id 16"):
            model.encode(torch.tensor([[1, 16]]), ones_mask(2))

    def test_padding_does_not_leak(self, model):
        ids = torch.tensor([[3, 1, 4, 1, 5, 0, 0]])
        mask = torch.tensor([[True] * 5 + [False] * 2])
        padded = model.encode(ids, mask)[:, :5]
        plain = model.encode(ids[:, :5], ones_mask(5))
        torch.testing.assert_close(padded, plain, rtol=0, atol=1e-12)


class TestPredictVariance:
    def test_shape(self, model):
        h = torch.randn(7, 32, dtype=torch.float64)
        assert model.predict_variance(h, model.style_vector(0), "pitch").shape == (7,)

    def test_style_changes_prediction(self, model):
        h = torch.randn(1, 7, 32, dtype=torch.float64)
        with torch.no_grad():
            a = model.predict_variance(h, model.style_vector(0), "duration")
            b = model.predict_variance(h, model.style_vector(1), "duration")
        assert float((a - b).abs().max()) > 1e-6

    def test_zero_style_equals_no_conditioning(self, model):
        h = torch.randn(1, 7, 32, dtype=torch.float64)
        zero = torch.zeros(32, dtype=torch.float64)
        assert torch.equal(model.predict_variance(h, zero, "energy"),
                           model.predict_variance(h, None, "energy"))

    def test_dimension_mismatch(self, model):
        with pytest.raises(ModelError):
            model.predict_variance(torch.randn(1, 7, 32, dtype=torch.float64),
                                   torch.zeros(31, dtype=torch.float64), "pitch")


class TestLengthRegulate:
    def test_definition(self):
        rows = torch.tensor([[1.0], [2.0], [3.0]])
        out = length_regulate(rows, [2, 0, 3])
        assert out.squeeze(1).tolist() == [1.0, 1.0, 3.0, 3.0, 3.0]

    def test_all_ones_is_identity(self):
        rows = torch.randn(5, 4)
        assert torch.equal(length_regulate(rows, [1] * 5), rows)

    def test_total_rows(self):
        assert length_regulate(torch.randn(4, 3), [5, 10, 0, 10]).shape == (25, 3)

    def test_empty_output(self):
        with pytest.raises(ModelError, match="empty output"):
            length_regulate(torch.randn(3, 2), [0, 0, 0])

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.integers(0, 6), min_size=1, max_size=12))
    def test_conservation(self, durations):
        if sum(durations) == 0:
            return
        rows = torch.arange(len(durations), dtype=torch.float64)[:, None]
        out = length_regulate(rows, durations)
        assert out.shape[0] == sum(durations)
        values, counts = torch.unique_consecutive(out[:, 0], return_counts=True)
        expected = [(i, d) for i, d in enumerate(durations) if d > 0]
        assert [(int(v), int(c)) for v, c in zip(values, counts)] == expected


class TestQuantize:
    def test_zero_maps_to_middle(self):
        cfg = ModelConfig(n_bins=32, bin_range=(-4.0, 4.0))
        # floor((0 + 4) / 8 * 32) = 16
        assert quantize_bins(torch.tensor([0.0]), cfg).item() == 16

    def test_boundaries(self):
        cfg = ModelConfig(n_bins=32, bin_range=(-4.0, 4.0))
        bins = quantize_bins(torch.tensor([-4.0, -100.0, 4.0, 3.9999, 50.0]), cfg)
        assert bins.tolist() == [0, 0, 31, 31, 31]

    def test_constant_values_share_row(self):
        cfg = ModelConfig()
        table = torch.randn(cfg.n_bins, 8)
        out = quantize_embed(torch.full((6,), 0.7), table, cfg)
        assert torch.equal(out, out[:1].expand(6, 8))


class TestVarianceAdapt:
    def test_teacher_frame_hidden_ignores_style(self, model):
        ids = torch.tensor([[1, 2, 3, 4]])
        h = model.encode(ids, ones_mask(4))
        d = torch.tensor([[2, 0, 3, 1]])
        p = torch.randn(1, 6, dtype=torch.float64)
        e = torch.randn(1, 6, dtype=torch.float64)
        outs = [model.variance_adapt(h, ones_mask(4), model.style_vector(s)[None], d, p, e)[0]
                for s in range(3)]
        assert torch.equal(outs[0], outs[1]) and torch.equal(outs[0], outs[2])

    def test_teacher_frame_count(self, model):
        ids = torch.tensor([[1, 2, 3]])
        h = model.encode(ids, ones_mask(3))
        frames, _, var = model.variance_adapt(h, ones_mask(3), model.style_vector(0)[None],
                                              torch.tensor([[4, 0, 5]]), torch.zeros(1, 9, dtype=torch.float64),
                                              torch.zeros(1, 9, dtype=torch.float64))
        assert frames.shape[1] == 9 and var.frame_count == 9

    def test_teacher_mismatch_rejected(self, model):
        ids = torch.tensor([[1, 2, 3]])
        h = model.encode(ids, ones_mask(3))
        with pytest.raises(ModelError):
            model.variance_adapt(h, ones_mask(3), model.style_vector(0)[None], torch.tensor([[4, 0, 5]]),
                                 torch.zeros(1, 8, dtype=torch.float64), torch.zeros(1, 8, dtype=torch.float64))

    def test_infer_frame_count(self, model):
        ids = torch.tensor([[1, 2, 3, 4, 5]])
        h = model.encode(ids, ones_mask(5))
        frames, _, var = model.variance_adapt(h, ones_mask(5), model.style_vector(2)[None])
        expected = int(torch.clamp(torch.floor(torch.exp(var.log_durations) - 0.5), min=1).sum())
        assert frames.shape[1] == var.frame_count == expected


def test_inference_durations_rounding():
    # log(d + 1) targets invert to exp(.) - 1, rounded half up, at least one frame
    ld = torch.log(torch.tensor([1.0, 2.0, 3.4, 3.6, 11.0, 0.2]))
    assert inference_durations(ld).tolist() == [1, 1, 2, 3, 10, 1]


class TestDecode:
    def test_shape(self, model):
        out = model.decode(torch.randn(1, 25, 32, dtype=torch.float64), ones_mask(25), torch.tensor([0]))
        assert out.shape == (1, 25, 80)

    def test_speaker_changes_mel(self, model):
        x = torch.randn(1, 25, 32, dtype=torch.float64)
        with torch.no_grad():
            a = model.decode(x, ones_mask(25), torch.tensor([0]))
            b = model.decode(x, ones_mask(25), torch.tensor([1]))
        assert float((a - b).abs().max()) > 1e-6

    def test_bad_speaker(self, model):
        with pytest.raises(ModelError):
            model.decode(torch.randn(1, 5, 32, dtype=torch.float64), ones_mask(5), torch.tensor([3]))

    def test_width_mismatch(self, model):
        with pytest.raises(ModelError):
            model.decode(torch.randn(1, 5, 16, dtype=torch.float64), ones_mask(5), torch.tensor([0]))


class TestAssembled:
    def test_teacher_isolation(self, model, config):
        batch = random_batch(config, seed=4, n_utts=3)
        mel_a, var_a = model.forward_batch(batch)
        batch.style_ids = (batch.style_ids + 1) % 3
        mel_b, _ = model.forward_batch(batch)
        batch.speaker_ids = (batch.speaker_ids + 1) % 3
        mel_c, var_c = model.forward_batch(batch)
        assert mel_a.shape == batch.mel.shape
        assert (mel_a - mel_b).abs().max().item() <= 1e-9
        batch.style_ids = (batch.style_ids + 2) % 3
        _, var_d = model.forward_batch(batch)
        for x, y in ((var_a.log_durations, var_d.log_durations), (var_a.pitch, var_d.pitch),
                     (var_a.energy, var_d.energy)):
            assert (x - y).abs().max().item() <= 1e-9

    @torch.no_grad()
    def test_infer_speaker_isolation_and_table_identity(self, model):
        ids = [1, 5, 2, 8, 3]
        outs = [model.forward_infer(ids, s, model.style_vector(1)) for s in range(3)]
        for mel, var in outs[1:]:
            assert torch.equal(var.pitch, outs[0][1].pitch)
            assert torch.equal(var.energy, outs[0][1].energy)
            assert torch.equal(var.log_durations, outs[0][1].log_durations)
            assert (mel - outs[0][0]).abs().max().item() > 1e-6
        mel, var = outs[0]
        assert mel.shape == (int(var.durations.sum()), 80)

    def test_batched_equals_single(self, model, config):
        batch = random_batch(config, seed=9, n_utts=3)
        mel_b, var_b = model.forward_batch(batch)
        for i in range(3):
            n, f = int(batch.phoneme_lengths[i]), int(batch.frame_lengths[i])
            single = type(batch)(
                batch.phonemes[i:i + 1, :n], batch.phoneme_lengths[i:i + 1], batch.phoneme_mask[i:i + 1, :n],
                batch.durations[i:i + 1, :n], batch.pitch[i:i + 1, :f], batch.energy[i:i + 1, :f],
                batch.mel[i:i + 1, :f], batch.frame_lengths[i:i + 1], batch.frame_mask[i:i + 1, :f],
                batch.speaker_ids[i:i + 1], batch.style_ids[i:i + 1])
            mel_s, var_s = model.forward_batch(single)
            torch.testing.assert_close(mel_b[i, :f], mel_s[0], rtol=0, atol=1e-10)
            torch.testing.assert_close(var_b.log_durations[i, :n], var_s.log_durations[0], rtol=0, atol=1e-10)

    def test_runaway_duration(self, config):
        m = build_model(config, seed=0, dtype=torch.float64).eval()
        with torch.no_grad():
            m.duration_predictor.proj.bias.fill_(20.0)
        with pytest.raises(ModelError, match="runaway duration"):
            m.forward_infer([1, 2, 3], 0, m.style_vector(0))

    def test_infer_rejects_nonfinite_style(self, model):
        with pytest.raises(ModelError):
            model.forward_infer([1, 2], 0, torch.full((32,), float("nan"), dtype=torch.float64))


class TestInterpolate:
    def test_endpoints_and_midpoint(self, model):
        e0, e2 = model.style_vector(0), model.style_vector(2)
        assert torch.equal(interpolate_style(model, 0, 2, 0.0), e0)
        assert torch.equal(interpolate_style(model, 0, 2, 1.0), e2)
        mid = interpolate_style(model, 0, 2, 0.5)
        for k in range(32):
            assert mid[k].item() == pytest.approx((e0[k].item() + e2[k].item()) / 2, abs=1e-15)

    def test_out_of_range(self, model):
        with pytest.raises(ModelError):
            interpolate_style(model, 0, 1, 1.5)
        with pytest.raises(ModelError):
            interpolate_style(model, 0, 1, -0.1)

    @settings(max_examples=30, deadline=None)
    @given(st.floats(0, 1), st.floats(0, 1), st.floats(0, 1))
    def test_affine(self, model, a, b, lam):
        # the weight map is affine: mixing two weights equals using the mixed weight
        va, vb = interpolate_style(model, 0, 1, a), interpolate_style(model, 0, 1, b)
        vm = interpolate_style(model, 0, 1, lam * a + (1 - lam) * b)
        torch.testing.assert_close(lam * va + (1 - lam) * vb, vm, rtol=0, atol=1e-12)


class TestBackward:
    def test_zero_loss_zero_grads(self, model):
        loss = sum(p.sum() for p in model.parameters()) * 0.0
        grads = backward(loss, model)
        assert set(grads) == {n for n, _ in model.named_parameters()}
        assert all(float(g.abs().max()) == 0.0 for g in grads.values())

    def test_shapes_and_finiteness(self, model, config):
        batch = random_batch(config, seed=2)
        mel, var = model.forward_batch(batch)
        grads = backward(loss_total(mel, var, batch)[0], model)
        for name, p in model.named_parameters():
            assert grads[name].shape == p.shape
            assert bool(torch.isfinite(grads[name]).all())

    def test_style_table_cut_from_mel_under_teacher_forcing(self, model, config):
        batch = random_batch(config, seed=3)
        mel, var = model.forward_batch(batch)
        _, terms = loss_total(mel, var, batch)
        g = torch.autograd.grad(terms["mel"], model.style_embedding.weight, allow_unused=True)[0]
        assert g is None or float(g.abs().max()) == 0.0
        # the variance terms do reach the style table
        g_var = torch.autograd.grad(terms["pitch"], model.style_embedding.weight)[0]
        assert float(g_var.abs().max()) > 0

    def test_nonfinite_gradient_named(self, config):
        m = build_model(tiny_config(), seed=0, dtype=torch.float64)
        loss = m.mel_proj.bias.sum() * torch.tensor(float("inf"), dtype=torch.float64)
        with pytest.raises(GradientError, match="mel_proj.bias"):
            backward(loss, m)
