import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from msms.features import AlignedUtterance
from msms.normalize import (
    NormalizationError,
    apply_norm,
    compute_stats,
    denormalize,
    normalize_corpus,
    stats_rows,
    voiced_moments,
)


def utt(pitch, energy=None, uid="u", speaker=0):
    pitch = np.asarray(pitch, dtype=np.float64)
    f = len(pitch)
    energy = np.linspace(1.0, 2.0, f) if energy is None else energy
    return AlignedUtterance(uid, [0], [f], pitch, energy, np.zeros((f, 80)), speaker, speaker)


def test_stats_of_three_voiced_frames():
    s = compute_stats(utt([100, 150, 200]), "utterance")
    assert s.pitch_mean == pytest.approx(150.0)
    # population std: sqrt((50^2 + 0 + 50^2) / 3)
    assert s.pitch_std == pytest.approx(np.sqrt(5000 / 3))
    assert s.pitch_std == pytest.approx(40.82, abs=5e-3)
    assert s.voiced_frames_used == 3


def test_unvoiced_frames_excluded():
    s = compute_stats(utt([0, 120, 130, 0]), "utterance")
    assert s.voiced_frames_used == 2
    assert s.pitch_mean == pytest.approx(125.0)


def test_two_equal_voiced_frames_is_degenerate():
    with pytest.raises(NormalizationError, match="degenerate stats"):
        compute_stats(utt([0, 120, 120, 0]), "utterance")


def test_constant_pitch_degenerate():
    with pytest.raises(NormalizationError, match="degenerate stats"):
        compute_stats(utt([110, 110, 110]), "utterance")


def test_insufficient_voiced():
    with pytest.raises(NormalizationError, match="insufficient voiced frames"):
        compute_stats(utt([0, 0, 140]), "utterance")


def test_scope_preconditions():
    a, b = utt([100, 200], uid="a"), utt([120, 180], uid="b", speaker=1)
    with pytest.raises(NormalizationError):
        compute_stats([a, a], "utterance")
    with pytest.raises(NormalizationError):
        compute_stats([a, b], "speaker")


def test_apply_norm_values():
    u = utt([100, 150, 200])
    out = apply_norm(u, compute_stats(u, "utterance"))
    np.testing.assert_allclose(out.pitch, [-1.2247, 0.0, 1.2247], atol=1e-4)


def test_unvoiced_stay_exactly_zero():
    u = utt([0, 100, 0, 180, 220, 0])
    out = apply_norm(u, compute_stats(u, "utterance"))
    assert np.all(out.pitch[[0, 2, 5]] == 0.0)


def test_denormalize_points():
    s = compute_stats(utt([100, 150, 200]), "utterance")
    assert denormalize([0.0], s)[0] == pytest.approx(150.0)
    assert denormalize([1.0], s)[0] == pytest.approx(150.0 + s.pitch_std)
    assert denormalize([1.0], s, "energy")[0] == pytest.approx(s.energy_mean + s.energy_std)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(60.0, 500.0), min_size=3, max_size=40),
       st.lists(st.booleans(), min_size=40, max_size=40))
def test_round_trip(voiced_values, unvoiced_flags):
    pitch = np.array(voiced_values)
    pitch[np.array(unvoiced_flags[: len(pitch)])] = 0.0
    if np.count_nonzero(pitch) < 2 or np.ptp(pitch[pitch > 0]) < 1e-3:
        return
    u = utt(pitch)
    s = compute_stats(u, "utterance")
    n = apply_norm(u, s)
    voiced = pitch > 0
    back = denormalize(n.pitch, s, mask=voiced)
    np.testing.assert_allclose(back[voiced], pitch[voiced], rtol=1e-6, atol=1e-4)
    assert np.all(back[~voiced] == 0)


def test_uttnorm_moments():
    rng = np.random.default_rng(0)
    utts = []
    for i in range(5):
        p = rng.uniform(80, 300, 50)
        p[rng.random(50) < 0.3] = 0
        utts.append(utt(p, rng.uniform(0, 10, 50), uid=f"u{i}"))
    normed, stats = normalize_corpus(utts, "utt")
    assert set(stats) == {u.id for u in utts}
    for raw, n in zip(utts, normed):
        m, s = voiced_moments(n, raw.pitch > 0)
        assert abs(m) <= 1e-6 and abs(s - 1) <= 1e-6
        e = n.energy.astype(np.float64)
        assert abs(e.mean()) <= 1e-6 and abs(e.std() - 1) <= 1e-6


def test_spknorm_pooled_but_not_per_utterance():
    low = utt(np.linspace(100, 140, 40), uid="low")
    high = utt(np.linspace(180, 220, 40), uid="high")
    normed, stats = normalize_corpus([low, high], "spk")
    assert list(stats) == ["speaker:0"]
    pooled = np.concatenate([n.pitch for n in normed]).astype(np.float64)
    assert abs(pooled.mean()) < 1e-6 and abs(pooled.std() - 1) < 1e-6
    means = [voiced_moments(n)[0] for n in normed]
    assert max(abs(m) for m in means) > 0.1


def test_speaker_fold_is_order_independent():
    a, b = utt([100, 150, 120], uid="a"), utt([200, 210, 190], uid="b")
    assert compute_stats([a, b], "speaker") == compute_stats([b, a], "speaker")


def test_stats_rows():
    s = compute_stats(utt([100, 150, 200]), "utterance")
    text = stats_rows({"u": s})
    header, row = text.strip().split("\n")
    assert header.split("\t")[0] == "id"
    fields = row.split("\t")
    assert fields[:2] == ["u", "utterance"] and float(fields[2]) == pytest.approx(150)
    assert fields[-1] == "3"
