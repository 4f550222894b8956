import numpy as np
import pytest

from msms.features import AlignedUtterance


def toy_utterances(n=6, n_speakers=2, vocab=16, n_mel=80, seed=0):
    """Random but well-formed utterances: enough voiced frames, non-constant pitch."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        spk = i % n_speakers
        length = int(rng.integers(4, 9))
        durations = rng.integers(1, 6, length)
        f = int(durations.sum())
        pitch = rng.uniform(90, 260, f)
        pitch[rng.random(f) < 0.2] = 0.0
        pitch[:2] = (120.0, 180.0)
        out.append(AlignedUtterance(f"toy{i:02d}", rng.integers(0, vocab, length), durations, pitch,
                                    rng.uniform(0.1, 5.0, f), rng.normal(-4, 2, (f, n_mel)), spk, spk))
    return out


@pytest.fixture
def toy():
    return toy_utterances()


# Settings of the reference training run shared by the slow tests: a parallel
# three-speaker corpus (rising / falling / flat), desk-scale model.
TRANSFER_UTTERANCES = 12
TRANSFER_STEPS = 3000


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    from msms.corpus import generate_synthetic_corpus

    return generate_synthetic_corpus(str(tmp_path_factory.mktemp("small")), 3, 2, seed=5)


@pytest.fixture(scope="session")
def trained(tmp_path_factory):
    """(manifest, raw utterances, TrainResult, Synthesizer, seconds) of the reference run."""
    import time

    from msms.config import ModelConfig, TrainingSchedule
    from msms.corpus import generate_synthetic_corpus
    from msms.synth import Synthesizer
    from msms.trainer import build_corpus, load_manifest, manifest_meta, train

    start = time.perf_counter()
    corpus = generate_synthetic_corpus(str(tmp_path_factory.mktemp("transfer")), 3,
                                       TRANSFER_UTTERANCES, seed=0)
    manifest = load_manifest(corpus.manifest_path)
    utts = build_corpus(manifest)
    config = ModelConfig(phoneme_vocab_size=len(manifest.phonemes), n_speakers=3, n_styles=3)
    schedule = TrainingSchedule(total_steps=TRANSFER_STEPS, warmup_steps=4000)
    result = train(utts, config, schedule, "utt", meta=manifest_meta(manifest))
    synth = Synthesizer(result.checkpoint, result.model)
    return manifest, utts, result, synth, time.perf_counter() - start


ACCEPTANCE_LINES = {}


def record_criterion(number, title, passed, detail, seconds, budget):
    """Store (and print) one acceptance line; the runtime budget is part of the verdict."""
    ok = bool(passed) and seconds < budget
    line = (f"criterion {number:>2} {title:<24} {'PASS' if ok else 'FAIL'}  "
            f"{detail}; {seconds:.1f} s (budget {budget:.0f} s)")
    ACCEPTANCE_LINES[number] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])
