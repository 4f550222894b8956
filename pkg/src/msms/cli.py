"""Command-line entry point: ``msms {gen-corpus,features,train,synth,sweep,verify}``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from .config import ModelConfig, TrainingSchedule
from .corpus import generate_synthetic_corpus

logger = logging.getLogger("msms")


def _load_config(path, **overrides) -> ModelConfig:
    data = {}
    if path:
        with open(path) as f:
            data = json.load(f)
    data.update({k: v for k, v in overrides.items() if v is not None})
    return ModelConfig.from_dict(data)


def cmd_gen_corpus(args) -> int:
    corpus = generate_synthetic_corpus(args.out, args.speakers, args.utterances, args.seed,
                                       args.heterogeneity)
    print(corpus.manifest_path)
    return 0


def cmd_features(args) -> int:
    from .trainer import build_corpus, load_manifest

    manifest = load_manifest(args.manifest)
    utts = build_corpus(manifest, cache_dir=args.out)
    print(f"{len(utts)} utterances cached in {args.out}")
    return 0


def cmd_train(args) -> int:
    from .trainer import build_corpus, load_checkpoint, load_manifest, manifest_meta, train

    manifest = load_manifest(args.manifest)
    utts = build_corpus(manifest, cache_dir=os.path.join(args.out, "features"))
    resume = load_checkpoint(args.checkpoint) if args.checkpoint else None
    if resume is not None:
        config, schedule = resume.config, resume.schedule
        if args.steps:
            schedule.total_steps = args.steps
    else:
        config = _load_config(args.config, phoneme_vocab_size=len(manifest.phonemes),
                              n_speakers=len(manifest.speakers), n_styles=len(manifest.styles))
        schedule = TrainingSchedule(seed=args.seed)
        if args.steps:
            schedule.total_steps = args.steps
        if args.batch_size:
            schedule.batch_size = args.batch_size
        if args.warmup:
            schedule.warmup_steps = args.warmup
    result = train(utts, config, schedule, args.norm_mode, out_dir=args.out,
                   meta=manifest_meta(manifest), resume=resume)
    last = result.log[-1] if result.log else None
    if last:
        print(f"step {last['step']} loss {last['total']:.6g} -> {os.path.join(args.out, 'checkpoint.msms')}")
    return 0


def _request(args, style_weight=None):
    from .synth import SynthesisRequest

    return SynthesisRequest(args.text_phonemes, args.speaker, args.style, args.source_style,
                            args.style_weight if style_weight is None else style_weight, args.seed)


def cmd_synth(args) -> int:
    from .synth import Synthesizer, export_artifacts, griffin_lim
    from .trainer import load_checkpoint

    synth = Synthesizer(load_checkpoint(args.checkpoint))
    result = synth.synthesize(_request(args))
    audio = None if args.no_audio else griffin_lim(result.mel, seed=args.seed)
    paths = export_artifacts(result, args.out, audio)
    for kind, path in sorted(paths.items()):
        print(f"{kind}\t{path}")
    return 0


def cmd_sweep(args) -> int:
    from .synth import Synthesizer, transition_sweep
    from .trainer import load_checkpoint

    weights = [float(w) for w in args.weights.split(",")]
    synth = Synthesizer(load_checkpoint(args.checkpoint))
    transition_sweep(synth, _request(args, 1.0), weights, out_dir=args.out, vocode=not args.no_audio)
    print(os.path.join(args.out, "index.tsv"))
    return 0


def cmd_verify(args) -> int:
    from .synth import Synthesizer
    from .trainer import build_corpus, load_checkpoint, load_manifest
    from .verify import run_all

    synth = Synthesizer(load_checkpoint(args.checkpoint))
    utts = build_corpus(load_manifest(args.manifest))
    report = run_all(synth, utts, seed=args.seed, n_probes=args.n_probes)
    sys.stdout.write(report.to_text())
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "report.txt"), "w") as f:
            f.write(report.to_text())
        with open(os.path.join(args.out, "report.tsv"), "w") as f:
            f.write(report.to_rows())
    return 0 if report.passed else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="msms", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, manifest=False, checkpoint=False, out_required=True):
        p.add_argument("--config", help="JSON file with ModelConfig fields")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", required=out_required)
        if manifest:
            p.add_argument("--manifest", required=True)
        if checkpoint is not None:
            p.add_argument("--checkpoint", required=checkpoint)
        return p

    p = common(sub.add_parser("gen-corpus", help="write a synthetic corpus"), checkpoint=None)
    p.add_argument("--speakers", type=int, default=3)
    p.add_argument("--utterances", type=int, default=8)
    p.add_argument("--heterogeneity", type=float, default=1.0)
    p.set_defaults(func=cmd_gen_corpus)

    p = common(sub.add_parser("features", help="extract and cache features"), manifest=True, checkpoint=None)
    p.set_defaults(func=cmd_features)

    p = common(sub.add_parser("train", help="train or resume (with --checkpoint)"), manifest=True)
    p.add_argument("--norm-mode", choices=("utt", "spk"), default="utt")
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--warmup", type=int)
    p.set_defaults(func=cmd_train)

    for name, func in (("synth", cmd_synth), ("sweep", cmd_sweep)):
        p = common(sub.add_parser(name), checkpoint=True)
        p.add_argument("--text-phonemes", required=True, help="space-separated phoneme symbols")
        p.add_argument("--speaker", required=True)
        p.add_argument("--style", required=True)
        p.add_argument("--source-style")
        p.add_argument("--no-audio", action="store_true", help="skip Griffin-Lim")
        if name == "synth":
            p.add_argument("--style-weight", type=float, default=1.0)
        else:
            p.add_argument("--weights", default="0,0.25,0.5,0.75,1")
            p.set_defaults(style_weight=1.0)
        p.set_defaults(func=func)

    p = common(sub.add_parser("verify", help="run the disentanglement checks"), manifest=True,
               checkpoint=True, out_required=False)
    p.add_argument("--n-probes", type=int, default=50)
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError, RuntimeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
