"""Command-line entry points.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .encode import rank_pool, write_token_dump
from .errors import ConfigError, DataError, NumericalError
from .harness import (
    ModelConfig,
    TrainConfig,
    load_dataset,
    read_config,
    run_experiment,
    write_report,
)
from .magnify import BandpassSpec, magnify_sequence
from .model import VARIANTS, encode_sample
from .model import init_params
from .seqio import (
    SynthConfig,
    generate_synthetic,
    read_manifest,
    read_meseq,
    standardize_length,
    write_manifest,
    write_meseq,
)
from .encode import mean_patch_vectors


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mpt", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic micro-motion dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--subjects", type=int, default=10)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--reps", type=int, default=3)
    p.add_argument("--frames", type=int, default=100)
    p.add_argument("--fps", type=float, default=100.0)
    p.add_argument("--freq", type=float, default=1.5)
    p.add_argument("--amplitude", type=float, default=0.3)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("magnify", help="write the magnified motion sequence")
    p.add_argument("--in", dest="in_path", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--beta", type=float, default=20.0)
    p.add_argument("--low", type=float, default=0.4)
    p.add_argument("--high", type=float, default=4.0)
    p.add_argument("--order", type=int, default=2)
    p.add_argument("--levels", type=int, default=3)

    p = sub.add_parser("encode", help="dump the token batch for one sequence")
    p.add_argument("--in", dest="in_path", required=True)
    p.add_argument("--dump-tokens", dest="dump_path", required=True)
    p.add_argument("--beta", type=float, default=20.0)
    p.add_argument("--low", type=float, default=0.4)
    p.add_argument("--high", type=float, default=4.0)
    p.add_argument("--levels", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train", help="LOSO-train one variant and emit a report")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", default=None, help="flat key=value config file")
    p.add_argument("--variant", default=None, choices=VARIANTS)
    p.add_argument("--out", default=None, help="report directory")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--jobs", type=int, default=None)

    p = sub.add_parser("ablate", help="run several variants on one dataset")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--variants", default="head-only,vpt-random-prompts,primitive-adapter,full-mpt")
    p.add_argument("--out", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--jobs", type=int, default=None)
    return parser


def _cmd_synth(args) -> None:
    config = SynthConfig(
        subjects=args.subjects, classes=args.classes, reps=args.reps,
        frames=args.frames, fps=args.fps, freq_hz=args.freq,
        amplitude=args.amplitude, height=args.size, width=args.size,
    )
    sequences, manifest = generate_synthetic(config, seed=args.seed)
    os.makedirs(args.out, exist_ok=True)
    for seq, (path, _, _) in zip(sequences, manifest.entries):
        write_meseq(seq, os.path.join(args.out, path))
    write_manifest(manifest, os.path.join(args.out, "manifest.tsv"))
    print(f"wrote {len(sequences)} sequences and manifest.tsv to {args.out}")


def _cmd_magnify(args) -> None:
    seq = read_meseq(args.in_path)
    spec = BandpassSpec(args.low, args.high, order=args.order, fps=seq.fps)
    out = magnify_sequence(seq, args.beta, spec, args.levels)
    write_meseq(out, args.out)
    print(f"wrote motion sequence to {args.out}")


def _cmd_encode(args) -> None:
    seq = read_meseq(args.in_path)
    model_cfg = ModelConfig(image_size=seq.frames.shape[1], channels=seq.frames.shape[3])
    params = init_params(model_cfg, "full-mpt", seed=args.seed)
    app = standardize_length(seq, model_cfg.frames)
    dyn = rank_pool(app)
    spec = BandpassSpec(args.low, args.high, fps=seq.fps)
    motion = standardize_length(
        magnify_sequence(seq, args.beta, spec, args.levels), model_cfg.frames
    )
    batch = encode_sample(params, dyn, mean_patch_vectors(motion.frames))
    write_token_dump(batch.tokens.data, args.dump_path)
    print(f"wrote {batch.n_rows} x {model_cfg.dim} tokens to {args.dump_path}")


def _load_configs(args) -> tuple[TrainConfig, ModelConfig]:
    if args.config:
        train_cfg, model_cfg = read_config(args.config)
    else:
        train_cfg, model_cfg = TrainConfig(), ModelConfig()
    overrides = {}
    for name in ("variant", "seed", "epochs", "jobs"):
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = value
    if overrides:
        kwargs = {f: getattr(train_cfg, f) for f in train_cfg.__dataclass_fields__}
        kwargs.update(overrides)
        train_cfg = TrainConfig(**kwargs)
    return train_cfg, model_cfg


def _run_variant(train_cfg, model_cfg, manifest_path):
    manifest = read_manifest(manifest_path)
    sequences = load_dataset(manifest, os.path.dirname(os.path.abspath(manifest_path)))
    if model_cfg.classes != len(manifest.class_names):
        raise ConfigError(
            f"config expects {model_cfg.classes} classes, manifest lists "
            f"{len(manifest.class_names)}"
        )
    return run_experiment(train_cfg, model_cfg, sequences, manifest.class_names)


def _cmd_train(args) -> None:
    train_cfg, model_cfg = _load_configs(args)
    report = _run_variant(train_cfg, model_cfg, args.manifest)
    if args.out:
        write_report(report, args.out)
    sys.stdout.write(report.to_text())


def _cmd_ablate(args) -> None:
    train_cfg, model_cfg = _load_configs(args)
    names = [v.strip() for v in args.variants.split(",") if v.strip()]
    for name in names:
        if name not in VARIANTS:
            raise ConfigError(f"unknown variant {name!r}")
    rows = []
    for name in names:
        kwargs = {f: getattr(train_cfg, f) for f in train_cfg.__dataclass_fields__}
        kwargs["variant"] = name
        cfg = TrainConfig(**kwargs)
        report = _run_variant(cfg, model_cfg, args.manifest)
        if args.out:
            write_report(report, os.path.join(args.out, name))
        rows.append((name, report.tunable_params, report.acc, report.macro_f1))
    width = max(len(n) for n, *_ in rows) + 2
    print(f"{'variant':<{width}}{'tunable':>12}{'acc':>10}{'macroF1':>10}")
    for name, tunable, acc, f1 in rows:
        print(f"{name:<{width}}{tunable:>12}{acc:>10.4f}{f1:>10.4f}")


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    handlers = {
        "synth": _cmd_synth,
        "magnify": _cmd_magnify,
        "encode": _cmd_encode,
        "train": _cmd_train,
        "ablate": _cmd_ablate,
    }
    try:
        handlers[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 4
    except OSError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
