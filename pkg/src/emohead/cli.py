"""Command line entry points: dataset, prompt, train, generate, evaluate."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import load_run_config
from .cot import run_cot, validate_bundle
from .dataset import generate_synthetic_dataset
from .facs import EMOTION_LABELS, FacsCatalog


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, default=None, help="run config YAML")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument(
        "--override",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="dotted config override, e.g. training.learning_rate=0.01",
    )


def _load_config(args):
    return load_run_config(args.config, overrides=args.override, seed=args.seed)


def cmd_dataset(args) -> int:
    config = _load_config(args)
    out_dir = args.out or Path(config.paths.dataset_manifest).parent
    manifest = generate_synthetic_dataset(
        out_dir, args.clips or config.dataset.clips, config.dataset, config.seed
    )
    print(f"wrote {manifest}")
    return 0


def cmd_prompt(args) -> int:
    catalog = FacsCatalog.load(args.facs_catalog) if args.facs_catalog else None
    bundle = run_cot(
        args.image, args.emotion, args.intensity, backend=args.backend, catalog=catalog
    )
    report = validate_bundle(bundle, catalog)
    if args.out:
        bundle.save(args.out)
        print(f"wrote {args.out}")
    else:
        print(bundle.to_json())
    if report:
        for violation in report:
            print(f"violation {violation}", file=sys.stderr)
        return 1
    return 0


def cmd_train(args) -> int:
    from .training import Trainer

    config = _load_config(args)
    trainer = Trainer(config, manifest_path=args.manifest, out_dir=args.out)
    result = trainer.train(resume_from=args.resume)
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"loss log:   {result.loss_log_path}")
    print(
        f"loss/element: initial {result.initial_loss_per_element:.4f} "
        f"final {result.final_loss_per_element:.4f} "
        f"(ratio {result.loss_ratio:.4f})"
    )
    return 0


def cmd_generate(args) -> int:
    from .pipeline import generate, replay

    if args.replay:
        result = replay(args.replay, args.out)
    else:
        config = _load_config(args)
        missing = [n for n, v in (("--reference", args.reference), ("--audio", args.audio), ("--emotion", args.emotion)) if v is None]
        if missing:
            print(f"generate needs {', '.join(missing)} (or --replay)", file=sys.stderr)
            return 2
        result = generate(
            config,
            args.reference,
            args.audio,
            args.emotion,
            args.intensity,
            args.out,
            checkpoint=args.checkpoint,
            backend=args.backend,
        )
    print(f"frames in {result.frames_dir}")
    print(f"metadata: {result.metadata_path}")
    return 0


def cmd_evaluate(args) -> int:
    from .pipeline import evaluate_dirs

    report = evaluate_dirs(args.generated, args.reference)
    print(report.format_table())
    out = args.out or Path(args.generated) / "metric_report.json"
    report.save(out)
    print(f"report: {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="emohead",
        description="Emotional talking-head toy pipeline: prompts, training, generation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("dataset", help="render the synthetic sprite-face dataset")
    _add_common(p)
    p.add_argument("--out", type=Path, default=None, help="dataset directory")
    p.add_argument("--clips", type=int, default=None, help="clip count override")
    p.set_defaults(fn=cmd_dataset)

    p = sub.add_parser("prompt", help="run the prompt decomposition standalone")
    p.add_argument("--emotion", required=True, choices=EMOTION_LABELS)
    p.add_argument("--intensity", type=int, default=2, choices=(1, 2, 3))
    p.add_argument("--image", type=Path, default=None, help="reference image (sidecar attrs honored)")
    p.add_argument("--backend", choices=("rules", "llm"), default="rules")
    p.add_argument("--facs-catalog", type=Path, default=None, help="alternative AU catalog file")
    p.add_argument("--out", type=Path, default=None, help="bundle JSON path")
    p.set_defaults(fn=cmd_prompt)

    p = sub.add_parser("train", help="two-phase training on a dataset manifest")
    _add_common(p)
    p.add_argument("--manifest", type=Path, default=None, help="dataset manifest (defaults to config)")
    p.add_argument("--out", type=Path, default=None, help="run directory (defaults to config)")
    p.add_argument("--resume", type=Path, default=None, help="checkpoint to resume from")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("generate", help="generate frames from a trained checkpoint")
    _add_common(p)
    p.add_argument("--reference", type=Path, help="reference image PNG")
    p.add_argument("--audio", type=Path, help="driving mono WAV")
    p.add_argument("--emotion", choices=EMOTION_LABELS)
    p.add_argument("--intensity", type=int, default=2, choices=(1, 2, 3))
    p.add_argument("--backend", choices=("rules", "llm"), default="rules")
    p.add_argument("--checkpoint", type=Path, default=None)
    p.add_argument("--replay", type=Path, default=None, help="re-run from a metadata JSON")
    p.add_argument("--out", type=Path, required=True, help="output frame directory")
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("evaluate", help="PSNR/SSIM of generated clips vs ground truth")
    _add_common(p)
    p.add_argument("--generated", type=Path, required=True)
    p.add_argument("--reference", type=Path, required=True)
    p.add_argument("--out", type=Path, default=None, help="report JSON path")
    p.set_defaults(fn=cmd_evaluate)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    raise SystemExit(main())
