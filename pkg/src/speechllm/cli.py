"""Command line: ``speechllm {generate,train,evaluate,sweep}``.

Exit status is 0 only when the command finished and wrote all its outputs;
configuration problems exit with 2, other failures with 1.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from speechllm.errors import ConfigError, SpeechLLMError

log = logging.getLogger("speechllm")


def _stage_list(text):
    try:
        return [int(x) for x in text.replace(" ", "").split(",") if x]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list of stage indices, got {text!r}") from None


def _common(p, out_default):
    p.add_argument("--config", type=Path, help="YAML run config (defaults are used for missing keys)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", type=Path, default=None, help=f"output directory (default: config 'out' or {out_default})")
    p.add_argument("-v", "--verbose", action="store_true")


def _model_flags(p):
    p.add_argument("--stages", type=_stage_list, help="stages to run, e.g. 1,2,3")
    p.add_argument("--projector", choices=("linear", "conv1d", "transformer", "qformer"))
    p.add_argument("--downsample", type=int, choices=(1, 2, 4, 8), help="projector downsampling rate k")
    p.add_argument("--llm-mode", choices=("lora", "full", "frozen"))
    p.add_argument("--n-utts", type=int, help="override corpus.n_utts")


def build_parser():
    parser = argparse.ArgumentParser(prog="speechllm", description="Toy speech LLM: data, multi-stage training, CER evaluation.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write synthetic train/dev/test manifests")
    _common(p, "data")
    p.add_argument("--n-utts", type=int, help="override corpus.n_utts")

    p = sub.add_parser("train", help="run the stage plan and evaluate after each stage")
    _common(p, "runs/default")
    _model_flags(p)

    p = sub.add_parser("evaluate", help="score a checkpoint on a manifest")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--max-len", type=int, default=40)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("-v", "--verbose", action="store_true")

    p = sub.add_parser("sweep", help="ablation tables: projector, rate, ctc or stages")
    p.add_argument("kind", choices=("projector", "rate", "ctc", "stages"))
    _common(p, "runs/sweep")
    _model_flags(p)
    return parser


def resolve_config(args):
    """Config file plus command-line overrides, validated before any compute."""
    from speechllm.config import load_config
    from speechllm.projector import ProjectorConfig

    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "n_utts", None) is not None:
        if args.n_utts < 1:
            raise ConfigError(f"n_utts must be >= 1, got {args.n_utts}")
        cfg.corpus.n_utts = args.n_utts
    if getattr(args, "stages", None):
        cfg.plan.stages = args.stages
    if getattr(args, "llm_mode", None):
        cfg.plan.llm_mode = args.llm_mode
    proj = cfg.model.projector
    if getattr(args, "projector", None) or getattr(args, "downsample", None):
        cfg.model.projector = ProjectorConfig(
            kind=args.projector or proj.kind,
            downsample_k=args.downsample or proj.downsample_k,
            num_queries=proj.num_queries,
            hidden=proj.hidden,
            n_layers=proj.n_layers,
            n_heads=proj.n_heads,
            positional=proj.positional,
        )
    from speechllm.stages import build_stage_plan

    build_stage_plan(cfg.plan, cfg.optimizer, cfg.seed)
    return cfg


def cmd_generate(args):
    from speechllm.pipeline import generate

    cfg = resolve_config(args)
    out = args.out or Path("data")
    paths = generate(cfg, out)
    for name, path in paths.items():
        print(f"{name}: {path}")
    return 0


def cmd_train(args):
    from speechllm.pipeline import train

    cfg = resolve_config(args)
    out = args.out or Path(cfg.out)
    t0 = time.perf_counter()
    summary, reports = train(cfg, out)
    print((out / "report.txt").read_text(), end="")
    print(f"run directory: {out} ({time.perf_counter() - t0:.1f}s)")
    return 0


def cmd_evaluate(args):
    from speechllm.data import read_manifest
    from speechllm.metrics import evaluate
    from speechllm.model import SpeechLLM

    if not (args.checkpoint / "meta.json").exists():
        raise FileNotFoundError(f"no checkpoint at {args.checkpoint}")
    if not args.manifest.exists():
        raise FileNotFoundError(f"no manifest at {args.manifest}")
    model, meta = SpeechLLM.load(args.checkpoint)
    report = evaluate(model, read_manifest(args.manifest), max_len=args.max_len, batch_size=args.batch_size)
    args.out.mkdir(parents=True, exist_ok=True)
    with open(args.out / "report.json", "w") as fh:
        json.dump({"checkpoint": str(args.checkpoint), "manifest": str(args.manifest), **report.to_dict()}, fh, indent=1)
    table = report.format_table()
    (args.out / "report.txt").write_text(table + "\n")
    print(table)
    if report.n_truncated:
        print(f"{report.n_truncated} generation(s) hit max_len={args.max_len}")
    return 0


def cmd_sweep(args):
    from speechllm.pipeline import sweep

    cfg = resolve_config(args)
    out = args.out or Path("runs") / f"sweep_{args.kind}"
    print(sweep(args.kind, cfg, out))
    return 0


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "evaluate": cmd_evaluate, "sweep": cmd_sweep}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"speechllm: configuration error: {exc}", file=sys.stderr)
        return 2
    except (SpeechLLMError, FileNotFoundError, OSError) as exc:
        print(f"speechllm: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
