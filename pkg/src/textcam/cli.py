"""Command line entry point: ``textcam <command> [--key value ...]``.

Every config key is also a flag (``--caa.lambda 0.7``); flags override the
``--config`` file. Exit codes: 0 success, 1 some images failed, 2 bad
configuration or inputs.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import experiments
from .config import DEFAULTS, HELP, PipelineConfig, load_manifest
from .errors import InvalidArgument
from .evalkit import write_report
from .pipeline import STAGES, run_stage
from .textbank import load_prompts

log = logging.getLogger("textcam")

EXIT_OK, EXIT_PARTIAL, EXIT_CONFIG = 0, 1, 2


def _config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("configuration keys")
    for key in DEFAULTS:
        g.add_argument(f"--{key}", dest=key, default=argparse.SUPPRESS, metavar="V", help=HELP.get(key))
    p.add_argument("--config", help="plain-text 'key = value' file")
    p.add_argument("--manifest", dest="data.manifest", default=argparse.SUPPRESS,
                   help="alias of --data.manifest")
    p.add_argument("--root", dest="data.root", default=argparse.SUPPRESS, help="alias of --data.root")
    p.add_argument("--seed", type=int, help="seed of the mock backbone (ignored for real weights)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="textcam", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    for name, text in [("camgen", "initial CAMs + attention -> <out>/cams"),
                       ("refine", "affinity refinement -> <out>/cams_refined"),
                       ("maskgen", "CRF + confidence -> <out>/masks, <out>/conf"),
                       ("run", "camgen, refine and maskgen in sequence")]:
        p = sub.add_parser(name, help=text)
        _config_flags(p)
        p.add_argument("--jobs", type=int, default=1)
        p.add_argument("--force", action="store_true", help="recompute existing outputs")

    p = sub.add_parser("eval", help="mIoU of a mask directory against ground truth")
    _config_flags(p)
    p.add_argument("--pred-dir", required=True)
    p.add_argument("--gt-dir", required=True)
    p.add_argument("--num-classes", type=int, help="default: vocabulary size + 1")

    p = sub.add_parser("sharpness", help="rank prompt templates by sharpness")
    _config_flags(p)
    p.add_argument("--prompts", help="one template per line (default: shipped list)")
    p.add_argument("--with-miou", action="store_true", help="also score each prompt's seed mIoU (needs ground truth)")

    p = sub.add_parser("sweep-lambda", help="mIoU of refined CAMs per threshold")
    _config_flags(p)
    p.add_argument("--lambdas", default="0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8")

    p = sub.add_parser("visualize", help="mask overlays and CAM heatmaps -> <out>/vis")
    _config_flags(p)
    p.add_argument("--masks", help="mask directory (default <out>/masks)")
    p.add_argument("--cams", help="CAM directory (default <out>/cams_refined)")

    p = sub.add_parser("timing", help="per-stage wall-clock report")
    _config_flags(p)
    return parser


def resolve_config(args) -> PipelineConfig:
    overrides = {k: v for k, v in vars(args).items() if k in DEFAULTS}
    if args.seed is not None:
        weights = overrides.get("backbone.weights")
        if weights is None and args.config:
            weights = PipelineConfig.from_file(args.config)["backbone.weights"]
        weights = weights or DEFAULTS["backbone.weights"]
        if weights.startswith("mock:"):
            overrides["backbone.weights"] = f"mock:{args.seed}"
    if args.config:
        return PipelineConfig.from_file(args.config, overrides)
    return PipelineConfig(overrides)


def echo_config(config: PipelineConfig, command: str) -> Path:
    out = Path(config["out"])
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"config.{command}.txt"
    path.write_text(config.dump())
    return path


def _manifest(config: PipelineConfig, check_images: bool = False):
    if not config["data.manifest"]:
        raise InvalidArgument("no manifest given (--manifest)")
    return load_manifest(config["data.manifest"], config.vocabulary(), config["data.root"] or None, check_images)


def _report_dir(config) -> Path:
    d = Path(config["out"]) / "reports"
    d.mkdir(parents=True, exist_ok=True)
    return d


def cmd_stages(args, config) -> int:
    manifest = _manifest(config)
    stages = STAGES if args.command == "run" else (args.command,)
    code = EXIT_OK
    for stage in stages:
        s = run_stage(stage, manifest, config, config["out"], jobs=args.jobs, force=args.force)
        print(f"{stage}: {len(s.written)} written, {len(s.skipped)} skipped, {len(s.failed)} failed")
        for image_id, msg in s.failed:
            print(f"  failed {image_id}: {msg}", file=sys.stderr)
        if s.failed:
            code = EXIT_PARTIAL
    return code


def cmd_eval(args, config) -> int:
    vocab = config.vocabulary()
    n = args.num_classes or vocab.num_classes + 1
    report, missing = experiments.eval_dirs(args.pred_dir, args.gt_dir, n)
    names = ["background"] + [e.canonical_name for e in vocab.foreground]
    txt, kv = write_report(report, _report_dir(config), class_names=names)
    print(txt.read_text(), end="")
    for m in missing:
        print(f"  no ground truth for {m}", file=sys.stderr)
    return EXIT_PARTIAL if missing else EXIT_OK


def cmd_sharpness(args, config) -> int:
    manifest = _manifest(config, check_images=True)
    prompts = load_prompts(args.prompts)
    ranked = experiments.prompt_sharpness(prompts, manifest, config)
    mious = None
    if args.with_miou:
        mious = {p: experiments.seed_miou(manifest, config.with_overrides({"text.template": p})).miou
                 for p in prompts}
    table = experiments.format_sharpness(ranked, mious)
    (_report_dir(config) / "sharpness.txt").write_text(table)
    print(table, end="")
    if mious and len(prompts) > 2:
        from scipy.stats import spearmanr

        rho = spearmanr([r.sharpness for r in ranked], [mious[r.prompt] for r in ranked]).statistic
        print(f"spearman(sharpness, mIoU) = {rho:.4f}")
    return EXIT_OK


def cmd_sweep(args, config) -> int:
    manifest = _manifest(config, check_images=True)
    lambdas = [float(x) for x in args.lambdas.split(",") if x.strip()]
    reports = experiments.sweep_lambda(manifest, config, lambdas, out=config["out"])
    table = experiments.format_sweep(reports)
    (_report_dir(config) / "sweep_lambda.txt").write_text(table)
    print(table, end="")
    return EXIT_OK


def cmd_visualize(args, config) -> int:
    manifest = _manifest(config, check_images=True)
    written = experiments.visualize(manifest, config, config["out"], args.masks, args.cams)
    print(f"wrote {len(written)} image(s) to {Path(config['out']) / 'vis'}")
    return EXIT_OK


def cmd_timing(args, config) -> int:
    manifest = _manifest(config, check_images=True)
    text = experiments.format_timing(experiments.timing(manifest, config))
    (_report_dir(config) / "timing.txt").write_text(text)
    print(text, end="")
    return EXIT_OK


COMMANDS = {
    "camgen": cmd_stages, "refine": cmd_stages, "maskgen": cmd_stages, "run": cmd_stages,
    "eval": cmd_eval, "sharpness": cmd_sharpness, "sweep-lambda": cmd_sweep,
    "visualize": cmd_visualize, "timing": cmd_timing,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = resolve_config(args)
        echo_config(config, args.command)
        return COMMANDS[args.command](args, config)
    except (InvalidArgument, FileNotFoundError) as exc:
        print(f"textcam: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
