import argparse
import logging
import os
import sys
from typing import Any, Dict, List, Optional

from dotenv import load_dotenv

from meetbeam.configs.config import PipelineConfig, load_config
from meetbeam.errors import MeetbeamError
from meetbeam.tools import pipeline

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s - %(levelname)s - %(message)s"


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=str, default=None, help="JSON config merged over the defaults")
    parser.add_argument("--workers", type=int, default=None, help="Worker processes (env MEETBEAM_WORKERS)")
    parser.add_argument(
        "--log-level",
        type=str,
        default=os.getenv("MEETBEAM_LOG_LEVEL", "INFO"),
        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
    )
    parser.add_argument("--out", type=str, required=True, help="Output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="meetbeam",
        description="Multichannel meeting front-end: mixtures, beamforming, dereverberation, scoring",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("segments", help="Non-overlapping single-speaker segments from annotations")
    p.add_argument("--annotations", type=str, required=True, help="JSON-lines segment annotations")
    p.add_argument("--meetings", type=str, default=None, help="Comma-separated recording IDs to keep")
    _add_common(p)

    p = sub.add_parser("align", help="Matched-filter references cut into fixed-length clips")
    p.add_argument("--segments", type=str, required=True)
    p.add_argument("--filter-len", type=int, default=None)
    p.add_argument("--reg", type=float, default=None)
    p.add_argument("--clip-len", type=float, default=None)
    _add_common(p)

    p = sub.add_parser("mix", help="Synthesize array mixtures from the clip pool")
    p.add_argument("--clips", type=str, required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--channels", type=int, choices=[2, 8], default=None)
    p.add_argument("--clip-len", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    _add_common(p)

    p = sub.add_parser("beamform", help="DAS or mask-driven MVDR beamforming")
    p.add_argument("--input", type=str, nargs="+", required=True)
    p.add_argument("--method", type=str, choices=["das", "mvdr"], default=None)
    p.add_argument("--mask-dir", type=str, default=None, help="Directory of <name>.mask.npy files")
    p.add_argument("--order", type=str, choices=["wpe-first", "beamform-first", "none"], default=None)
    _add_common(p)

    p = sub.add_parser("wpe", help="WPE dereverberation of every channel")
    p.add_argument("--input", type=str, nargs="+", required=True)
    p.add_argument("--taps", type=int, default=None)
    p.add_argument("--delay", type=int, default=None)
    p.add_argument("--iters", type=int, default=None)
    _add_common(p)

    p = sub.add_parser("eval", help="SI-SDR/SI-SDRi of waveforms or WER/SER of transcripts")
    p.add_argument("--est", type=str, default=None, help="Directory of enhanced WAVs")
    p.add_argument("--ref", type=str, default=None, help="Directory of reference WAVs")
    p.add_argument("--baseline", type=str, default=None, help="Directory of unprocessed mixtures")
    p.add_argument("--recipes", type=str, default=None, help="recipes.jsonl for per-speaker-count means")
    p.add_argument("--hyp", type=str, default=None, help="Hypothesis transcripts, one utterance per line")
    p.add_argument("--ref-text", type=str, default=None, help="Reference transcripts, one utterance per line")
    _add_common(p)
    return parser


def _overrides(args: argparse.Namespace) -> Dict[str, Any]:
    """CLI flags that were given, shaped like PipelineConfig."""
    table = {
        "workers": ("workers",),
        "filter_len": ("align", "filter_len"),
        "reg": ("align", "reg"),
        "clip_len": ("mix", "clip_len"),
        "channels": ("channels",),
        "seed": ("seed",),
        "method": ("beamform", "method"),
        "order": ("order",),
        "taps": ("wpe", "taps"),
        "delay": ("wpe", "delay"),
        "iters": ("wpe", "iterations"),
    }
    out: Dict[str, Any] = {}
    for attr, path in table.items():
        value = getattr(args, attr, None)
        if value is None:
            continue
        node = out
        for key in path[:-1]:
            node = node.setdefault(key, {})
        node[path[-1]] = value
    return out


def _arguments(args: argparse.Namespace) -> Dict[str, Any]:
    skip = {"workers", "log_level", "config"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


def _dispatch(args: argparse.Namespace, cfg: PipelineConfig) -> List[str]:
    out = args.out
    os.makedirs(out, exist_ok=True)
    if args.command == "segments":
        meetings = [m.strip() for m in args.meetings.split(",") if m.strip()] if args.meetings else None
        return pipeline.run_segments(args.annotations, meetings, out)
    if args.command == "align":
        return pipeline.run_align(args.segments, cfg, out)
    if args.command == "mix":
        return pipeline.run_mix(args.clips, args.count, cfg, out)
    if args.command in ("beamform", "wpe"):
        tasks = pipeline.build_enhance_tasks(
            args.input,
            out,
            cfg,
            method=cfg.beamform.method,
            order=cfg.order,
            mask_dir=getattr(args, "mask_dir", None),
            dereverb_only=args.command == "wpe",
        )
        return pipeline.run_enhance(tasks, cfg.workers, args.command)
    if args.command == "eval":
        if args.hyp or args.ref_text:
            if not (args.hyp and args.ref_text):
                raise MeetbeamError("--hyp and --ref-text go together")
            report = pipeline.run_eval_text(args.hyp, args.ref_text)
        else:
            if not (args.est and args.ref):
                raise MeetbeamError("eval needs --est and --ref, or --hyp and --ref-text")
            report = pipeline.run_eval_audio(
                args.est, args.ref, args.baseline, args.recipes, cfg.workers, cfg.beamform.ref_channel
            )
        return [pipeline.write_report(report, out)]
    raise MeetbeamError("unknown subcommand %s" % args.command)


def run_subcommand(argv: Optional[List[str]] = None) -> int:
    """Parse argv, run one subcommand and return the process exit code."""
    load_dotenv()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 2

    logging.basicConfig(level=getattr(logging, args.log_level), format=LOG_FORMAT, stream=sys.stdout)
    try:
        cfg = load_config(args.config, _overrides(args))
        outputs = _dispatch(args, cfg)
        pipeline.write_run_manifest(args.out, args.command, cfg, _arguments(args), outputs)
    except (MeetbeamError, OSError) as e:
        logger.error("%s failed: %s", args.command, e)
        return 1
    logger.info("%s finished: %d outputs in %s", args.command, len(outputs), args.out)
    return 0


def main() -> None:
    sys.exit(run_subcommand())


if __name__ == "__main__":
    main()
