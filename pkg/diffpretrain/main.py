"""
Command-line entry point.

Commands (each writes resolved_config.ini next to its outputs):
- synth:       train/test corpora (distribution A) and a shifted corpus (distribution B)
- train-bpr:   body-part regressor on the training corpus
- train-ddpm:  diffusion pretraining, optionally conditioned on the regressor's coordinate map
- resume:      continue a pretraining checkpoint up to the configured step count
- extract:     frozen-backbone features for a corpus into the feature cache
- probe:       train the non-linear probe on frozen features
- eval:        Dice report of a probe on the test (and shifted) corpus
- ablate:      single-timestep probes over pretrain-relative timesteps
- compare:     pretrained backbones (plain and conditioned) vs. a random one, on distributions A and B
- pipeline:    synth -> (train-bpr) -> train-ddpm -> probe -> eval

Exit codes: 0 success, 1 unexpected library error, 2 configuration error, 3 missing or corrupt
artifact, 4 numeric failure (non-finite loss).
"""

import argparse
import json
import logging
import sys
from typing import List, Optional

import torch

from diffpretrain.config import load_experiment_config, settings
from diffpretrain.errors import DiffPretrainError, MissingArtifactError
from diffpretrain.pipeline.experiments import ExperimentRunner

logger = logging.getLogger("diffpretrain")

CSV_SCHEMAS = """output CSV schemas:
  ddpm/loss.csv          step,loss,wall_ms
  reports/dice.csv       class,dice,group
  reports/ablation.csv   t,Small,Medium,Big,Avg
  reports/compare.csv    backbone,split,Small,Medium,Big,Avg

environment:
  DIFFPRETRAIN_OUTPUT_ROOT   output directory when [global] output_dir is not set
  DIFFPRETRAIN_LOG_LEVEL     default log level
  DIFFPRETRAIN_NUM_THREADS   torch intra-op threads
"""


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="experiment config (INI with JSON values), e.g. configs/desk.ini")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config key; repeatable")
    parser.add_argument("--out", help="output directory (overrides [global] output_dir)")
    parser.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING or ERROR")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="diffpretrain",
        description="Diffusion pretraining of 3D denoisers and non-linear probing of their frozen features.",
        epilog=CSV_SCHEMAS,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    commands = parser.add_subparsers(dest="command", required=True)

    def command(name: str, help_text: str) -> argparse.ArgumentParser:
        sub = commands.add_parser(name, help=help_text, epilog=CSV_SCHEMAS,
                                  formatter_class=argparse.RawDescriptionHelpFormatter)
        _add_common(sub)
        return sub

    command("synth", "generate synthetic phantom corpora")

    sub = command("train-bpr", "train the body-part regressor")
    sub.add_argument("--corpus", help="training corpus directory or manifest")

    sub = command("train-ddpm", "train the diffusion denoiser")
    sub.add_argument("--corpus", help="training corpus directory or manifest")
    sub.add_argument("--bpr", help="body-part regressor checkpoint (required when pretrain.conditioning=true)")

    sub = command("resume", "resume diffusion training from a checkpoint")
    sub.add_argument("--checkpoint", required=True, help="denoiser checkpoint directory")
    sub.add_argument("--corpus", help="training corpus directory or manifest")
    sub.add_argument("--bpr", help="body-part regressor checkpoint for conditioned runs")

    for name, help_text in (("extract", "extract frozen features for a corpus"),
                            ("probe", "train the probe on frozen features")):
        sub = command(name, help_text)
        sub.add_argument("--checkpoint", help="denoiser checkpoint (default: <out>/ddpm/final)")
        sub.add_argument("--corpus", help="corpus directory or manifest (default: <out>/corpus/train)")
        sub.add_argument("--bpr", help="body-part regressor checkpoint (required for conditioned backbones)")

    sub = command("eval", "evaluate a trained probe")
    sub.add_argument("--checkpoint", help="denoiser checkpoint (default: <out>/ddpm/final)")
    sub.add_argument("--probe", help="probe checkpoint (default: <out>/probe)")
    sub.add_argument("--corpus", help="test corpus (default: <out>/corpus/test)")
    sub.add_argument("--shift", help="shifted test corpus (default: <out>/corpus/shift when present)")
    sub.add_argument("--bpr", help="body-part regressor checkpoint (required for conditioned backbones)")

    sub = command("ablate", "timestep ablation")
    sub.add_argument("--checkpoint", help="denoiser checkpoint (default: <out>/ddpm/final)")
    sub.add_argument("--train", help="probe training corpus (default: <out>/corpus/train)")
    sub.add_argument("--test", help="test corpus (default: <out>/corpus/test)")
    sub.add_argument("--bpr", help="body-part regressor checkpoint (required for conditioned backbones)")

    sub = command("compare", "pretrained backbones vs. a random one, as one markdown table")
    sub.add_argument("--checkpoint", action="append",
                     help="denoiser checkpoint; repeat to compare several (default: <out>/ddpm/final)")
    sub.add_argument("--train", help="probe training corpus (default: <out>/corpus/train)")
    sub.add_argument("--test", help="test corpus (default: <out>/corpus/test)")
    sub.add_argument("--shift", help="shifted corpus (default: <out>/corpus/shift when present)")
    sub.add_argument("--bpr", help="body-part regressor checkpoint (required for conditioned backbones)")

    command("pipeline", "run the full chain with the default layout")
    return parser


def configure_logging(level: Optional[str]) -> None:
    logging.basicConfig(
        level=(level or settings.LOG_LEVEL).upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        force=True,
    )


def configure_torch() -> None:
    if settings.NUM_THREADS:
        torch.set_num_threads(settings.NUM_THREADS)
    if settings.DETERMINISTIC:
        torch.use_deterministic_algorithms(True)


def _dispatch(runner: ExperimentRunner, args: argparse.Namespace) -> None:
    command = args.command
    if command == "synth":
        runner.synth()
    elif command == "train-bpr":
        runner.train_bpr(corpus=args.corpus)
    elif command == "train-ddpm":
        runner.train_ddpm(corpus=args.corpus, bpr=args.bpr)
    elif command == "resume":
        runner.resume(args.checkpoint, corpus=args.corpus, bpr=args.bpr)
    elif command == "extract":
        runner.extract(checkpoint=args.checkpoint, corpus=args.corpus, bpr=args.bpr)
    elif command == "probe":
        runner.probe(checkpoint=args.checkpoint, corpus=args.corpus, bpr=args.bpr)
    elif command == "eval":
        corpora = None
        if args.corpus or args.shift:
            corpora = {"test": args.corpus or runner.corpus_dir("test")}
            if args.shift:
                corpora["shift"] = args.shift
        runner.evaluate(checkpoint=args.checkpoint, probe=args.probe, corpora=corpora, bpr=args.bpr)
    elif command == "ablate":
        runner.ablate(checkpoint=args.checkpoint, train=args.train, test=args.test, bpr=args.bpr)
    elif command == "compare":
        runner.compare(checkpoints=args.checkpoint, train=args.train, test=args.test, shift=args.shift,
                       bpr=args.bpr)
    elif command == "pipeline":
        runner.pipeline()


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    try:
        configure_torch()
        overrides = list(args.overrides)
        if args.out:
            overrides.append(f"global.output_dir={json.dumps(args.out)}")
        config = load_experiment_config(args.config, overrides)
        runner = ExperimentRunner(config)
        runner.snapshot()
        _dispatch(runner, args)
    except DiffPretrainError as exc:
        logger.error("%s: %s", type(exc).__name__, exc)
        return exc.exit_code
    except OSError as exc:
        logger.error("%s", exc)
        return MissingArtifactError.exit_code
    logger.info("%s finished; outputs under %s", args.command, runner.out_dir)
    return 0


if __name__ == "__main__":
    sys.exit(main())
