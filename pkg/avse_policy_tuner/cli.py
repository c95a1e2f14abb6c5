import argparse
import json
import sys
from pathlib import Path
from typing import Dict, List, Optional

from . import __version__
from .experiment import ExperimentConfig
from .logging.tuner_error import TunerError
from .rewards import PROMPTS, REWARD_KINDS
from .workflows import (
    METHODS,
    cmd_evaluate,
    cmd_explain,
    cmd_finetune,
    cmd_gen_scenes,
    cmd_pretrain,
    cmd_score,
    print_config,
)

DESCRIPTION = (
    "Fine-tune an audio-visual speech enhancer with PPO against an interpretable, "
    "description-based reward, on reproducible synthetic scenes. "
    "Typical run: gen-scenes, pretrain, finetune (once per reward model), evaluate."
)


class CLIParser(argparse.ArgumentParser):
    """
    A custom subclass of argparse.ArgumentParser, which reports errors in CLI parsing as a
    single machine-readable line on stderr, using the same format as every other failure.
    """

    def error(self, message):
        exit_with_error("invalid-argument", message, code=2)


def exit_with_error(kind: str, message: str, code: int) -> None:
    """
    Write `{"error": kind, "exit_code": code, "message": message}` on one line of stderr
    and exit with `code`.
    """
    sys.stderr.write(
        json.dumps({"error": kind, "exit_code": code, "message": " ".join(str(message).split())})
        + "\n"
    )
    sys.exit(code)


def _add_common_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "-c",
        "--config",
        default=None,
        help="Experiment configuration (.json). Absent keys take their defaults; "
        "see --print-config for the full document.",
        type=Path,
    )
    parser.add_argument(
        "-s",
        "--seed",
        default=None,
        help="Override the master seed of the configuration.",
        type=int,
    )
    parser.add_argument(
        "-o",
        "--out",
        default=None,
        help="Override the output directory of the configuration.",
        type=Path,
    )
    parser.add_argument(
        "--print-config",
        action="store_true",
        help="Print the fully-defaulted configuration (after overrides) and exit.",
    )


def _parse_checkpoint_overrides(values: Optional[List[str]]) -> Dict[str, Path]:
    overrides = {}
    for value in values or []:
        method, sep, path = value.partition("=")
        if not sep or method not in METHODS[1:]:
            raise argparse.ArgumentTypeError(
                f"Expected METHOD=PATH with METHOD one of {METHODS[1:]}, got '{value}'."
            )
        overrides[method] = Path(path)
    return overrides


def build_parser() -> CLIParser:
    parser = CLIParser(prog="avse-tuner", description=DESCRIPTION)
    parser.add_argument(
        "-v",
        "--version",
        action="version",
        version=f"%(prog)s, {__version__}",
        help="Display the current version number of this package.",
    )
    commands = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=CLIParser)
    commands.required = True

    gen = commands.add_parser("gen-scenes", help="Synthesise the scene set and its manifest.")
    _add_common_arguments(gen)

    pre = commands.add_parser("pretrain", help="Supervised SI-SNR pretraining of the base model.")
    _add_common_arguments(pre)

    fine = commands.add_parser("finetune", help="PPO fine-tuning from the pretrained model.")
    _add_common_arguments(fine)
    fine.add_argument(
        "--reward",
        choices=REWARD_KINDS,
        default=None,
        help="Override the reward model of the configuration.",
    )
    fine.add_argument(
        "--prompt",
        choices=sorted(PROMPTS),
        default=None,
        help="Override the description prompt of the interpretable reward model.",
    )
    fine.add_argument(
        "--checkpoint",
        default=None,
        help="Start from this checkpoint instead of the pretrained one in the output directory.",
        type=Path,
    )

    evaluate = commands.add_parser(
        "evaluate", help="Score every method on the held-out scenes and write the table."
    )
    _add_common_arguments(evaluate)
    evaluate.add_argument(
        "--checkpoint",
        action="append",
        default=None,
        metavar="METHOD=PATH",
        help="Use PATH as the checkpoint for METHOD (baseline, rl_scalar or rl_interpretable). "
        "May be repeated.",
    )

    score = commands.add_parser(
        "score", help="Print the objective scores of one estimate WAV against a reference WAV."
    )
    _add_common_arguments(score)
    score.add_argument("--ref", required=True, help="Reference (clean) WAV file.", type=Path)
    score.add_argument("--est", required=True, help="Estimate WAV file.", type=Path)
    score.add_argument(
        "--noisy",
        default=None,
        help="The noisy mixture; adds the acoustic features and both reward scores.",
        type=Path,
    )
    score.add_argument(
        "--json",
        action="store_true",
        help="Print the scores as one JSON object on a single line, rather than indented.",
    )

    explain = commands.add_parser(
        "explain", help="Describe what the enhancer did to one scene, before and after."
    )
    _add_common_arguments(explain)
    explain.add_argument("scene_id", help="Scene identifier from the manifest, e.g. scene-0004.")
    explain.add_argument(
        "--checkpoint",
        default=None,
        help="Model to explain (defaults to the interpretable RL checkpoint, "
        "or the pretrained one if fine-tuning has not run).",
        type=Path,
    )
    return parser


def load_config(args: argparse.Namespace) -> ExperimentConfig:
    cfg = ExperimentConfig.from_json(file=args.config).with_overrides(
        master_seed=args.seed, out_dir=args.out
    )
    overrides = {
        key: getattr(args, key)
        for key in ("reward", "prompt")
        if getattr(args, key, None) is not None
    }
    if overrides:
        cfg = ExperimentConfig.from_dict({**cfg.to_dict(), **overrides})
    return cfg


def run(argv: Optional[List[str]] = None) -> str:
    """
    Parse `argv`, run the requested command and return its text output.

    :raises TunerError: When the command fails.
    """
    parser = build_parser()
    args = parser.parse_args(argv)
    cfg = load_config(args)

    if args.print_config:
        return print_config(cfg)

    match args.command:
        case "gen-scenes":
            return cmd_gen_scenes(cfg).parse()
        case "pretrain":
            return cmd_pretrain(cfg).parse()
        case "finetune":
            return cmd_finetune(cfg, checkpoint=args.checkpoint).parse()
        case "evaluate":
            try:
                overrides = _parse_checkpoint_overrides(args.checkpoint)
            except argparse.ArgumentTypeError as e:
                parser.error(str(e))
            return cmd_evaluate(cfg, checkpoints=overrides).parse()
        case "score":
            result = cmd_score(args.ref, args.est, args.noisy)
            if args.json:
                return json.dumps(result, sort_keys=True) + "\n"
            return json.dumps(result, indent=2, sort_keys=True) + "\n"
        case "explain":
            return cmd_explain(cfg, args.scene_id, checkpoint=args.checkpoint).render()
        case _:
            parser.error(f"Unknown command '{args.command}'.")


def cli(argv: Optional[List[str]] = None):
    """CLI handle for the avse-tuner package."""
    try:
        string_output = run(argv)
    except TunerError as e:
        exit_with_error(e.kind, str(e), e.exit_code)
    except OSError as e:
        exit_with_error("io", str(e), 3)
    except Exception as e:
        exit_with_error("internal", f"{type(e).__name__}: {e}", 1)

    sys.stdout.write(string_output)
    sys.exit(0)
