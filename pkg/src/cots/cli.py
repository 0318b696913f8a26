"""``cots`` command line: generate | train | eval | ablate | bench.

Exit codes: 0 success, 2 configuration error (including infeasible generation
requests), 3 file error, 4 evaluation error, 1 anything else the library
rejects.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import ExperimentConfig, load_config
from .data import corpus_summary, derive_seed, load_corpus, make_videos, save_corpus
from .encoders import load_checkpoint
from .errors import ConfigError, CotsError, EvaluationError, GenerationError, ParseError
from .experiments import make_corpora, run_ablation
from .retrieval import benchmark_efficiency, evaluate_model, evaluate_video
from .trainer import run_training

EXIT_OK = 0
EXIT_OTHER = 1
EXIT_CONFIG = 2
EXIT_FILE = 3
EXIT_EVAL = 4

log = logging.getLogger("cots")


def _parse_weights(text: str) -> tuple[float, float, float]:
    try:
        parts = [float(p) for p in text.split(",")]
    except ValueError:
        raise ConfigError(f"--loss-weights expects three numbers a,b,c; got {text!r}") from None
    if len(parts) != 3 or any(p < 0 for p in parts):
        raise ConfigError(f"--loss-weights expects three non-negative numbers a,b,c; got {text!r}")
    return parts[0], parts[1], parts[2]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON experiment config (all keys optional)")
    common.add_argument("--seed", type=int, help="root seed; overrides the config")
    common.add_argument("--out", metavar="DIR", help="output directory; overrides the config")
    common.add_argument("--no-amf", action="store_true", help="disable the adaptive momentum filter")
    common.add_argument(
        "--loss-weights", metavar="a,b,c", help="weights of the instance, token (CMVM and CMLM) and task losses"
    )
    common.add_argument("--noise-rate", type=float, help="fraction of training pairs to mismatch")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="cots", description="Two-stream contrastive retrieval at desk scale.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="write train.jsonl and heldout.jsonl")
    sub.add_parser("train", parents=[common], help="train on the generated corpus")
    p_eval = sub.add_parser("eval", parents=[common], help="retrieval metrics for a checkpoint")
    p_eval.add_argument("--video", action="store_true", help="also report text-to-video retrieval")
    sub.add_parser("ablate", parents=[common], help="six-row ablation on the noisy corpus")
    p_bench = sub.add_parser("bench", parents=[common], help="two-stream vs pairwise-fusion timing")
    p_bench.add_argument("--sizes", help="comma-separated index sizes (default from config)")
    return parser


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out_dir = args.out
    if args.no_amf:
        cfg.train.amf_enabled = False
    if args.loss_weights is not None:
        inst, token, task = _parse_weights(args.loss_weights)
        cfg.train.w_inst, cfg.train.w_cmvm, cfg.train.w_cmlm, cfg.train.w_task = inst, token, token, task
    if args.noise_rate is not None:
        cfg.corpus.noise_rate = args.noise_rate
    if getattr(args, "sizes", None):
        try:
            cfg.eval.bench_sizes = [int(s) for s in args.sizes.split(",")]
        except ValueError:
            raise ConfigError(f"--sizes expects comma-separated integers; got {args.sizes!r}") from None
    return cfg.resolve()


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text if text.endswith("\n") else text + "\n", encoding="utf-8")


# ---------------------------------------------------------------- commands


def cmd_generate(cfg: ExperimentConfig) -> dict:
    train, heldout = make_corpora(cfg)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_corpus(train, out / "train.jsonl")
    save_corpus(heldout, out / "heldout.jsonl")
    cfg.echo()
    summary = {"train": corpus_summary(train), "heldout": corpus_summary(heldout)}
    print(f"train:   {summary['train']['n_pairs']} pairs, {summary['train']['n_noise']} mismatched, "
          f"concepts {summary['train']['concept_counts']}")
    print(f"heldout: {summary['heldout']['n_pairs']} pairs, concepts {summary['heldout']['concept_counts']}")
    print(f"wrote {out / 'train.jsonl'} and {out / 'heldout.jsonl'}")
    return summary


def _check_vocab(corpus, vocab_image: int, vocab_text: int, where: str) -> None:
    if not corpus:
        raise ConfigError(f"{where}: corpus is empty")
    top_i = max(max(s.image_tokens) for s in corpus)
    top_t = max(max(s.text_tokens) for s in corpus)
    if top_i >= vocab_image or top_t >= vocab_text:
        raise ConfigError(
            f"{where}: corpus token ids (image max {top_i}, text max {top_t}) exceed the model vocabularies "
            f"({vocab_image}, {vocab_text})"
        )


def cmd_train(cfg: ExperimentConfig) -> dict:
    path = cfg.path("train")
    if not path.exists():
        raise FileNotFoundError(f"training corpus not found: {path} (run `cots generate` first)")
    corpus = load_corpus(path)
    _check_vocab(corpus, cfg.model.vocab_image, cfg.model.vocab_text, str(path))
    res = run_training(cfg.train, corpus, cfg.model, cfg.out_dir)
    cfg.echo()
    last = res.records[-1]
    print(f"trained {res.trainer.step} steps; final total loss {last['total']:.4f}, "
          f"kept fraction {last['kept_fraction']:.3f}, skipped steps {res.skipped_steps}")
    print(f"wrote {Path(cfg.out_dir) / 'metrics.jsonl'} and {Path(cfg.out_dir) / 'checkpoint.npz'}")
    return {"steps": res.trainer.step, "final": last}


def cmd_eval(cfg: ExperimentConfig, video: bool = False) -> dict:
    ckpt, held_path = cfg.path("checkpoint"), cfg.path("heldout")
    for p in (ckpt, held_path):
        if not p.exists():
            raise FileNotFoundError(f"not found: {p}")
    model, _, meta = load_checkpoint(ckpt)
    heldout = load_corpus(held_path)
    enc = meta["encoder"]
    if (enc["vocab_image"], enc["vocab_text"]) != (cfg.corpus.vocab_image, cfg.corpus.vocab_text):
        raise ConfigError(
            f"checkpoint vocabularies ({enc['vocab_image']}, {enc['vocab_text']}) differ from the configured "
            f"corpus ({cfg.corpus.vocab_image}, {cfg.corpus.vocab_text})"
        )
    _check_vocab(heldout, enc["vocab_image"], enc["vocab_text"], f"{held_path} vs {ckpt}")
    reports = evaluate_model(model, heldout, cfg.eval.ks)
    if video:
        videos = make_videos(
            heldout, cfg.eval.frames_per_video, derive_seed(cfg.seed, "videos"), cfg.eval.videos_per_concept
        )
        reports["T2V"] = evaluate_video(model, videos, cfg.eval.ks, cfg.eval.renormalize_video)
    out = Path(cfg.out_dir)
    for name, rep in reports.items():
        _write(out / f"report_{name}.json", rep.to_json())
    cfg.echo(name="eval_config.json")
    for name, rep in reports.items():
        ks = "  ".join(f"R@{k} {100 * v:5.1f}" for k, v in rep.r_at.items())
        print(f"{name}: {ks}  MR {rep.median_rank:g}  (n={rep.n_queries})")
    return reports


def cmd_ablate(cfg: ExperimentConfig) -> dict:
    out = Path(cfg.out_dir)
    result = run_ablation(cfg, out_dir=out / "cells")
    _write(out / "ablation.txt", result.format())
    _write(out / "ablation.csv", result.to_csv())
    _write(out / "ablation.json", result.to_json())
    cfg.echo()
    print(result.format())
    return {"rows": result.rows()}


def cmd_bench(cfg: ExperimentConfig) -> dict:
    table = benchmark_efficiency(
        cfg.eval.bench_sizes,
        d_out=cfg.model.d_out,
        fusion_hidden=cfg.eval.fusion_hidden,
        repeats=cfg.eval.bench_repeats,
        seed=cfg.seed,
    )
    out = Path(cfg.out_dir)
    _write(out / "bench.csv", table.to_csv())
    _write(out / "bench.txt", table.format())
    cfg.echo()
    print(table.format())
    return {"query_slope": table.query_slope, "fusion_slope": table.fusion_slope}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        if args.command == "generate":
            cmd_generate(cfg)
        elif args.command == "train":
            cmd_train(cfg)
        elif args.command == "eval":
            cmd_eval(cfg, video=args.video)
        elif args.command == "ablate":
            cmd_ablate(cfg)
        elif args.command == "bench":
            cmd_bench(cfg)
    except (ConfigError, GenerationError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, ParseError) as e:
        print(f"file error: {e}", file=sys.stderr)
        return EXIT_FILE
    except EvaluationError as e:
        print(f"evaluation error: {e}", file=sys.stderr)
        return EXIT_EVAL
    except CotsError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_OTHER
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
