"""demem - de-memorize a conditional flow model by pruning on neutral conditions.

Command-line entry point.
"""

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import torch

from demem import __version__
from demem.analysis.evaluation import BASE, evaluate_models
from demem.analysis.figures import emit_figures
from demem.config import RunConfig, load_config
from demem.data import memoria
from demem.errors import NumericalError
from demem.models import storage
from demem.models.flownet import euler_sample, standard_normal_noise, train_base
from demem.models.maskengine import deactivation_ratios
from demem.pipeline import hard_gates, run_pipeline, write_deactivation, write_prune_log
from demem.pruning.pruner import BETA_PRESETS, prune, retrain

logger = logging.getLogger(__name__)

LOG_LEVEL_ENV = "DEMEM_LOG_LEVEL"
EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4


def _configure_logging() -> None:
    name = os.environ.get(LOG_LEVEL_ENV, "INFO").upper()
    level = logging.getLevelName(name)
    unknown = not isinstance(level, int)
    logging.basicConfig(
        level=logging.INFO if unknown else level,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    if unknown:
        logger.warning(f"Ignoring unknown {LOG_LEVEL_ENV}={name!r}")


def _show_progress() -> bool:
    return sys.stderr.isatty() and logging.getLogger().getEffectiveLevel() <= logging.INFO


def _registry_or_none(corpus_dir: Path | None) -> memoria.ExemplarRegistry | None:
    if corpus_dir is None:
        return None
    return memoria.load_corpus(corpus_dir)[1]


def cmd_corpus(args, cfg: RunConfig) -> None:
    corpus_cfg = cfg.corpus
    overrides = {"seed": args.seed, "k": args.k, "duplication": args.dup}
    overrides = {key: value for key, value in overrides.items() if value is not None}
    if overrides:
        corpus_cfg = replace(corpus_cfg, **overrides)
    dataset, registry = memoria.synth_corpus(corpus_cfg)
    memoria.save_corpus(args.out, dataset, registry, cfg=corpus_cfg)
    logger.info(f"Wrote corpus to {args.out}")


def cmd_train_base(args, cfg: RunConfig) -> None:
    dataset, _ = memoria.load_corpus(args.corpus)
    params, log = train_base(dataset, cfg.model, cfg.train, _show_progress())
    storage.save_parameters(args.out, params, meta=memoria.condition_meta(dataset))
    if args.log:
        storage.write_csv(args.log, log.rows(), ["step", "loss"])
    logger.info(f"Wrote base model to {args.out}")


def cmd_prune(args, cfg: RunConfig) -> None:
    if args.beta is not None:
        beta = args.beta
    else:
        beta = cfg.resolve_beta(args.level)
    prune_cfg = replace(cfg.prune, beta=beta)
    base = storage.load_parameters(args.base)
    neutral = memoria.neutral_from_meta(storage.read_checkpoint(args.base).meta)
    snapshots = None
    if prune_cfg.snapshot_every:
        snapshots = storage.SnapshotRotation(Path(args.out).parent / "snapshots")
    maskset, log = prune(
        base,
        neutral,
        prune_cfg,
        registry=_registry_or_none(args.corpus),
        snapshots=snapshots,
        progress=_show_progress(),
    )
    storage.save_maskset(args.out, maskset, meta={"beta": beta, "level": args.level})
    if args.log:
        write_prune_log(args.log, log)
    if args.deactivation:
        write_deactivation(args.deactivation, maskset)
    logger.info(f"Wrote masks (beta={beta}) to {args.out}: {deactivation_ratios(maskset)}")


def cmd_retrain(args, cfg: RunConfig) -> None:
    ckpt = storage.read_checkpoint(args.base)
    base = storage.load_parameters(args.base)
    maskset = storage.load_maskset(args.masks)
    params, log = retrain(
        base,
        maskset,
        memoria.neutral_from_meta(ckpt.meta),
        cfg.retrain,
        registry=_registry_or_none(args.corpus),
        progress=_show_progress(),
    )
    storage.save_parameters(args.out, params, meta=ckpt.meta)
    if args.log:
        write_prune_log(args.log, log)
    logger.info(f"Wrote retrained model to {args.out}")


def cmd_sample(args, cfg: RunConfig) -> None:
    if args.n < 1:
        raise ValueError(f"--n must be >= 1, got {args.n}")
    params = storage.load_parameters(args.ckpt)
    gates = hard_gates(storage.load_maskset(args.masks)) if args.masks else None
    z0 = standard_normal_noise(args.n, params.spec.latent_dim, args.seed)
    with torch.no_grad():
        z_n = euler_sample(params, gates, z0, args.steps, args.condition).z_n
    storage.write_json(
        args.out,
        {
            "condition": args.condition,
            "n": args.n,
            "seed": args.seed,
            "n_steps": args.steps,
            "samples": z_n.tolist(),
        },
    )
    logger.info(f"Wrote {args.n} samples to {args.out}")


def cmd_eval(args, cfg: RunConfig) -> None:
    dataset, registry = memoria.load_corpus(args.corpus)
    base = storage.load_parameters(args.base)
    models = {BASE: (base, None)}
    deactivation = {}
    if args.masks:
        maskset = storage.load_maskset(args.masks)
        models["pruned"] = (base, hard_gates(maskset))
        deactivation["pruned"] = deactivation_ratios(maskset)
        if args.retrained:
            models["retrained"] = (storage.load_parameters(args.retrained), hard_gates(maskset))
    elif args.retrained:
        raise ValueError("--retrained needs the --masks it was retrained with")

    corpus_cfg = memoria.load_corpus_config(args.corpus) or cfg.corpus
    heldout = memoria.heldout_neutral(
        corpus_cfg, cfg.eval.heldout_per_neutral, cfg.eval.heldout_seed
    )
    report, samples = evaluate_models(models, dataset, registry, heldout, cfg.eval)
    report.deactivation = deactivation
    report.digests = {
        label: storage.stored_digest(path) or ""
        for label, path in (("base", args.base), ("masks", args.masks))
        if path
    }
    storage.write_json(args.out, report.to_dict())
    if args.figures:
        emit_figures(args.figures, samples)
    logger.info(f"Wrote report to {args.out}")


def cmd_pipeline(args, cfg: RunConfig) -> None:
    result = run_pipeline(cfg, args.out, _show_progress())
    failed = [name for name, passed in result["checks"].items() if not passed]
    if failed:
        logger.warning(f"{len(failed)} check(s) did not pass: {', '.join(failed)}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="demem",
        description="De-memorize a conditional flow model by pruning on neutral conditions",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, handler, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", type=Path, help="JSON run config (defaults when omitted)")
        p.set_defaults(handler=handler)
        return p

    p = add("corpus", cmd_corpus, "Synthesize a corpus with planted exemplars")
    p.add_argument("--out", type=Path, required=True, help="Output directory")
    p.add_argument("--seed", type=int, help="Override the corpus seed")
    p.add_argument("--k", type=int, help="Override the number of exemplars")
    p.add_argument("--dup", type=int, help="Override the duplication count")

    p = add("train-base", cmd_train_base, "Train the base model with flow matching")
    p.add_argument("--corpus", type=Path, required=True, help="Corpus directory")
    p.add_argument("--out", type=Path, required=True, help="Output checkpoint")
    p.add_argument("--log", type=Path, help="Training loss CSV")

    p = add("prune", cmd_prune, "Learn masks on neutral conditions")
    p.add_argument("--base", type=Path, required=True, help="Base model checkpoint")
    p.add_argument("--level", choices=list(BETA_PRESETS), default="medium")
    p.add_argument("--beta", type=float, help="Explicit sparsity weight (overrides --level)")
    p.add_argument("--corpus", type=Path, help="Corpus directory, for trigger leak checks")
    p.add_argument("--out", type=Path, required=True, help="Output mask checkpoint")
    p.add_argument("--log", type=Path, help="Objective terms CSV")
    p.add_argument("--deactivation", type=Path, help="Deactivation ratios CSV")

    p = add("retrain", cmd_retrain, "Fine-tune a pruned model with its masks held hard")
    p.add_argument("--base", type=Path, required=True, help="Base model checkpoint")
    p.add_argument("--masks", type=Path, required=True, help="Mask checkpoint")
    p.add_argument("--corpus", type=Path, help="Corpus directory, for trigger leak checks")
    p.add_argument("--out", type=Path, required=True, help="Output checkpoint")
    p.add_argument("--log", type=Path, help="Reconstruction term CSV")

    p = add("sample", cmd_sample, "Draw samples for one condition")
    p.add_argument("--ckpt", type=Path, required=True, help="Model checkpoint")
    p.add_argument("--masks", type=Path, help="Mask checkpoint")
    p.add_argument("--condition", type=int, required=True, help="Condition id")
    p.add_argument("--n", type=int, required=True, help="Number of samples")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=4, help="Sampler steps")
    p.add_argument("--out", type=Path, required=True, help="Output JSON")

    p = add("eval", cmd_eval, "Evaluate a base model and optionally its pruned variants")
    p.add_argument("--base", type=Path, required=True, help="Base model checkpoint")
    p.add_argument("--masks", type=Path, help="Mask checkpoint")
    p.add_argument("--retrained", type=Path, help="Retrained checkpoint (needs --masks)")
    p.add_argument("--corpus", type=Path, required=True, help="Corpus directory")
    p.add_argument("--out", type=Path, required=True, help="Report JSON")
    p.add_argument("--figures", type=Path, help="Figure directory")

    p = add("pipeline", cmd_pipeline, "Run every stage for every seed")
    p.add_argument("--out", type=Path, help="Run directory (default: under the user data dir)")
    return parser


def main(argv: list[str] | None = None) -> int:
    """Main application entry point."""
    parser = build_parser()
    args = parser.parse_args(argv)
    _configure_logging()

    try:
        cfg = load_config(args.config)
        args.handler(args, cfg)
    except NumericalError as e:
        logger.error(f"Numerical failure: {e}")
        return EXIT_NUMERIC
    except ValueError as e:
        logger.error(f"Invalid configuration: {e}")
        return EXIT_CONFIG
    except OSError as e:
        logger.error(f"I/O error: {e}")
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
