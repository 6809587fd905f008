"""End-to-end run: corpus, base training, pruning, retraining, evaluation.

Each stage writes its artifact with a config digest covering the stage
config and every upstream digest. A rerun skips stages whose artifact
carries the expected digest. Downstream stages always read their inputs
back from disk, so a resumed run sees exactly what a fresh run sees.

Layout of one seed directory::

    seed_<s>/corpus/                 corpus.ckpt, registry.json
    seed_<s>/base.ckpt               base_loss.csv
    seed_<s>/masks_<level>.ckpt      prune_<level>.csv, deactivation_<level>.csv
    seed_<s>/retrained_<level>.ckpt  retrain_<level>.csv
    seed_<s>/report.json             figures/
"""

import logging
import math
from dataclasses import replace
from pathlib import Path

import numpy as np
import platformdirs
from nanoid import generate

from demem.analysis.evaluation import BASE, Report, evaluate_models
from demem.analysis.figures import emit_figures
from demem.analysis.metrics import reproduction_rate
from demem.config import RunConfig, stable_digest
from demem.data import memoria
from demem.lock import OutputDirLock
from demem.models import storage
from demem.models.flownet import Parameters, build_model, train_base
from demem.models.maskengine import (
    HardMask,
    MaskSet,
    binarize,
    deactivation_ratios,
    deactivation_table,
    relax,
)
from demem.pruning.pruner import LOG_FIELDS, PruneConfig, prune, retrain

logger = logging.getLogger(__name__)

RUN_ID_ALPHABET = "0123456789abcdefghijklmnopqrstuvwxyz"
RUN_ID_SIZE = 10
UNTRAINED = "untrained"
RETRAINED_SUFFIX = "+retrain"
DEACTIVATION_FIELDS = ["kind", "count", "deactivated", "ratio"]
MEMORIZATION_FLOOR = 0.8


def default_run_dir() -> Path:
    """Fresh run directory under the user data dir."""
    run_id = generate(RUN_ID_ALPHABET, RUN_ID_SIZE)
    return Path(platformdirs.user_data_dir("demem")) / "runs" / run_id


def ablation_label(level: str, kinds: tuple[str, ...]) -> str:
    return f"{level}[{'+'.join(kinds)}]"


def retrained_label(level: str) -> str:
    return f"{level}{RETRAINED_SUFFIX}"


def hard_gates(maskset: MaskSet, threshold: float = 0.5) -> HardMask:
    """Binarized gates used for evaluation and retraining."""
    return binarize(relax(maskset), threshold)


def write_prune_log(path: Path, log) -> None:
    storage.write_csv(path, log.rows, LOG_FIELDS)


def write_deactivation(path: Path, maskset: MaskSet) -> None:
    storage.write_csv(path, deactivation_table(maskset), DEACTIVATION_FIELDS)


class SeedRun:
    """Stages of one seed, rooted at ``<out>/seed_<s>``."""

    def __init__(self, cfg: RunConfig, seed: int, directory: Path, progress: bool = False):
        """Initialize a seed run.

        Args:
            cfg: Run config (stage seeds are overridden with ``seed``)
            seed: Run seed
            directory: Seed directory
            progress: Show progress bars on training loops
        """
        self.cfg = cfg.for_seed(seed)
        self.seed = seed
        self.directory = Path(directory)
        self.progress = progress
        self.digests = self._stage_digests()

    def _prune_config(self, level: str, kinds: tuple[str, ...] | None = None) -> PruneConfig:
        cfg = replace(self.cfg.prune, beta=self.cfg.resolve_beta(level))
        if kinds is not None:
            cfg = replace(cfg, kinds=kinds)
        return cfg

    def _stage_digests(self) -> dict[str, str]:
        cfg = self.cfg
        digests = {"corpus": stable_digest({"corpus": cfg.corpus.to_dict()})}
        digests["base"] = stable_digest(
            {"upstream": digests["corpus"], "model": cfg.model.to_dict(), "train": cfg.train.to_dict()}
        )
        for level in cfg.levels:
            digests[level] = stable_digest(
                {"upstream": digests["base"], "prune": self._prune_config(level).to_dict()}
            )
        for kinds in cfg.ablation_kinds:
            label = ablation_label(cfg.ablation_level, kinds)
            digests[label] = stable_digest(
                {
                    "upstream": digests["base"],
                    "prune": self._prune_config(cfg.ablation_level, kinds).to_dict(),
                }
            )
        for level in cfg.retrain_levels:
            digests[retrained_label(level)] = stable_digest(
                {"upstream": digests[level], "retrain": cfg.retrain.to_dict()}
            )
        digests["eval"] = stable_digest(
            {"upstream": sorted(digests.values()), "eval": cfg.eval.to_dict()}
        )
        return digests

    def _is_current(self, path: Path, digest: str, stage: str) -> bool:
        blob = storage.blob_path(path)
        if storage.stored_digest(path) == digest and blob is not None and blob.exists():
            logger.info(f"seed {self.seed}: {stage} is up to date, skipping")
            return True
        return False

    def corpus(self) -> tuple[memoria.Dataset, memoria.ExemplarRegistry]:
        directory = self.directory / "corpus"
        digest = self.digests["corpus"]
        registry_path = directory / memoria.REGISTRY_FILE
        if not (
            self._is_current(directory / memoria.CORPUS_FILE, digest, "corpus")
            and storage.stored_digest(registry_path) == digest
        ):
            dataset, registry = memoria.synth_corpus(self.cfg.corpus)
            memoria.save_corpus(
                directory, dataset, registry, config_digest=digest, cfg=self.cfg.corpus
            )
        return memoria.load_corpus(directory)

    def base(self, dataset: memoria.Dataset) -> Parameters:
        path = self.directory / "base.ckpt"
        digest = self.digests["base"]
        if not self._is_current(path, digest, "base training"):
            params, log = train_base(dataset, self.cfg.model, self.cfg.train, self.progress)
            storage.write_csv(self.directory / "base_loss.csv", log.rows(), ["step", "loss"])
            storage.save_parameters(
                path, params, config_digest=digest, meta=memoria.condition_meta(dataset)
            )
        return storage.load_parameters(path)

    def masks(
        self,
        label: str,
        stem: str,
        base: Parameters,
        neutral: memoria.NeutralPromptSet,
        registry: memoria.ExemplarRegistry,
        cfg: PruneConfig,
    ) -> MaskSet:
        path = self.directory / f"masks_{stem}.ckpt"
        digest = self.digests[label]
        if not self._is_current(path, digest, f"pruning {label}"):
            snapshots = None
            if cfg.snapshot_every:
                snapshots = storage.SnapshotRotation(
                    self.directory / "snapshots", prefix=f"masks_{stem}"
                )
            maskset, log = prune(
                base, neutral, cfg, registry=registry, snapshots=snapshots, progress=self.progress
            )
            write_prune_log(self.directory / f"prune_{stem}.csv", log)
            write_deactivation(self.directory / f"deactivation_{stem}.csv", maskset)
            storage.save_maskset(path, maskset, config_digest=digest, meta={"beta": cfg.beta})
        return storage.load_maskset(path)

    def retrained(
        self,
        level: str,
        base: Parameters,
        maskset: MaskSet,
        neutral: memoria.NeutralPromptSet,
        registry: memoria.ExemplarRegistry,
    ) -> Parameters:
        label = retrained_label(level)
        path = self.directory / f"retrained_{level}.ckpt"
        digest = self.digests[label]
        if not self._is_current(path, digest, f"retraining {level}"):
            params, log = retrain(
                base, maskset, neutral, self.cfg.retrain, registry=registry, progress=self.progress
            )
            write_prune_log(self.directory / f"retrain_{level}.csv", log)
            storage.save_parameters(path, params, config_digest=digest)
        return storage.load_parameters(path)

    def run(self) -> Report:
        """Run (or resume) every stage and return the seed's report."""
        cfg = self.cfg
        report_path = self.directory / "report.json"
        if storage.stored_digest(report_path) == self.digests["eval"]:
            logger.info(f"seed {self.seed}: evaluation is up to date, skipping")
            return Report.from_dict(storage.read_json(report_path))

        dataset, registry = self.corpus()
        base = self.base(dataset)
        neutral = memoria.neutral_conditions(dataset)

        models = {BASE: (base, None)}
        masksets = {}
        for level in cfg.levels:
            masksets[level] = self.masks(
                level, level, base, neutral, registry, self._prune_config(level)
            )
            models[level] = (base, hard_gates(masksets[level]))
        for kinds in cfg.ablation_kinds:
            label = ablation_label(cfg.ablation_level, kinds)
            stem = f"{cfg.ablation_level}_{'-'.join(kinds)}"
            masksets[label] = self.masks(
                label,
                stem,
                base,
                neutral,
                registry,
                self._prune_config(cfg.ablation_level, kinds),
            )
            models[label] = (base, hard_gates(masksets[label]))
        for level in cfg.retrain_levels:
            params = self.retrained(level, base, masksets[level], neutral, registry)
            models[retrained_label(level)] = (params, hard_gates(masksets[level]))

        heldout = memoria.heldout_neutral(
            cfg.corpus, cfg.eval.heldout_per_neutral, cfg.eval.heldout_seed
        )
        report, samples = evaluate_models(models, dataset, registry, heldout, cfg.eval)
        report.reproduction[UNTRAINED] = reproduction_rate(
            build_model(cfg.model, cfg.train.seed),
            None,
            registry,
            cfg.eval.tau_rel,
            cfg.eval.n_per_trigger,
            cfg.eval.n_steps,
            cfg.eval.seed,
        )
        report.deactivation = {label: deactivation_ratios(m) for label, m in masksets.items()}
        report.digests = dict(self.digests)
        emit_figures(self.directory / "figures", samples)
        storage.write_json(
            report_path,
            {"config_digest": self.digests["eval"], "seed": self.seed, **report.to_dict()},
        )
        return report


def _majority(flags: list[bool]) -> bool:
    """True when at least two thirds of the flags hold (2 of 3 seeds)."""
    return sum(flags) >= math.ceil(2 * len(flags) / 3)


def _mean(values: list[float]) -> float:
    return float(np.mean(values))


def aggregate(reports: dict[int, Report]) -> dict:
    """Means over seeds of every scalar and per-role metric."""
    means = {}
    first = next(iter(reports.values()))
    for name in ("reproduction", "reproduction_lenient", "quality", "alignment"):
        means[name] = {
            label: _mean([getattr(r, name)[label] for r in reports.values()])
            for label in getattr(first, name)
        }
    for name in ("magnitude", "decoupling", "explained_variance", "velocity", "deactivation"):
        means[name] = {
            label: {
                key: _mean([getattr(r, name)[label][key] for r in reports.values()])
                for key in entry
            }
            for label, entry in getattr(first, name).items()
        }
    return means


def acceptance_checks(reports: dict[int, Report], cfg: RunConfig) -> dict[str, bool]:
    """Directional checks of the de-memorization trends across seeds.

    Checks whose models were not part of the run are left out.
    Checks of forgetting fail outright when the base model reproduces fewer than
    ``MEMORIZATION_FLOOR`` of its triggers.
    """
    rs = list(reports.values())
    mean = aggregate(reports)
    rate = mean["reproduction"]
    memorized = rate[BASE] >= MEMORIZATION_FLOOR
    checks = {"memorization_baseline": memorized}
    if UNTRAINED in rate:
        checks["untrained_baseline"] = rate[UNTRAINED] < 0.02

    levels = sorted(cfg.levels, key=cfg.resolve_beta)
    ordered = [rate[BASE]] + [rate[level] for level in levels]
    checks["reproduction_ordered"] = memorized and ordered[0] > ordered[1] and all(
        a >= b for a, b in zip(ordered[1:], ordered[2:])
    )
    checks["strongest_halves_base"] = memorized and rate[levels[-1]] <= 0.5 * rate[BASE]
    checks["sparsity_nondecreasing"] = all(
        all(
            r.deactivation[a]["total"] <= r.deactivation[b]["total"]
            for a, b in zip(levels, levels[1:])
        )
        for r in rs
    )
    strongest = levels[-1]
    if all({"ffn", "norm"} <= set(r.deactivation[strongest]) for r in rs):
        checks["ffn_dominates_norm"] = _majority(
            [r.deactivation[strongest]["ffn"] >= r.deactivation[strongest]["norm"] for r in rs]
        )

    if "medium" in mean["decoupling"]:
        decoupling = mean["decoupling"]["medium"]
        gap = decoupling["trigger"] - decoupling["neutral"]
        checks["decoupling_gap"] = memorized and gap >= 0.15
        checks["neutral_overlap"] = decoupling["neutral"] <= 0.7
        checks["magnitude_shift_reduced"] = memorized and _majority(
            [
                r.magnitude["medium"]["trigger_shift"] < r.magnitude[BASE]["trigger_shift"]
                for r in rs
            ]
        )

    if retrained_label("strong") in rate:
        quality = mean["quality"]
        degradation = quality["strong"] - quality[BASE]
        remaining = quality[retrained_label("strong")] - quality[BASE]
        checks["quality_degrades"] = degradation > 0
        checks["retrain_recovers_quality"] = remaining <= 0.5 * degradation
        checks["retrain_keeps_forgetting"] = memorized and (
            rate[retrained_label("strong")] - rate["strong"] <= 0.05
        )

    attn_label = ablation_label(cfg.ablation_level, ("attn",))
    if attn_label in rate and cfg.ablation_level in rate:
        checks["attention_ablation_weaker"] = memorized and _majority(
            [
                r.reproduction[BASE] - r.reproduction[attn_label]
                < r.reproduction[BASE] - r.reproduction[cfg.ablation_level]
                for r in rs
            ]
        )
    return checks


def run_pipeline(cfg: RunConfig, out_dir: Path | None = None, progress: bool = False) -> dict:
    """Run every seed into ``out_dir`` and write the aggregate report.

    Args:
        cfg: Run configuration
        out_dir: Output directory (default: a fresh directory under the user data dir)
        progress: Show progress bars

    Returns:
        Aggregate report dictionary (also written to ``<out>/report.json``)
    """
    out_dir = Path(out_dir) if out_dir is not None else default_run_dir()
    with OutputDirLock(out_dir):
        logger.info(f"Running {len(cfg.seeds)} seed(s) into {out_dir}")
        storage.write_json(out_dir / "config.json", {"config_digest": cfg.digest(), **cfg.to_dict()})
        reports = {}
        for seed in cfg.seeds:
            reports[seed] = SeedRun(cfg, seed, out_dir / f"seed_{seed}", progress).run()

        checks = acceptance_checks(reports, cfg)
        for name, passed in checks.items():
            log = logger.info if passed else logger.warning
            log(f"check {name}: {'pass' if passed else 'FAIL'}")
        result = {
            "config_digest": cfg.digest(),
            "seeds": {str(seed): report.to_dict() for seed, report in reports.items()},
            "mean": aggregate(reports),
            "checks": checks,
        }
        storage.write_json(out_dir / "report.json", result)
    return result
