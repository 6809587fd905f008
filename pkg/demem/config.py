"""Run configuration for the end-to-end pipeline."""

import hashlib
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

from demem.analysis.evaluation import EvalConfig
from demem.data.memoria import CorpusConfig
from demem.models.flownet import TrainConfig
from demem.models.maskengine import normalize_kinds
from demem.models.spec import ModelSpec
from demem.pruning.pruner import BETA_PRESETS, PruneConfig, beta_preset

logger = logging.getLogger(__name__)


def stable_digest(data) -> str:
    """SHA-256 of the canonical JSON form (sorted keys, no whitespace)."""
    canonical = json.dumps(data, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def default_retrain() -> PruneConfig:
    return PruneConfig(steps=500, lr=1e-3)


@dataclass
class RunConfig:
    """Everything one pipeline run needs.

    Per-seed stage configs come from :meth:`for_seed`, which overrides the
    seeds of corpus, training and pruning with the run seed.

    Attributes:
        model: Network architecture
        corpus: Corpus generation
        train: Base-model training
        prune: Mask learning (beta is taken from the level)
        retrain: Post-pruning fine-tuning
        eval: Evaluation
        levels: De-memorization levels to prune at
        beta_overrides: level -> explicit beta replacing the preset
        retrain_levels: Levels whose pruned model is also retrained
        ablation_kinds: Kind sets pruned at ``ablation_level`` for comparison
        ablation_level: Level used by the ablation prunes
        seeds: Run seeds, processed in order
    """

    model: ModelSpec = field(default_factory=ModelSpec)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    prune: PruneConfig = field(default_factory=PruneConfig)
    retrain: PruneConfig = field(default_factory=default_retrain)
    eval: EvalConfig = field(default_factory=EvalConfig)
    levels: list[str] = field(default_factory=lambda: ["weak", "medium", "strong"])
    beta_overrides: dict[str, float] = field(default_factory=dict)
    retrain_levels: list[str] = field(default_factory=lambda: ["medium", "strong"])
    ablation_kinds: list[tuple[str, ...]] = field(default_factory=lambda: [("attn",), ("ffn",)])
    ablation_level: str = "medium"
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])

    def __post_init__(self):
        """Validate cross-stage consistency."""
        if self.model.latent_dim != self.corpus.d:
            raise ValueError(
                f"Model latent_dim {self.model.latent_dim} does not match corpus d {self.corpus.d}"
            )
        if self.model.cond_vocab < self.corpus.vocab_size:
            raise ValueError(
                f"cond_vocab {self.model.cond_vocab} cannot hold condition ids up to "
                f"{self.corpus.vocab_size - 1}"
            )
        if not self.levels:
            raise ValueError("At least one de-memorization level is required")
        for level in [*self.levels, *self.beta_overrides]:
            if level not in BETA_PRESETS:
                raise ValueError(f"Unknown level {level!r}. Must be one of {list(BETA_PRESETS)}")
        for level in [*self.retrain_levels, self.ablation_level]:
            if level not in BETA_PRESETS:
                raise ValueError(f"Unknown level {level!r}. Must be one of {list(BETA_PRESETS)}")
        for level, beta in self.beta_overrides.items():
            if beta <= 0:
                raise ValueError(f"beta for {level} must be positive, got {beta}")
        missing = sorted(set(self.retrain_levels) - set(self.levels))
        if missing:
            raise ValueError(f"Retrain levels {missing} are not pruned")
        self.ablation_kinds = [normalize_kinds(kinds) for kinds in self.ablation_kinds]
        if not self.seeds or len(set(self.seeds)) != len(self.seeds):
            raise ValueError("seeds must be a nonempty list of distinct integers")

    def resolve_beta(self, level: str) -> float:
        """Beta of a level: explicit override, else the preset."""
        if level in self.beta_overrides:
            return float(self.beta_overrides[level])
        return beta_preset(level)

    def for_seed(self, seed: int) -> "RunConfig":
        """Copy with every stage seeded by ``seed``."""
        return replace(
            self,
            corpus=replace(self.corpus, seed=seed),
            train=replace(self.train, seed=seed),
            prune=replace(self.prune, seed=seed),
            retrain=replace(self.retrain, seed=seed),
            eval=replace(self.eval, seed=self.eval.seed + seed),
            seeds=[seed],
        )

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "corpus": self.corpus.to_dict(),
            "train": self.train.to_dict(),
            "prune": self.prune.to_dict(),
            "retrain": self.retrain.to_dict(),
            "eval": self.eval.to_dict(),
            "levels": list(self.levels),
            "beta_overrides": dict(self.beta_overrides),
            "retrain_levels": list(self.retrain_levels),
            "ablation_kinds": [list(kinds) for kinds in self.ablation_kinds],
            "ablation_level": self.ablation_level,
            "seeds": list(self.seeds),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        """Create a run config; missing sections and keys take their defaults."""
        defaults = cls()
        return cls(
            model=ModelSpec.from_dict(data.get("model", {})),
            corpus=CorpusConfig.from_dict(data.get("corpus", {})),
            train=TrainConfig.from_dict(data.get("train", {})),
            prune=PruneConfig.from_dict(data.get("prune", {})),
            retrain=PruneConfig.from_dict({**defaults.retrain.to_dict(), **data.get("retrain", {})}),
            eval=EvalConfig.from_dict(data.get("eval", {})),
            levels=list(data.get("levels", defaults.levels)),
            beta_overrides={k: float(v) for k, v in data.get("beta_overrides", {}).items()},
            retrain_levels=list(data.get("retrain_levels", defaults.retrain_levels)),
            ablation_kinds=[tuple(k) for k in data.get("ablation_kinds", defaults.ablation_kinds)],
            ablation_level=data.get("ablation_level", defaults.ablation_level),
            seeds=[int(s) for s in data.get("seeds", defaults.seeds)],
        )

    def digest(self) -> str:
        return stable_digest(self.to_dict())


def load_config(path: Path | None) -> RunConfig:
    """Read a JSON run config; None gives the defaults.

    Keys that are not config fields (such as ``format_version`` in an echoed
    ``config.json``) are ignored.
    """
    if path is None:
        return RunConfig()
    with open(path, encoding="utf-8") as f:
        data = json.load(f)
    if not isinstance(data, dict):
        raise ValueError(f"{path} must contain a JSON object")
    logger.debug(f"Loaded run config from {path}")
    return RunConfig.from_dict(data)
