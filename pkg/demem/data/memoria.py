"""Synthetic corpus with planted, duplicated exemplars.

Neutral conditions map to Gaussian-mixture families (fresh draws). Each
trigger condition maps to one fixed exemplar duplicated D times; exact
duplication under a dedicated condition is what makes the base model
memorize it.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path

import torch

from demem.models import storage
from demem.models.spec import NEUTRAL, TRIGGER, Condition

logger = logging.getLogger(__name__)

DTYPE = torch.float64
MIN_SEPARATION = 0.5
MAX_EXEMPLAR_DRAWS = 1000
CORPUS_FILE = "corpus.ckpt"
REGISTRY_FILE = "registry.json"
SAMPLE_SEED_OFFSET = 1
EXEMPLAR_SEED_OFFSET = 2


@dataclass
class CorpusConfig:
    """Corpus generation settings.

    Attributes:
        d: Data dimension
        n_neutral_conditions: Number of neutral condition families
        samples_per_neutral: Fresh samples drawn per neutral condition
        k: Number of planted exemplars (one trigger condition each)
        duplication: Copies of each exemplar in the dataset
        n_components: Mixture components per neutral family
        mean_scale: Standard deviation of component means
        spread: Standard deviation within a component
        exemplar_scale: Exemplar norm relative to sqrt(d)
        seed: Generation seed
        neutral_ids: Explicit neutral condition ids (default 0..n-1)
        trigger_ids: Explicit trigger ids (default following the neutral ids)
    """

    d: int = 32
    n_neutral_conditions: int = 12
    samples_per_neutral: int = 400
    k: int = 8
    duplication: int = 200
    n_components: int = 3
    mean_scale: float = 1.0
    spread: float = 0.5
    exemplar_scale: float = 1.6
    seed: int = 0
    neutral_ids: list[int] | None = None
    trigger_ids: list[int] | None = None

    def __post_init__(self):
        """Validate corpus settings and condition id partition."""
        if self.d < 1:
            raise ValueError(f"d must be >= 1, got {self.d}")
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.duplication < 1:
            raise ValueError(f"duplication must be >= 1, got {self.duplication}")
        if self.n_neutral_conditions < 1 or self.samples_per_neutral < 1:
            raise ValueError("Need at least one neutral condition with at least one sample")
        if self.n_components < 1:
            raise ValueError(f"n_components must be >= 1, got {self.n_components}")
        if self.spread <= 0 or self.mean_scale < 0 or self.exemplar_scale <= 0:
            raise ValueError("spread and exemplar_scale must be positive, mean_scale >= 0")

        neutral = self.resolved_neutral_ids()
        trigger = self.resolved_trigger_ids()
        if len(set(neutral)) != len(neutral) or len(set(trigger)) != len(trigger):
            raise ValueError("Condition ids must be unique within their role")
        overlap = set(neutral) & set(trigger)
        if overlap:
            raise ValueError(f"Neutral and trigger condition ids overlap: {sorted(overlap)}")
        if min(neutral + trigger) < 0:
            raise ValueError("Condition ids must be non-negative")

    def resolved_neutral_ids(self) -> list[int]:
        if self.neutral_ids is not None:
            if len(self.neutral_ids) != self.n_neutral_conditions:
                raise ValueError(
                    f"Got {len(self.neutral_ids)} neutral ids for "
                    f"{self.n_neutral_conditions} neutral conditions"
                )
            return list(self.neutral_ids)
        return list(range(self.n_neutral_conditions))

    def resolved_trigger_ids(self) -> list[int]:
        if self.trigger_ids is not None:
            if len(self.trigger_ids) != self.k:
                raise ValueError(f"Got {len(self.trigger_ids)} trigger ids for k={self.k}")
            return list(self.trigger_ids)
        start = self.n_neutral_conditions
        return list(range(start, start + self.k))

    @property
    def vocab_size(self) -> int:
        """Smallest condition vocabulary that covers every id."""
        return max(self.resolved_neutral_ids() + self.resolved_trigger_ids()) + 1

    def to_dict(self) -> dict:
        return {
            "d": self.d,
            "n_neutral_conditions": self.n_neutral_conditions,
            "samples_per_neutral": self.samples_per_neutral,
            "k": self.k,
            "duplication": self.duplication,
            "n_components": self.n_components,
            "mean_scale": self.mean_scale,
            "spread": self.spread,
            "exemplar_scale": self.exemplar_scale,
            "seed": self.seed,
            "neutral_ids": self.neutral_ids,
            "trigger_ids": self.trigger_ids,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "CorpusConfig":
        defaults = cls()
        return cls(**{key: data.get(key, value) for key, value in defaults.to_dict().items()})


@dataclass
class Exemplar:
    condition: Condition
    vector: torch.Tensor


@dataclass
class ExemplarRegistry:
    """Ground truth of planted exemplars.

    Attributes:
        exemplars: One (trigger condition, vector) entry per trigger
        rms_norm: Root-mean-square norm of all dataset rows (scale reference)
    """

    exemplars: list[Exemplar] = field(default_factory=list)
    rms_norm: float = 1.0

    def __len__(self) -> int:
        return len(self.exemplars)

    @property
    def trigger_ids(self) -> list[int]:
        return [ex.condition.id for ex in self.exemplars]

    def matrix(self) -> torch.Tensor:
        """Exemplars stacked to (K, d)."""
        return torch.stack([ex.vector for ex in self.exemplars])

    def lookup(self, condition_id: int) -> torch.Tensor:
        for ex in self.exemplars:
            if ex.condition.id == condition_id:
                return ex.vector
        raise KeyError(f"No exemplar registered for condition {condition_id}")

    def min_pairwise_distance(self) -> float:
        vectors = self.matrix()
        if len(vectors) < 2:
            return float("inf")
        dist = torch.cdist(vectors, vectors)
        dist.fill_diagonal_(float("inf"))
        return float(dist.min())

    def to_dict(self) -> dict:
        return {
            "rms_norm": self.rms_norm,
            "exemplars": [
                {"condition": ex.condition.to_dict(), "vector": ex.vector.tolist()}
                for ex in self.exemplars
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ExemplarRegistry":
        exemplars = [
            Exemplar(
                condition=Condition.from_dict(item["condition"]),
                vector=torch.tensor(item["vector"], dtype=DTYPE),
            )
            for item in data.get("exemplars", [])
        ]
        return cls(exemplars=exemplars, rms_norm=float(data["rms_norm"]))


@dataclass
class Dataset:
    """Training corpus.

    Attributes:
        x: Data rows, shape (n, d)
        cond_ids: Condition id per row, shape (n,)
        conditions: Every condition of the corpus, tagged by role
    """

    x: torch.Tensor
    cond_ids: torch.Tensor
    conditions: list[Condition]

    def __len__(self) -> int:
        return self.x.shape[0]

    def rows_for(self, condition_id: int) -> torch.Tensor:
        return self.x[self.cond_ids == condition_id]


@dataclass
class NeutralPromptSet:
    """Neutral conditions used for pruning.

    Attributes:
        conditions: Neutral conditions (may repeat when expanded)
    """

    conditions: list[Condition]

    def __post_init__(self):
        """Reject trigger conditions."""
        triggers = [c for c in self.conditions if c.is_trigger]
        if triggers:
            raise ValueError(f"Neutral prompt set contains trigger conditions: {triggers}")

    def __len__(self) -> int:
        return len(self.conditions)

    def check_against(self, registry: ExemplarRegistry) -> None:
        """Raise if any condition is registered as a trigger."""
        registered = set(registry.trigger_ids)
        leaked = sorted({c.id for c in self.conditions} & registered)
        if leaked:
            raise ValueError(f"Neutral prompt set contains registered trigger ids: {leaked}")

    def expand(self, size: int) -> "NeutralPromptSet":
        """Cycle the distinct conditions to ``size`` entries."""
        if not self.conditions:
            raise ValueError("Cannot expand an empty neutral prompt set")
        return NeutralPromptSet([self.conditions[i % len(self.conditions)] for i in range(size)])


def _draw_exemplars(cfg: CorpusConfig, generator: torch.Generator) -> torch.Tensor:
    radius = cfg.exemplar_scale * cfg.d**0.5
    direction = torch.randn((cfg.k, cfg.d), generator=generator, dtype=DTYPE)
    return radius * direction / direction.norm(dim=1, keepdim=True)


def neutral_families(cfg: CorpusConfig) -> torch.Tensor:
    """Component means of every neutral family, shape (n_neutral, n_components, d).

    Family parameters come from their own generator, so held-out draws can
    reuse them without replaying the training samples.
    """
    generator = torch.Generator().manual_seed(cfg.seed)
    return cfg.mean_scale * torch.randn(
        (cfg.n_neutral_conditions, cfg.n_components, cfg.d), generator=generator, dtype=DTYPE
    )


def draw_neutral(
    cfg: CorpusConfig, n_per_neutral: int, seed: int
) -> tuple[torch.Tensor, torch.Tensor]:
    """Fresh mixture samples for every neutral condition.

    Returns:
        Tuple of (rows (n_neutral * n_per_neutral, d), condition ids)
    """
    means = neutral_families(cfg)
    generator = torch.Generator().manual_seed(seed)
    rows = []
    ids = []
    for family, cond_id in zip(means, cfg.resolved_neutral_ids(), strict=True):
        component = torch.randint(cfg.n_components, (n_per_neutral,), generator=generator)
        noise = torch.randn((n_per_neutral, cfg.d), generator=generator, dtype=DTYPE)
        rows.append(family[component] + cfg.spread * noise)
        ids.append(torch.full((n_per_neutral,), cond_id, dtype=torch.long))
    return torch.cat(rows), torch.cat(ids)


def heldout_neutral(cfg: CorpusConfig, n_per_neutral: int, seed: int) -> Dataset:
    """Neutral-only samples from the training families, drawn with another seed."""
    if seed == cfg.seed + SAMPLE_SEED_OFFSET:
        raise ValueError("Held-out seed collides with the training sample seed")
    x, ids = draw_neutral(cfg, n_per_neutral, seed)
    conditions = [Condition(i, NEUTRAL) for i in cfg.resolved_neutral_ids()]
    return Dataset(x=x, cond_ids=ids, conditions=conditions)


def synth_corpus(cfg: CorpusConfig) -> tuple[Dataset, ExemplarRegistry]:
    """Generate the corpus and its exemplar registry.

    Args:
        cfg: Corpus settings

    Returns:
        Tuple of (Dataset, ExemplarRegistry)
    """
    neutral_ids = cfg.resolved_neutral_ids()
    trigger_ids = cfg.resolved_trigger_ids()
    neutral_x, neutral_cond = draw_neutral(
        cfg, cfg.samples_per_neutral, cfg.seed + SAMPLE_SEED_OFFSET
    )

    generator = torch.Generator().manual_seed(cfg.seed + EXEMPLAR_SEED_OFFSET)
    for attempt in range(MAX_EXEMPLAR_DRAWS):
        exemplars = _draw_exemplars(cfg, generator)
        x = torch.cat([neutral_x, exemplars.repeat_interleave(cfg.duplication, dim=0)])
        rms = float(x.pow(2).sum(dim=1).mean().sqrt())
        if cfg.k < 2:
            break
        dist = torch.cdist(exemplars, exemplars)
        dist.fill_diagonal_(float("inf"))
        if float(dist.min()) > MIN_SEPARATION * rms:
            break
        logger.debug(f"Exemplar draw {attempt} too close, redrawing")
    else:
        raise ValueError("Could not draw sufficiently separated exemplars")

    trigger_cond = torch.tensor(trigger_ids, dtype=torch.long).repeat_interleave(cfg.duplication)
    conditions = [Condition(i, NEUTRAL) for i in neutral_ids] + [
        Condition(i, TRIGGER) for i in trigger_ids
    ]
    dataset = Dataset(x=x, cond_ids=torch.cat([neutral_cond, trigger_cond]), conditions=conditions)
    registry = ExemplarRegistry(
        exemplars=[
            Exemplar(Condition(cond_id, TRIGGER), exemplars[i].clone())
            for i, cond_id in enumerate(trigger_ids)
        ],
        rms_norm=rms,
    )
    logger.info(
        f"Synthesized corpus: {len(dataset)} rows, {len(neutral_ids)} neutral, "
        f"{len(trigger_ids)} trigger conditions, RMS norm {rms:.3f}"
    )
    return dataset, registry


def neutral_conditions(dataset: Dataset) -> NeutralPromptSet:
    """All neutral conditions of a corpus, in id order."""
    return NeutralPromptSet(sorted((c for c in dataset.conditions if not c.is_trigger), key=_id))


def trigger_conditions(dataset: Dataset) -> list[Condition]:
    """All trigger conditions of a corpus, in id order."""
    return sorted((c for c in dataset.conditions if c.is_trigger), key=_id)


def _id(condition: Condition) -> int:
    return condition.id


def save_corpus(
    directory: Path,
    dataset: Dataset,
    registry: ExemplarRegistry,
    config_digest: str | None = None,
    cfg: CorpusConfig | None = None,
):
    """Export a corpus as ``corpus.ckpt`` (+ blob) and ``registry.json``.

    The generating config, when given, is recorded in the registry so
    held-out neutral data can be drawn from the same families later.
    """
    directory = Path(directory)
    tensors = {
        "x": dataset.x,
        "cond_ids": dataset.cond_ids.to(DTYPE),
        "exemplars": registry.matrix(),
    }
    meta = condition_meta(dataset)
    storage.write_checkpoint(
        directory / CORPUS_FILE, "corpus", tensors, meta=meta, config_digest=config_digest
    )
    storage.write_json(
        directory / REGISTRY_FILE,
        {
            "config_digest": config_digest,
            "corpus_config": cfg.to_dict() if cfg is not None else None,
            **registry.to_dict(),
        },
    )


def load_corpus(directory: Path) -> tuple[Dataset, ExemplarRegistry]:
    """Import a corpus written by :func:`save_corpus`."""
    directory = Path(directory)
    ckpt = storage.read_checkpoint(directory / CORPUS_FILE, kind="corpus")
    conditions = [Condition.from_dict(item) for item in ckpt.meta["conditions"]]
    dataset = Dataset(
        x=ckpt.tensors["x"],
        cond_ids=ckpt.tensors["cond_ids"].round().to(torch.long),
        conditions=conditions,
    )
    registry = ExemplarRegistry.from_dict(storage.read_json(directory / REGISTRY_FILE))
    for exemplar, vector in zip(registry.exemplars, ckpt.tensors["exemplars"], strict=True):
        exemplar.vector = vector.clone()
    return dataset, registry


def condition_meta(dataset: Dataset) -> dict:
    """Condition partition of a corpus, for checkpoint metadata."""
    return {"conditions": [c.to_dict() for c in dataset.conditions]}


def neutral_from_meta(meta: dict) -> NeutralPromptSet:
    """Rebuild the neutral prompt set recorded by :func:`condition_meta`."""
    if "conditions" not in meta:
        raise ValueError("Checkpoint metadata does not record the corpus conditions")
    conditions = [Condition.from_dict(item) for item in meta["conditions"]]
    return NeutralPromptSet(sorted((c for c in conditions if not c.is_trigger), key=_id))


def load_corpus_config(directory: Path) -> CorpusConfig | None:
    """Config recorded by :func:`save_corpus`, or None if it was not recorded."""
    data = storage.read_json(Path(directory) / REGISTRY_FILE).get("corpus_config")
    return CorpusConfig.from_dict(data) if data else None
