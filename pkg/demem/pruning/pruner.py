"""Mask training on neutral conditions, and post-pruning retraining.

The objective compares the masked sampler against the frozen original
sampler on the same starting noise and adds a penalty on the mean relaxed
gate value::

    (1/N_l) * ||F_masked(z0, N, c) - F_ref(z0, N, c)||^2 + beta * mean(sigma_hat(M))

Only mask logits train during pruning. Retraining unfreezes every network
weight under the reconstruction term alone, with the masks fixed to hard
0/1 gates.
"""

import logging
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from typing import Any

import torch
from tqdm.auto import tqdm

from demem.data.memoria import ExemplarRegistry, NeutralPromptSet
from demem.errors import NumericalError
from demem.models.flownet import (
    NoiseSource,
    Parameters,
    condition_ids,
    euler_sample,
    standard_normal_noise,
)
from demem.models.maskengine import (
    DEFAULT_DELTA,
    DEFAULT_GAMMA,
    DEFAULT_KINDS,
    Gates,
    MaskSet,
    binarize,
    init_maskset,
    normalize_kinds,
    relax,
    sparsity_penalty,
)
from demem.models.spec import Condition
from demem.models.storage import SnapshotRotation

logger = logging.getLogger(__name__)

BETA_PRESETS = {"weak": 1.0, "medium": 2.0, "strong": 5.0}
ADAM_BETAS = (0.0, 0.999)


def beta_preset(level: str) -> float:
    """Regularization strength for a de-memorization level."""
    try:
        return BETA_PRESETS[level]
    except KeyError:
        raise ValueError(
            f"Unknown de-memorization level {level!r}. Must be one of {list(BETA_PRESETS)}"
        ) from None


@dataclass
class PruneConfig:
    """Settings shared by pruning and retraining.

    Attributes:
        beta: Sparsity weight (> 0); ignored by retraining
        steps: Optimizer steps
        lr: Learning rate of the per-coordinate adaptive optimizer
        batch: Conditions per step
        n_steps: Sampler steps N used on both sides of the objective
        seed: Seed for condition batches and starting noise
        recompute: Recompute each sampler step during backward
        kinds: Enabled mask kinds
        gamma: Relaxation slope
        delta: Relaxation offset
        neutral_set_size: Size of the cycled neutral prompt set
        snapshot_every: Mask snapshot interval in steps (0 disables)
    """

    beta: float = 2.0
    steps: int = 2000
    lr: float = 1e-2
    batch: int = 16
    n_steps: int = 4
    seed: int = 0
    recompute: bool = False
    kinds: tuple[str, ...] = DEFAULT_KINDS
    gamma: float = DEFAULT_GAMMA
    delta: float = DEFAULT_DELTA
    neutral_set_size: int = 64
    snapshot_every: int = 0

    def __post_init__(self):
        """Validate pruning settings."""
        if self.beta <= 0:
            raise ValueError(f"beta must be positive, got {self.beta}")
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.batch < 1:
            raise ValueError(f"batch must be >= 1, got {self.batch}")
        if self.n_steps < 1:
            raise ValueError(f"n_steps must be >= 1, got {self.n_steps}")
        if self.neutral_set_size < 1:
            raise ValueError(f"neutral_set_size must be >= 1, got {self.neutral_set_size}")
        if self.snapshot_every < 0:
            raise ValueError(f"snapshot_every must be >= 0, got {self.snapshot_every}")
        self.kinds = normalize_kinds(self.kinds)

    def to_dict(self) -> dict:
        return {
            "beta": self.beta,
            "steps": self.steps,
            "lr": self.lr,
            "batch": self.batch,
            "n_steps": self.n_steps,
            "seed": self.seed,
            "recompute": self.recompute,
            "kinds": list(self.kinds),
            "gamma": self.gamma,
            "delta": self.delta,
            "neutral_set_size": self.neutral_set_size,
            "snapshot_every": self.snapshot_every,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PruneConfig":
        defaults = cls()
        values = {key: data.get(key, value) for key, value in defaults.to_dict().items()}
        values["kinds"] = tuple(values["kinds"])
        return cls(**values)


LOG_FIELDS = ["step", "reconstruction_term", "sparsity_term", "objective"]


@dataclass
class PruneLog:
    """Objective terms per step (the state before each update plus the final one)."""

    rows: list[dict] = field(default_factory=list)

    def record(self, step: int, reconstruction: float, sparsity: float) -> None:
        self.rows.append(
            {
                "step": step,
                "reconstruction_term": reconstruction,
                "sparsity_term": sparsity,
                "objective": reconstruction + sparsity,
            }
        )

    def objective_at(self, step: int) -> float:
        for row in self.rows:
            if row["step"] == step:
                return row["objective"]
        raise KeyError(f"No log entry for step {step}")

    def __len__(self) -> int:
        return len(self.rows)


def _require_neutral(conds: Sequence[Condition], registry: ExemplarRegistry | None) -> None:
    if len(conds) == 0:
        raise ValueError("Pruning objective needs at least one condition")
    for cond in conds:
        if not isinstance(cond, Condition):
            raise ValueError(f"Pruning conditions must be tagged Condition objects, got {cond!r}")
        if cond.is_trigger:
            raise ValueError(f"Trigger condition {cond} is not allowed in the pruning objective")
    if registry is not None:
        NeutralPromptSet(list(conds)).check_against(registry)


def reconstruction_term(
    ref_params: Parameters,
    params: Parameters,
    gates: Gates | None,
    conds: Sequence[Condition],
    n_steps: int,
    noise_seed: int,
    noise_source: NoiseSource = standard_normal_noise,
    recompute: bool = False,
    registry: ExemplarRegistry | None = None,
) -> torch.Tensor:
    """Mean over the batch of ``(1/N_l) ||z_N^masked - z_N^ref||^2``.

    One z_0 per condition is drawn from ``noise_source`` and fed to both
    samplers.
    """
    _require_neutral(conds, registry)
    spec = ref_params.spec
    ids = condition_ids(list(conds), len(conds), spec)
    z0 = noise_source(len(conds), spec.latent_dim, noise_seed)
    with torch.no_grad():
        z_ref = euler_sample(ref_params, None, z0, n_steps, ids).z_n
    z_masked = euler_sample(params, gates, z0, n_steps, ids, recompute=recompute).z_n
    return ((z_masked - z_ref) ** 2).mean(dim=1).mean()


def pruning_terms(
    ref_params: Parameters,
    params: Parameters,
    maskset: MaskSet,
    conds: Sequence[Condition],
    n_steps: int,
    noise_seed: int,
    noise_source: NoiseSource = standard_normal_noise,
    recompute: bool = False,
    registry: ExemplarRegistry | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Return (reconstruction term, sparsity penalty) for one batch."""
    recon = reconstruction_term(
        ref_params,
        params,
        relax(maskset),
        conds,
        n_steps,
        noise_seed,
        noise_source,
        recompute,
        registry,
    )
    return recon, sparsity_penalty(maskset)


def pruning_objective(
    ref_params: Parameters,
    params: Parameters,
    maskset: MaskSet,
    conds: Sequence[Condition],
    beta: float,
    n_steps: int,
    noise_seed: int,
    noise_source: NoiseSource = standard_normal_noise,
    recompute: bool = False,
    registry: ExemplarRegistry | None = None,
) -> torch.Tensor:
    """Reconstruction-to-reference plus ``beta`` times the sparsity penalty.

    Args:
        ref_params: Original model (always sampled unmasked)
        params: Weights of the masked model
        maskset: Gate logits
        conds: Neutral conditions, one sample each
        beta: Sparsity weight (>= 0)
        n_steps: Sampler steps N for both samplers
        noise_seed: Seed passed to ``noise_source``
        noise_source: Callable (n, d, seed) -> z0
        recompute: Recompute sampler steps during backward
        registry: When given, also reject ids registered as triggers

    Returns:
        Scalar objective, differentiable w.r.t. mask logits and params
    """
    if beta < 0:
        raise ValueError(f"beta must be non-negative, got {beta}")
    recon, penalty = pruning_terms(
        ref_params,
        params,
        maskset,
        conds,
        n_steps,
        noise_seed,
        noise_source,
        recompute,
        registry,
    )
    return recon + beta * penalty


def count_saved_activations(fn: Callable[[], Any]) -> int:
    """Number of tensors autograd saves for backward while running ``fn``."""
    count = 0

    def pack(tensor):
        nonlocal count
        count += 1
        return tensor

    with torch.autograd.graph.saved_tensors_hooks(pack, lambda tensor: tensor):
        fn()
    return count


def _batches(neutral: NeutralPromptSet, cfg: PruneConfig):
    """Yield (conditions, noise seed) for steps 0..cfg.steps."""
    prompts = neutral.expand(cfg.neutral_set_size)
    generator = torch.Generator().manual_seed(cfg.seed)
    batch = min(cfg.batch, len(prompts))
    for _ in range(cfg.steps + 1):
        idx = torch.randperm(len(prompts), generator=generator)[:batch]
        seed = int(torch.randint(2**31 - 1, (1,), generator=generator))
        yield [prompts.conditions[i] for i in idx.tolist()], seed


def prune(
    ref_params: Parameters,
    neutral: NeutralPromptSet,
    cfg: PruneConfig,
    noise_source: NoiseSource = standard_normal_noise,
    registry: ExemplarRegistry | None = None,
    snapshots: SnapshotRotation | None = None,
    progress: bool = False,
) -> tuple[MaskSet, PruneLog]:
    """Learn mask logits on neutral conditions with the generator frozen.

    Args:
        ref_params: Original model; the masked model shares these weights
        neutral: Neutral conditions
        cfg: Pruning settings
        noise_source: Callable (n, d, seed) -> z0
        registry: Optional trigger registry for leak checks
        snapshots: Optional rotation receiving mask snapshots
        progress: Show a tqdm progress bar

    Returns:
        Tuple of (trained MaskSet, PruneLog)
    """
    if len(neutral) == 0:
        raise ValueError("Pruning needs a nonempty neutral prompt set")
    if registry is not None:
        neutral.check_against(registry)

    maskset = init_maskset(ref_params.spec, cfg.kinds, gamma=cfg.gamma, delta=cfg.delta)
    log = PruneLog()
    if cfg.steps == 0:
        return maskset, log

    logger.info(
        f"Pruning with beta={cfg.beta} on kinds {list(cfg.kinds)} for {cfg.steps} steps "
        f"(N={cfg.n_steps}, recompute={cfg.recompute})"
    )
    frozen = ref_params.detached()
    trainable = maskset.trainable()
    optimizer = torch.optim.Adam(list(trainable.logits.values()), lr=cfg.lr, betas=ADAM_BETAS)

    batches = _batches(neutral, cfg)
    for step, (conds, noise_seed) in enumerate(
        tqdm(batches, total=cfg.steps + 1, desc=f"prune b={cfg.beta}", disable=not progress)
    ):
        recon, penalty = pruning_terms(
            frozen,
            frozen,
            trainable,
            conds,
            cfg.n_steps,
            noise_seed,
            noise_source,
            cfg.recompute,
        )
        objective = recon + cfg.beta * penalty
        if not torch.isfinite(objective):
            raise NumericalError(f"Pruning objective became non-finite at step {step}")
        log.record(step, recon.item(), cfg.beta * penalty.item())
        if step == cfg.steps:
            break

        optimizer.zero_grad()
        objective.backward()
        optimizer.step()

        if snapshots is not None and cfg.snapshot_every and (step + 1) % cfg.snapshot_every == 0:
            snapshots.snapshot(trainable.detached(), step + 1)
        if step % 500 == 0:
            logger.debug(f"prune step {step}: objective {objective.item():.6f}")

    logger.info(
        f"Pruning finished: objective {log.rows[0]['objective']:.6f} -> "
        f"{log.rows[-1]['objective']:.6f}"
    )
    return trainable.detached(), log


def retrain(
    ref_params: Parameters,
    maskset: MaskSet,
    neutral: NeutralPromptSet,
    cfg: PruneConfig,
    noise_source: NoiseSource = standard_normal_noise,
    registry: ExemplarRegistry | None = None,
    threshold: float = 0.5,
    progress: bool = False,
) -> tuple[Parameters, PruneLog]:
    """Fine-tune every weight of the pruned model with its masks held hard.

    The reconstruction term is measured against the frozen original model;
    ``cfg.beta`` is ignored and the masks are not modified.

    Returns:
        Tuple of (retrained Parameters, PruneLog with zero sparsity terms)
    """
    if len(neutral) == 0:
        raise ValueError("Retraining needs a nonempty neutral prompt set")
    if registry is not None:
        neutral.check_against(registry)

    log = PruneLog()
    if cfg.steps == 0:
        return ref_params.detached(), log

    hard = binarize(relax(maskset), threshold)
    frozen = ref_params.detached()
    params = ref_params.trainable()
    optimizer = torch.optim.Adam(list(params.tensors.values()), lr=cfg.lr, betas=ADAM_BETAS)
    logger.info(f"Retraining pruned model for {cfg.steps} steps (lr {cfg.lr})")

    batches = _batches(neutral, cfg)
    for step, (conds, noise_seed) in enumerate(
        tqdm(batches, total=cfg.steps + 1, desc="retrain", disable=not progress)
    ):
        recon = reconstruction_term(
            frozen, params, hard, conds, cfg.n_steps, noise_seed, noise_source, cfg.recompute
        )
        if not torch.isfinite(recon):
            raise NumericalError(f"Retraining loss became non-finite at step {step}")
        log.record(step, recon.item(), 0.0)
        if step == cfg.steps:
            break
        optimizer.zero_grad()
        recon.backward()
        optimizer.step()

    return params.detached(), log
