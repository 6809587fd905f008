"""Evaluate a family of models (base, pruned, retrained) on one corpus."""

import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from demem.analysis import metrics
from demem.data.memoria import Dataset, ExemplarRegistry
from demem.models.flownet import Parameters, standard_normal_noise
from demem.models.maskengine import Gates

logger = logging.getLogger(__name__)

BASE = "base"
REFERENCE_SEED_OFFSET = 500_000


@dataclass
class EvalConfig:
    """Evaluation settings.

    Attributes:
        tau_rel: Strict reproduction threshold (relative to RMS norm)
        lenient_tau_rel: Lenient judge threshold
        n_per_trigger: Samples per trigger condition
        n_per_neutral: Samples per neutral condition
        heldout_per_neutral: Held-out data rows per neutral condition
        n_steps: Sampler steps
        seed: Sampling seed (per condition: seed + condition id)
        heldout_seed: Seed of the held-out neutral draw
    """

    tau_rel: float = 0.1
    lenient_tau_rel: float = 0.3
    n_per_trigger: int = 125
    n_per_neutral: int = 100
    heldout_per_neutral: int = 200
    n_steps: int = 8
    seed: int = 10_000
    heldout_seed: int = 20_000

    def __post_init__(self):
        """Validate evaluation settings."""
        if self.tau_rel <= 0 or self.lenient_tau_rel <= 0:
            raise ValueError("Reproduction thresholds must be positive")
        if min(self.n_per_trigger, self.n_per_neutral, self.heldout_per_neutral) < 1:
            raise ValueError("Sample counts must be >= 1")
        if self.n_steps < 1:
            raise ValueError(f"n_steps must be >= 1, got {self.n_steps}")

    def to_dict(self) -> dict:
        return {
            "tau_rel": self.tau_rel,
            "lenient_tau_rel": self.lenient_tau_rel,
            "n_per_trigger": self.n_per_trigger,
            "n_per_neutral": self.n_per_neutral,
            "heldout_per_neutral": self.heldout_per_neutral,
            "n_steps": self.n_steps,
            "seed": self.seed,
            "heldout_seed": self.heldout_seed,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "EvalConfig":
        defaults = cls()
        return cls(**{key: data.get(key, value) for key, value in defaults.to_dict().items()})


@dataclass
class Report:
    """Metrics of one evaluated model family, keyed by model label.

    Attributes:
        reproduction: Strict trigger reproduction rate
        reproduction_lenient: Lenient trigger reproduction rate
        magnitude: Mean norms and shifts to the base model's neutral profile
        decoupling: 1-NN separability from an independent draw of the base model,
            trigger and neutral
        explained_variance: Variance captured by the 2D projection
        quality: Fréchet distance of neutral samples to held-out data
        alignment: Neutral condition alignment
        velocity: Mean velocity norms along trigger/neutral trajectories
        deactivation: Deactivation ratios of masked models
        digests: Config digests of the evaluated artifacts
    """

    reproduction: dict[str, float] = field(default_factory=dict)
    reproduction_lenient: dict[str, float] = field(default_factory=dict)
    magnitude: dict[str, dict] = field(default_factory=dict)
    decoupling: dict[str, dict] = field(default_factory=dict)
    explained_variance: dict[str, dict] = field(default_factory=dict)
    quality: dict[str, float] = field(default_factory=dict)
    alignment: dict[str, float] = field(default_factory=dict)
    velocity: dict[str, dict] = field(default_factory=dict)
    deactivation: dict[str, dict] = field(default_factory=dict)
    digests: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        """Validate that every rate is a fraction."""
        for name in ("reproduction", "reproduction_lenient", "alignment"):
            for label, rate in getattr(self, name).items():
                if not 0.0 <= rate <= 1.0:
                    raise ValueError(f"{name}[{label}] = {rate} is not in [0, 1]")

    def to_dict(self) -> dict:
        return {
            "reproduction": self.reproduction,
            "reproduction_lenient": self.reproduction_lenient,
            "magnitude": self.magnitude,
            "decoupling": self.decoupling,
            "explained_variance": self.explained_variance,
            "quality": self.quality,
            "alignment": self.alignment,
            "velocity": self.velocity,
            "deactivation": self.deactivation,
            "digests": self.digests,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Report":
        return cls(**{key: data.get(key, {}) for key in cls().to_dict()})


@dataclass
class EvaluationSamples:
    """Raw latents behind a report, kept for figures and CSV dumps."""

    trigger: dict[str, torch.Tensor] = field(default_factory=dict)
    neutral: dict[str, torch.Tensor] = field(default_factory=dict)
    neutral_ids: torch.Tensor | None = None


def evaluate_models(
    models: dict[str, tuple[Parameters, Gates | None]],
    dataset: Dataset,
    registry: ExemplarRegistry,
    heldout: Dataset,
    cfg: EvalConfig,
) -> tuple[Report, EvaluationSamples]:
    """Measure every model against the same noise draws.

    Decoupling compares each model with a second base sample drawn from
    ``cfg.seed + REFERENCE_SEED_OFFSET``, so unchanged models score about 0.5.

    Args:
        models: label -> (params, gates); must contain "base"
        dataset: Training corpus
        registry: Planted exemplars
        heldout: Held-out neutral data (quality reference)
        cfg: Evaluation settings

    Returns:
        Tuple of (Report, EvaluationSamples)
    """
    if BASE not in models:
        raise ValueError(f'Models to evaluate must include "{BASE}"')

    neutral_ids = sorted(c.id for c in dataset.conditions if not c.is_trigger)
    report = Report()
    samples = EvaluationSamples()

    for label, (params, gates) in models.items():
        logger.info(f"Evaluating {label}")
        triggers = metrics.trigger_samples(
            params, gates, registry, cfg.n_per_trigger, cfg.n_steps, cfg.seed
        )
        neutral, ids = metrics.condition_samples(
            params, gates, neutral_ids, cfg.n_per_neutral, cfg.n_steps, cfg.seed
        )
        samples.trigger[label] = torch.cat([triggers[k] for k in registry.trigger_ids])
        samples.neutral[label] = neutral
        samples.neutral_ids = ids

        report.reproduction[label] = metrics.rate_from_samples(
            triggers, registry, cfg.tau_rel, metrics.STRICT
        )
        report.reproduction_lenient[label] = metrics.rate_from_samples(
            triggers, registry, cfg.tau_rel, metrics.LENIENT, cfg.lenient_tau_rel
        )
        report.quality[label] = metrics.frechet_quality(neutral, heldout.x)
        report.alignment[label] = metrics.condition_alignment(neutral, ids, dataset)

        d = params.spec.latent_dim
        trigger_z0 = torch.cat(
            [
                standard_normal_noise(cfg.n_per_trigger, d, cfg.seed + k)
                for k in registry.trigger_ids
            ]
        )
        trigger_c = torch.tensor(registry.trigger_ids).repeat_interleave(cfg.n_per_trigger)
        neutral_z0 = torch.cat(
            [
                standard_normal_noise(cfg.n_per_neutral, d, cfg.seed + k)
                for k in neutral_ids
            ]
        )
        report.velocity[label] = {
            "trigger": float(
                np.mean(metrics.velocity_magnitudes(params, gates, trigger_z0, cfg.n_steps, trigger_c))
            ),
            "neutral": float(
                np.mean(metrics.velocity_magnitudes(params, gates, neutral_z0, cfg.n_steps, ids))
            ),
        }

    base_params, base_gates = models[BASE]
    reference_seed = cfg.seed + REFERENCE_SEED_OFFSET
    reference_triggers = metrics.trigger_samples(
        base_params, base_gates, registry, cfg.n_per_trigger, cfg.n_steps, reference_seed
    )
    reference_trigger = torch.cat([reference_triggers[k] for k in registry.trigger_ids])
    reference_neutral, _ = metrics.condition_samples(
        base_params, base_gates, neutral_ids, cfg.n_per_neutral, cfg.n_steps, reference_seed
    )

    base_neutral = metrics.magnitude_profile(samples.neutral[BASE])
    for label in models:
        trigger_profile = metrics.magnitude_profile(samples.trigger[label])
        neutral_profile = metrics.magnitude_profile(samples.neutral[label])
        report.magnitude[label] = {
            "trigger_mean": trigger_profile.mean,
            "neutral_mean": neutral_profile.mean,
            "trigger_shift": metrics.magnitude_shift(trigger_profile, base_neutral),
            "neutral_shift": metrics.magnitude_shift(neutral_profile, base_neutral),
        }
        if label == BASE:
            continue
        report.decoupling[label] = {
            "trigger": metrics.decoupling_score(reference_trigger, samples.trigger[label]),
            "neutral": metrics.decoupling_score(reference_neutral, samples.neutral[label]),
        }
        report.explained_variance[label] = {
            "trigger": metrics.project2d(
                samples.trigger[BASE], samples.trigger[label]
            ).explained_variance_ratio,
            "neutral": metrics.project2d(
                samples.neutral[BASE], samples.neutral[label]
            ).explained_variance_ratio,
        }
        logger.info(
            f"{label}: reproduction {report.reproduction[label]:.3f} "
            f"(base {report.reproduction[BASE]:.3f}), "
            f"decoupling trigger {report.decoupling[label]['trigger']:.3f} / "
            f"neutral {report.decoupling[label]['neutral']:.3f}"
        )
    return report, samples
