"""Memorization and quality measurements on denoised latents.

Everything here is a pure function of its inputs. Sampling-based metrics
derive one seed per trigger as ``seed + trigger_id``.
"""

import logging
from dataclasses import dataclass

import numpy as np
import torch
from scipy.spatial.distance import cdist
from scipy.stats import wasserstein_distance

from demem.data.memoria import Dataset, ExemplarRegistry
from demem.models.flownet import (
    NoiseSource,
    Parameters,
    euler_sample,
    standard_normal_noise,
)
from demem.models.maskengine import Gates

logger = logging.getLogger(__name__)

HISTOGRAM_BINS = 64
EIGENVALUE_FLOOR = 1e-10
STRICT = "strict"
LENIENT = "lenient"


def _as_array(latents) -> np.ndarray:
    if isinstance(latents, torch.Tensor):
        latents = latents.detach().cpu().numpy()
    array = np.asarray(latents, dtype=np.float64)
    if array.ndim == 1:
        array = array[None, :]
    return array


@torch.no_grad()
def trigger_samples(
    params: Parameters,
    masks: Gates | None,
    registry: ExemplarRegistry,
    n_per_trigger: int,
    n_steps: int,
    seed: int,
    noise_source: NoiseSource = standard_normal_noise,
) -> dict[int, torch.Tensor]:
    """Sample z_N for every registered trigger (seed per trigger: seed + id)."""
    if len(registry) == 0:
        raise ValueError("Exemplar registry is empty")
    if n_per_trigger < 1:
        raise ValueError(f"n_per_trigger must be >= 1, got {n_per_trigger}")
    d = params.spec.latent_dim
    samples = {}
    for cond_id in registry.trigger_ids:
        z0 = noise_source(n_per_trigger, d, seed + cond_id)
        samples[cond_id] = euler_sample(params, masks, z0, n_steps, cond_id).z_n
    return samples


@torch.no_grad()
def condition_samples(
    params: Parameters,
    masks: Gates | None,
    condition_ids: list[int],
    n_per_condition: int,
    n_steps: int,
    seed: int,
    noise_source: NoiseSource = standard_normal_noise,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Sample z_N for each condition id; returns (latents, condition id per row)."""
    d = params.spec.latent_dim
    latents = []
    ids = []
    for cond_id in condition_ids:
        z0 = noise_source(n_per_condition, d, seed + cond_id)
        latents.append(euler_sample(params, masks, z0, n_steps, cond_id).z_n)
        ids.append(torch.full((n_per_condition,), cond_id, dtype=torch.long))
    return torch.cat(latents), torch.cat(ids)


def rate_from_samples(
    samples: dict[int, torch.Tensor],
    registry: ExemplarRegistry,
    tau_rel: float = 0.1,
    judge: str = STRICT,
    lenient_tau_rel: float = 0.3,
) -> float:
    """Fraction of samples judged to reproduce their trigger's exemplar.

    strict: distance to the own exemplar below ``tau_rel * rms_norm``.
    lenient: the nearest registered exemplar is the own one and lies within
    ``lenient_tau_rel * rms_norm``.
    """
    if tau_rel <= 0 or lenient_tau_rel <= 0:
        raise ValueError("Reproduction thresholds must be positive")
    if len(registry) == 0:
        raise ValueError("Exemplar registry is empty")
    if judge not in (STRICT, LENIENT):
        raise ValueError(f"Unknown judge {judge!r}. Must be {STRICT!r} or {LENIENT!r}")

    exemplars = registry.matrix()
    trigger_index = {cond_id: i for i, cond_id in enumerate(registry.trigger_ids)}
    hits = 0
    total = 0
    for cond_id, latents in samples.items():
        dist = torch.cdist(latents.to(exemplars.dtype), exemplars)
        own = dist[:, trigger_index[cond_id]]
        if judge == STRICT:
            hit = own < tau_rel * registry.rms_norm
        else:
            nearest = dist.argmin(dim=1) == trigger_index[cond_id]
            hit = nearest & (own < lenient_tau_rel * registry.rms_norm)
        hits += int(hit.sum())
        total += latents.shape[0]
    return hits / total


def reproduction_rate(
    params: Parameters,
    masks: Gates | None,
    registry: ExemplarRegistry,
    tau_rel: float = 0.1,
    n_per_trigger: int = 125,
    n_steps: int = 4,
    seed: int = 0,
    judge: str = STRICT,
    lenient_tau_rel: float = 0.3,
    noise_source: NoiseSource = standard_normal_noise,
) -> float:
    """Exemplar reproduction rate over all triggers (lower is better).

    Args:
        params: Model weights
        masks: Gates, or None
        registry: Planted exemplars
        tau_rel: Distance threshold relative to the dataset RMS norm
        n_per_trigger: Samples per trigger
        n_steps: Sampler steps
        seed: Base seed
        judge: "strict" or "lenient"
        lenient_tau_rel: Threshold of the lenient judge
        noise_source: Callable (n, d, seed) -> z0

    Returns:
        Fraction in [0, 1]
    """
    if tau_rel <= 0:
        raise ValueError(f"tau_rel must be positive, got {tau_rel}")
    samples = trigger_samples(
        params, masks, registry, n_per_trigger, n_steps, seed, noise_source
    )
    return rate_from_samples(samples, registry, tau_rel, judge, lenient_tau_rel)


@dataclass
class MagnitudeProfile:
    """Distribution of latent norms.

    Attributes:
        norms: Per-sample l2 norms
        counts: Histogram counts (sum to the sample count)
        edges: Histogram bin edges
        mean: Mean norm
        median: Median norm
    """

    norms: np.ndarray
    counts: np.ndarray
    edges: np.ndarray
    mean: float
    median: float


def pooled_range(*latent_sets) -> tuple[float, float]:
    """Norm range covering every given latent set."""
    norms = np.concatenate([np.linalg.norm(_as_array(x), axis=1) for x in latent_sets])
    return float(norms.min()), float(norms.max())


def magnitude_profile(
    latents, bins: int = HISTOGRAM_BINS, value_range: tuple[float, float] | None = None
) -> MagnitudeProfile:
    """Norm distribution of a latent set.

    Args:
        latents: Array-like of shape (n, d)
        bins: Number of uniform histogram bins
        value_range: Histogram range; must cover every norm (use
            :func:`pooled_range` to compare several sets)

    Returns:
        MagnitudeProfile
    """
    array = _as_array(latents)
    if array.shape[0] == 0:
        raise ValueError("Cannot profile an empty latent set")
    norms = np.linalg.norm(array, axis=1)
    if value_range is None:
        value_range = (float(norms.min()), float(norms.max()))
    elif norms.min() < value_range[0] or norms.max() > value_range[1]:
        raise ValueError(f"Histogram range {value_range} does not cover every norm")
    counts, edges = np.histogram(norms, bins=bins, range=value_range)
    return MagnitudeProfile(
        norms=norms,
        counts=counts,
        edges=edges,
        mean=float(norms.mean()),
        median=float(np.median(norms)),
    )


def magnitude_shift(p: MagnitudeProfile, q: MagnitudeProfile) -> float:
    """1-Wasserstein distance between two empirical norm distributions."""
    if p.norms.size == 0 or q.norms.size == 0:
        raise ValueError("Cannot compare empty magnitude profiles")
    return float(wasserstein_distance(p.norms, q.norms))


@dataclass
class Projection:
    """Two latent sets projected onto the top-2 principal axes of their union.

    Attributes:
        coords_a: (n_a, 2) coordinates
        coords_b: (n_b, 2) coordinates
        components: (2, d) principal axes
        explained_variance_ratio: Share of total variance captured by the two axes
    """

    coords_a: np.ndarray
    coords_b: np.ndarray
    components: np.ndarray
    explained_variance_ratio: float


def project2d(latents_a, latents_b) -> Projection:
    """PCA fitted on the union of both sets, applied to each.

    Each axis is oriented so its largest-magnitude coordinate is positive.
    """
    a = _as_array(latents_a)
    b = _as_array(latents_b)
    union = np.concatenate([a, b])
    if union.shape[0] < 3:
        raise ValueError("project2d needs at least 3 points in total")
    if union.shape[1] < 2:
        raise ValueError("project2d needs latents of dimension >= 2")

    mean = union.mean(axis=0)
    centered = union - mean
    cov = centered.T @ centered / (union.shape[0] - 1)
    eigenvalues, eigenvectors = np.linalg.eigh(cov)
    total = float(eigenvalues.clip(min=0).sum())
    if total <= EIGENVALUE_FLOOR:
        raise ValueError("Degenerate input: the latents have zero variance")

    order = np.argsort(eigenvalues)[::-1][:2]
    components = eigenvectors[:, order].T
    for row in components:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1.0
    ratio = float(eigenvalues[order].clip(min=0).sum() / total)
    logger.debug(f"project2d: top-2 components explain {ratio:.3f} of the variance")
    return Projection(
        coords_a=(a - mean) @ components.T,
        coords_b=(b - mean) @ components.T,
        components=components,
        explained_variance_ratio=ratio,
    )


def decoupling_score(latents_a, latents_b) -> float:
    """Leave-one-out 1-NN balanced accuracy of telling the two sets apart.

    About 0.5 means the sets overlap; values near 1 mean they are separated.
    """
    a = _as_array(latents_a)
    b = _as_array(latents_b)
    if a.shape[0] < 10 or b.shape[0] < 10:
        raise ValueError("decoupling_score needs at least 10 latents per set")

    union = np.concatenate([a, b])
    labels = np.concatenate([np.zeros(a.shape[0], dtype=int), np.ones(b.shape[0], dtype=int)])
    dist = cdist(union, union)
    np.fill_diagonal(dist, np.inf)
    predicted = labels[dist.argmin(axis=1)]
    recall_a = float(np.mean(predicted[labels == 0] == 0))
    recall_b = float(np.mean(predicted[labels == 1] == 1))
    return 0.5 * (recall_a + recall_b)


def _psd_sqrt(matrix: np.ndarray) -> np.ndarray:
    eigenvalues, eigenvectors = np.linalg.eigh((matrix + matrix.T) / 2.0)
    eigenvalues = np.where(eigenvalues < EIGENVALUE_FLOOR, 0.0, eigenvalues)
    return (eigenvectors * np.sqrt(eigenvalues)) @ eigenvectors.T


def frechet_quality(generated, reference) -> float:
    """Fréchet distance between Gaussian fits of two latent sets.

    ``||mu_g - mu_r||^2 + tr(S_g + S_r - 2 (S_r^1/2 S_g S_r^1/2)^1/2)``
    """
    g = _as_array(generated)
    r = _as_array(reference)
    d = g.shape[1]
    if r.shape[1] != d:
        raise ValueError(f"Dimension mismatch: {d} vs {r.shape[1]}")
    if g.shape[0] < d + 1 or r.shape[0] < d + 1:
        raise ValueError(f"frechet_quality needs at least d+1={d + 1} samples per set")

    mu_g, mu_r = g.mean(axis=0), r.mean(axis=0)
    cov_g = np.cov(g, rowvar=False)
    cov_r = np.cov(r, rowvar=False)
    root_r = _psd_sqrt(cov_r)
    middle = root_r @ cov_g @ root_r
    eigenvalues = np.linalg.eigvalsh((middle + middle.T) / 2.0)
    eigenvalues = np.where(eigenvalues < EIGENVALUE_FLOOR, 0.0, eigenvalues)
    trace_term = np.trace(cov_g) + np.trace(cov_r) - 2.0 * np.sqrt(eigenvalues).sum()
    distance = float(np.sum((mu_g - mu_r) ** 2) + trace_term)
    return max(distance, 0.0)


def condition_alignment(latents, cond_ids, dataset: Dataset) -> float:
    """Fraction of latents whose nearest training row carries the same condition."""
    array = _as_array(latents)
    ids = np.asarray(cond_ids.tolist() if isinstance(cond_ids, torch.Tensor) else cond_ids)
    if array.shape[0] == 0 or array.shape[0] != ids.shape[0]:
        raise ValueError("condition_alignment needs one condition id per latent")
    reference = dataset.x.detach().cpu().numpy()
    nearest = cdist(array, reference).argmin(axis=1)
    return float(np.mean(dataset.cond_ids.numpy()[nearest] == ids))


@torch.no_grad()
def velocity_magnitudes(
    params: Parameters,
    masks: Gates | None,
    z0: torch.Tensor,
    n_steps: int,
    c,
) -> np.ndarray:
    """Per-sample mean velocity norm along the Euler trajectory."""
    trajectory = euler_sample(params, masks, z0, n_steps, c, return_trajectory=True).trajectory
    velocities = (trajectory[1:] - trajectory[:-1]) * n_steps
    return velocities.norm(dim=-1).mean(dim=0).cpu().numpy()
