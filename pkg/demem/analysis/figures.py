"""SVG figures and CSV dumps of evaluation latents."""

import io
import logging
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from demem.analysis.evaluation import BASE, EvaluationSamples  # noqa: E402
from demem.analysis.metrics import (  # noqa: E402
    MagnitudeProfile,
    Projection,
    magnitude_profile,
    pooled_range,
    project2d,
)
from demem.models import storage  # noqa: E402

logger = logging.getLogger(__name__)

# Fixed salt and no timestamp keep SVG output byte-stable across runs
plt.rcParams["svg.hashsalt"] = "demem"


def _save_svg(fig, path: Path) -> Path:
    buffer = io.BytesIO()
    fig.savefig(buffer, format="svg", metadata={"Date": None})
    plt.close(fig)
    storage.atomic_write_bytes(Path(path), buffer.getvalue())
    return Path(path)


def projection_scatter(
    path: Path, projection: Projection, label_a: str, label_b: str, title: str
) -> Path:
    """Scatter two projected latent sets in one plane."""
    fig, ax = plt.subplots(figsize=(6, 5))
    ax.scatter(projection.coords_a[:, 0], projection.coords_a[:, 1], s=6, alpha=0.6, label=label_a)
    ax.scatter(projection.coords_b[:, 0], projection.coords_b[:, 1], s=6, alpha=0.6, label=label_b)
    ax.set_title(f"{title} ({projection.explained_variance_ratio:.0%} of variance)")
    ax.set_xlabel("PC 1")
    ax.set_ylabel("PC 2")
    ax.legend()
    ax.grid(True, alpha=0.3)
    return _save_svg(fig, path)


def magnitude_histograms(path: Path, profiles: dict[str, MagnitudeProfile], title: str) -> Path:
    """Step histograms of several magnitude profiles (shared bins expected)."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, profile in profiles.items():
        ax.stairs(profile.counts, profile.edges, label=label)
    ax.set_title(title)
    ax.set_xlabel("latent norm")
    ax.set_ylabel("count")
    ax.legend()
    ax.grid(True, alpha=0.3)
    return _save_svg(fig, path)


def write_projection_csv(path: Path, projection: Projection, label_a: str, label_b: str) -> None:
    rows = [
        {"model": label_a, "pc1": float(x), "pc2": float(y)} for x, y in projection.coords_a
    ] + [{"model": label_b, "pc1": float(x), "pc2": float(y)} for x, y in projection.coords_b]
    storage.write_csv(path, rows, ["model", "pc1", "pc2"])


def write_norms_csv(path: Path, profiles: dict[str, MagnitudeProfile]) -> None:
    rows = [
        {"set": label, "norm": float(norm)}
        for label, profile in profiles.items()
        for norm in profile.norms
    ]
    storage.write_csv(path, rows, ["set", "norm"])


def emit_figures(directory: Path, samples: EvaluationSamples) -> list[Path]:
    """Write projection scatters and magnitude histograms for every model.

    Each non-base model gets a trigger and a neutral scatter against the base
    model. One histogram compares trigger norms of every model with the base
    model's neutral norms.

    Args:
        directory: Output directory
        samples: Latents collected by :func:`evaluate_models`

    Returns:
        Paths of the written SVG files
    """
    directory = Path(directory)
    written = []
    for label in samples.trigger:
        if label == BASE:
            continue
        for role, latents in (("trigger", samples.trigger), ("neutral", samples.neutral)):
            projection = project2d(latents[BASE], latents[label])
            stem = f"projection_{role}_{label}"
            written.append(
                projection_scatter(
                    directory / f"{stem}.svg", projection, BASE, label, f"{role}: {BASE} vs {label}"
                )
            )
            write_projection_csv(directory / f"{stem}.csv", projection, BASE, label)

    sets = {f"trigger/{label}": latents for label, latents in samples.trigger.items()}
    sets[f"neutral/{BASE}"] = samples.neutral[BASE]
    value_range = pooled_range(*sets.values())
    profiles = {name: magnitude_profile(latents, value_range=value_range) for name, latents in sets.items()}
    written.append(
        magnitude_histograms(directory / "magnitudes.svg", profiles, "latent magnitudes")
    )
    write_norms_csv(directory / "magnitudes.csv", profiles)
    logger.info(f"Wrote {len(written)} figures to {directory}")
    return written
