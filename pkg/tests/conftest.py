import json

import pytest
import torch

from demem.data.memoria import CorpusConfig
from demem.models.flownet import Parameters, build_model
from demem.models.spec import ModelSpec


@pytest.fixture
def tiny_spec():
    """Small architecture that keeps float64 gradient checks fast."""
    return ModelSpec(
        latent_dim=8, token_dim=4, n_blocks=2, n_heads=2, ffn_hidden=6, cond_vocab=6, time_freqs=2
    )


@pytest.fixture
def with_random_head():
    """Return a helper that replaces the zero output head with random weights.

    A freshly built model has a zero head (identity sampler), which hides every
    gradient flowing through the blocks.
    """

    def randomize(params: Parameters, seed: int = 123, scale: float = 0.5) -> Parameters:
        generator = torch.Generator().manual_seed(seed)
        tensors = dict(params.tensors)
        for key in ("head.weight", "head.bias"):
            shape = tensors[key].shape
            unit = torch.rand(shape, generator=generator, dtype=torch.float64)
            tensors[key] = (2.0 * unit - 1.0) * scale
        return Parameters(params.spec, tensors)

    return randomize


@pytest.fixture
def lively_params(tiny_spec, with_random_head):
    """Tiny model with a random output head."""
    return with_random_head(build_model(tiny_spec, seed=7))


@pytest.fixture
def tiny_corpus_cfg():
    """Corpus matching ``tiny_spec``: 3 neutral and 2 trigger conditions."""
    return CorpusConfig(
        d=8, n_neutral_conditions=3, samples_per_neutral=40, k=2, duplication=20, seed=0
    )


@pytest.fixture
def tiny_run_dict(tiny_spec, tiny_corpus_cfg):
    """Run config small enough for end-to-end tests, as JSON data."""
    return {
        "model": tiny_spec.to_dict(),
        "corpus": tiny_corpus_cfg.to_dict(),
        "train": {"steps": 30, "lr": 3e-3, "batch": 32},
        "prune": {"steps": 3, "batch": 3, "n_steps": 2, "neutral_set_size": 6},
        "retrain": {"steps": 2, "batch": 3, "n_steps": 2, "neutral_set_size": 6},
        "eval": {
            "n_per_trigger": 10,
            "n_per_neutral": 10,
            "heldout_per_neutral": 20,
            "n_steps": 2,
        },
        "levels": ["weak", "strong"],
        "retrain_levels": ["strong"],
        "ablation_kinds": [["attn"]],
        "ablation_level": "strong",
        "seeds": [0, 1],
    }


@pytest.fixture
def tiny_config_file(tiny_run_dict, tmp_path):
    """Path of a JSON file holding ``tiny_run_dict``."""
    path = tmp_path / "run.json"
    path.write_text(json.dumps(tiny_run_dict))
    return path
