"""Tests for model-family evaluation and its figures."""

import json

import pytest
import torch

from demem.analysis.evaluation import BASE, EvalConfig, Report, evaluate_models
from demem.analysis.figures import emit_figures
from demem.data.memoria import heldout_neutral, synth_corpus
from demem.models import storage
from demem.models.maskengine import FFN, HardMask


@pytest.fixture
def eval_cfg():
    """Small sample counts that still satisfy every metric's minimum."""
    return EvalConfig(n_per_trigger=10, n_per_neutral=10, heldout_per_neutral=20, n_steps=2)


@pytest.fixture
def evaluated(lively_params, tiny_spec, tiny_corpus_cfg, eval_cfg):
    """Report and samples for the base model and one with a closed ffn block."""
    dataset, registry = synth_corpus(tiny_corpus_cfg)
    heldout = heldout_neutral(tiny_corpus_cfg, eval_cfg.heldout_per_neutral, eval_cfg.heldout_seed)
    values = torch.ones(tiny_spec.n_blocks, tiny_spec.ffn_hidden, dtype=torch.float64)
    values[0] = 0.0
    models = {
        BASE: (lively_params, None),
        "pruned": (lively_params, HardMask(tiny_spec, {FFN: values})),
    }
    return evaluate_models(models, dataset, registry, heldout, eval_cfg)


class TestEvalConfig:
    """Test cases for evaluation settings."""

    def test_defaults(self):
        """Test the default sample sizes."""
        cfg = EvalConfig()

        assert cfg.n_per_trigger == 125
        assert cfg.tau_rel == 0.1
        assert cfg.lenient_tau_rel == 0.3

    def test_invalid_threshold(self):
        """Test that thresholds must be positive."""
        with pytest.raises(ValueError, match="positive"):
            EvalConfig(tau_rel=-0.1)

    def test_invalid_counts(self):
        """Test that sample counts must be positive."""
        with pytest.raises(ValueError, match="Sample counts"):
            EvalConfig(n_per_neutral=0)

    def test_round_trip(self):
        """Test dictionary conversion."""
        cfg = EvalConfig(n_steps=8, seed=3)

        assert EvalConfig.from_dict(cfg.to_dict()) == cfg


class TestReport:
    """Test cases for the report container."""

    def test_rate_out_of_range(self):
        """Test that rates must be fractions."""
        with pytest.raises(ValueError, match="not in"):
            Report(reproduction={BASE: 1.5})

    def test_json_round_trip(self):
        """Test that a report survives JSON serialization."""
        report = Report(
            reproduction={BASE: 0.9, "strong": 0.1},
            magnitude={BASE: {"trigger_shift": 1.25}},
            digests={"base": "abc"},
        )

        assert Report.from_dict(json.loads(json.dumps(report.to_dict()))) == report


class TestEvaluateModels:
    """Test cases for evaluating a family of models."""

    def test_requires_base(self, lively_params, tiny_corpus_cfg, eval_cfg):
        """Test that the base model is mandatory."""
        dataset, registry = synth_corpus(tiny_corpus_cfg)

        with pytest.raises(ValueError, match="must include"):
            evaluate_models({"pruned": (lively_params, None)}, dataset, registry, dataset, eval_cfg)

    def test_every_model_measured(self, evaluated):
        """Test that per-model metrics exist for every label."""
        report, _ = evaluated

        for name in ("reproduction", "reproduction_lenient", "quality", "alignment", "magnitude", "velocity"):
            assert set(getattr(report, name)) == {BASE, "pruned"}, name
        assert set(report.decoupling) == {"pruned"}
        assert set(report.explained_variance) == {"pruned"}

    def test_values_in_range(self, evaluated):
        """Test the ranges of rates and scores."""
        report, _ = evaluated

        for label in (BASE, "pruned"):
            assert 0.0 <= report.reproduction[label] <= 1.0
            assert report.quality[label] >= 0.0
            assert report.velocity[label]["trigger"] > 0.0
        for role in ("trigger", "neutral"):
            assert 0.0 <= report.decoupling["pruned"][role] <= 1.0
            assert 0.0 < report.explained_variance["pruned"][role] <= 1.0

    def test_base_has_no_neutral_shift(self, evaluated):
        """Test that shifts are measured against the base neutral profile."""
        report, _ = evaluated

        assert report.magnitude[BASE]["neutral_shift"] == 0.0

    def test_samples_collected(self, evaluated):
        """Test the shapes of the kept latents."""
        _, samples = evaluated

        assert samples.trigger[BASE].shape == (2 * 10, 8)
        assert samples.neutral["pruned"].shape == (3 * 10, 8)
        assert samples.neutral_ids.tolist() == [0] * 10 + [1] * 10 + [2] * 10

    def test_shared_noise(self, lively_params, tiny_corpus_cfg, eval_cfg):
        """Test that equal models give equal samples and metrics."""
        dataset, registry = synth_corpus(tiny_corpus_cfg)
        heldout = heldout_neutral(tiny_corpus_cfg, 20, eval_cfg.heldout_seed)

        report, samples = evaluate_models(
            {BASE: (lively_params, None), "copy": (lively_params, None)},
            dataset,
            registry,
            heldout,
            eval_cfg,
        )

        assert torch.equal(samples.trigger[BASE], samples.trigger["copy"])
        assert report.quality[BASE] == report.quality["copy"]

    def test_unchanged_model_overlaps_base(self, lively_params, tiny_corpus_cfg):
        """Test that a copy of the base model is not told apart from it."""
        dataset, registry = synth_corpus(tiny_corpus_cfg)
        cfg = EvalConfig(n_per_trigger=60, n_per_neutral=40, heldout_per_neutral=20, n_steps=2)
        heldout = heldout_neutral(tiny_corpus_cfg, cfg.heldout_per_neutral, cfg.heldout_seed)

        report, _ = evaluate_models(
            {BASE: (lively_params, None), "copy": (lively_params, None)},
            dataset,
            registry,
            heldout,
            cfg,
        )

        for role in ("trigger", "neutral"):
            assert 0.35 <= report.decoupling["copy"][role] <= 0.65, role


class TestFigures:
    """Test cases for SVG figures and CSV dumps."""

    def test_files_written(self, evaluated, tmp_path):
        """Test that scatters, histograms and their CSVs are written."""
        _, samples = evaluated

        written = emit_figures(tmp_path, samples)

        assert sorted(p.name for p in written) == [
            "magnitudes.svg",
            "projection_neutral_pruned.svg",
            "projection_trigger_pruned.svg",
        ]
        for path in written:
            assert path.read_text().lstrip().startswith("<?xml")
        rows = storage.read_csv(tmp_path / "projection_trigger_pruned.csv")
        assert len(rows) == 2 * 20
        assert {row["model"] for row in rows} == {BASE, "pruned"}
        norms = storage.read_csv(tmp_path / "magnitudes.csv")
        assert {row["set"] for row in norms} == {"trigger/base", "trigger/pruned", "neutral/base"}

    def test_svg_byte_stable(self, evaluated, tmp_path):
        """Test that rendering twice gives identical SVG bytes."""
        _, samples = evaluated

        emit_figures(tmp_path / "a", samples)
        emit_figures(tmp_path / "b", samples)

        for name in ("magnitudes.svg", "projection_trigger_pruned.svg"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
