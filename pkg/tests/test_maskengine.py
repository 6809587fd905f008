"""Tests for learnable gates."""

import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from demem.models.flownet import Parameters, velocity
from demem.models.maskengine import (
    ATTN,
    FFN,
    NORM,
    Gates,
    HardMask,
    MaskSet,
    RelaxedMask,
    Site,
    apply,
    binarize,
    deactivation_ratios,
    deactivation_table,
    default_logit,
    init_maskset,
    normalize_kinds,
    relax,
    sparsity_penalty,
)
from demem.models.spec import ModelSpec


def _with(params: Parameters, key: str, fill) -> Parameters:
    tensors = {k: v.clone() for k, v in params.tensors.items()}
    fill(tensors[key])
    return Parameters(params.spec, tensors)


class TestInitMaskset:
    """Test cases for mask initialization."""

    def test_ffn_cardinality(self):
        """Test |M| for ffn gates of the default rig (2 x 16)."""
        assert init_maskset(ModelSpec(), [FFN]).cardinality == 32

    def test_all_kinds_cardinality(self):
        """Test |M| with every kind enabled (32 + 4 + 32)."""
        assert init_maskset(ModelSpec(), [FFN, ATTN, NORM]).cardinality == 68

    def test_default_logit(self):
        """Test the default initial logit for gamma=0.4, delta=1."""
        assert default_logit() == pytest.approx((math.log(19.0) - 1.0) / 0.4)
        assert default_logit() == pytest.approx(4.861, abs=1e-3)

    def test_fresh_masks_open_at_095(self):
        """Test that fresh gates relax to 0.95."""
        relaxed = relax(init_maskset(ModelSpec()))

        for value in relaxed.values.values():
            assert torch.allclose(value, torch.full_like(value, 0.95))

    def test_default_kinds(self):
        """Test that ffn and norm gates are enabled by default."""
        assert init_maskset(ModelSpec()).enabled_kinds == (FFN, NORM)

    def test_empty_kinds(self):
        """Test that at least one kind is required."""
        with pytest.raises(ValueError, match="At least one mask kind"):
            init_maskset(ModelSpec(), [])

    def test_unknown_kind(self):
        """Test that unknown kinds are rejected."""
        with pytest.raises(ValueError, match="Unknown mask kinds"):
            normalize_kinds(["ffn", "embedding"])

    def test_kinds_canonical_order(self):
        """Test that kinds are returned in a fixed order."""
        assert normalize_kinds(["norm", "attn"]) == (ATTN, NORM)

    def test_logit_shape_validation(self, tiny_spec):
        """Test that logits must match their kind's shape."""
        with pytest.raises(ValueError, match="ffn logits have shape"):
            MaskSet(tiny_spec, {FFN: torch.zeros(3, 3, dtype=torch.float64)})

    def test_gamma_must_be_positive(self, tiny_spec):
        """Test relaxation slope validation."""
        with pytest.raises(ValueError, match="gamma must be positive"):
            init_maskset(tiny_spec, gamma=0.0)


class TestRelax:
    """Test cases for the relaxed sigmoid."""

    def test_zero_logits(self):
        """Test that M=0 relaxes to sigmoid(1)."""
        relaxed = relax(init_maskset(ModelSpec(), m0=0.0))

        assert relaxed.values[FFN][0, 0].item() == pytest.approx(0.731059, abs=1e-6)

    def test_saturation(self):
        """Test the limits at +/-50."""
        high = relax(init_maskset(ModelSpec(), [FFN], m0=50.0)).values[FFN]
        low = relax(init_maskset(ModelSpec(), [FFN], m0=-50.0)).values[FFN]

        assert torch.all(high > 1 - 1e-6)
        assert torch.all(low < 1e-6)

    def test_differentiable(self, tiny_spec):
        """Test that gradients flow back to the logits."""
        maskset = init_maskset(tiny_spec).trainable()
        relax(maskset).values[FFN].sum().backward()

        assert maskset.logits[FFN].grad is not None
        assert torch.all(maskset.logits[FFN].grad > 0)

    @settings(max_examples=50, deadline=None)
    @given(
        a=st.floats(min_value=-50, max_value=50),
        b=st.floats(min_value=-50, max_value=50),
    )
    def test_monotone_in_logit(self, a, b):
        """Test that larger logits never give smaller gate values."""
        spec = ModelSpec()
        low, high = sorted((a, b))

        relaxed_low = relax(init_maskset(spec, [FFN], m0=low)).values[FFN][0, 0].item()
        relaxed_high = relax(init_maskset(spec, [FFN], m0=high)).values[FFN][0, 0].item()

        assert 0.0 <= relaxed_low <= relaxed_high <= 1.0


class TestApply:
    """Test cases for gating activations inside the network."""

    @pytest.fixture
    def z(self):
        """Batch of latents."""
        return torch.randn(3, 8, generator=torch.Generator().manual_seed(5), dtype=torch.float64)

    def test_none_passes_through(self):
        """Test that no gates leave the activation untouched."""
        activation = torch.ones(2, 6, dtype=torch.float64)

        assert apply(None, Site(FFN, 0), activation) is activation

    def test_disabled_kind_passes_through(self, tiny_spec):
        """Test that a kind without gates is not modified."""
        gates = RelaxedMask.open(tiny_spec, [FFN])
        activation = torch.ones(2, 2, 4, 2, dtype=torch.float64)

        assert apply(gates, Site(ATTN, 0), activation) is activation

    def test_shape_mismatch(self, tiny_spec):
        """Test that activations of the wrong width are rejected."""
        gates = RelaxedMask.open(tiny_spec, [FFN])

        with pytest.raises(ValueError, match="does not match"):
            apply(gates, Site(FFN, 0), torch.ones(2, 5, dtype=torch.float64))

    def test_open_gates_identity_at_every_site(self, lively_params, z):
        """Test that all-one gates of each single kind leave the output unchanged."""
        plain = velocity(lively_params, None, z, 0.4, 1)

        for kind in (FFN, ATTN, NORM):
            gated = velocity(lively_params, RelaxedMask.open(lively_params.spec, [kind]), z, 0.4, 1)
            assert torch.allclose(gated, plain, rtol=0, atol=1e-12), kind

    def test_zero_ffn_gates_leave_only_bias(self, lively_params, tiny_spec, z):
        """Test that closing a block's ffn gates equals zeroing its output weights."""
        values = torch.ones(tiny_spec.n_blocks, tiny_spec.ffn_hidden, dtype=torch.float64)
        values[1] = 0.0
        gates = Gates(tiny_spec, {FFN: values})
        reference = _with(lively_params, "blocks.1.ffn.w2", lambda t: t.zero_())

        gated = velocity(lively_params, gates, z, 0.6, 2)
        expected = velocity(reference, None, z, 0.6, 2)

        assert torch.allclose(gated, expected, rtol=0, atol=1e-10)

    def test_closed_head_equals_zeroed_value_projection(self, lively_params, tiny_spec, z):
        """Test that gating one of two heads to 0 equals zeroing its value projection."""
        values = torch.ones(tiny_spec.n_blocks, tiny_spec.n_heads, dtype=torch.float64)
        values[0, 1] = 0.0
        gates = HardMask(tiny_spec, {ATTN: values})
        reference = _with(lively_params, "blocks.0.attn.v", lambda t: t[1].zero_())

        gated = velocity(lively_params, gates, z, 0.2, 0)
        expected = velocity(reference, None, z, 0.2, 0)

        assert torch.allclose(gated, expected, rtol=0, atol=1e-10)

    def test_norm_gates_scale_channels(self, lively_params, tiny_spec, z):
        """Test that a norm gate multiplies the learned scale."""
        values = torch.ones(tiny_spec.n_blocks, 2, tiny_spec.token_dim, dtype=torch.float64)
        values[0, 1, 2] = 0.25
        gates = Gates(tiny_spec, {NORM: values})
        reference = _with(lively_params, "blocks.0.norm.scale", lambda t: t[1, 2].mul_(0.25))

        gated = velocity(lively_params, gates, z, 0.5, 3)
        expected = velocity(reference, None, z, 0.5, 3)

        assert torch.allclose(gated, expected, rtol=0, atol=1e-10)


class TestSparsityPenalty:
    """Test cases for the sparsity penalty."""

    def test_zero_logits(self):
        """Test that equal logits give sigmoid(1)."""
        penalty = sparsity_penalty(init_maskset(ModelSpec(), m0=0.0))

        assert penalty.item() == pytest.approx(0.731059, abs=1e-6)

    def test_saturated_halves(self, tiny_spec):
        """Test that half open and half closed gates give 0.5."""
        maskset = init_maskset(tiny_spec, [FFN], m0=50.0)
        maskset.logits[FFN][1] = -50.0

        assert sparsity_penalty(maskset).item() == pytest.approx(0.5, abs=1e-6)

    def test_in_unit_interval(self, tiny_spec):
        """Test that the penalty is a mean of gate values."""
        logits = torch.linspace(-5, 5, 12, dtype=torch.float64).reshape(2, 6)
        penalty = sparsity_penalty(MaskSet(tiny_spec, {FFN: logits})).item()

        assert 0.0 < penalty < 1.0


class TestBinarize:
    """Test cases for hard gates."""

    def test_threshold_and_tie(self, tiny_spec):
        """Test that values at or above the threshold stay active."""
        values = torch.tensor([[0.731, 0.5, 0.499, 0.0, 1.0, 0.2]] * 2, dtype=torch.float64)
        hard = binarize(RelaxedMask(tiny_spec, {FFN: values}))

        assert hard.values[FFN][0].tolist() == [1.0, 1.0, 0.0, 0.0, 1.0, 0.0]
        assert isinstance(hard, HardMask)

    def test_fresh_masks_all_active(self):
        """Test that fresh 0.95 gates binarize to all ones."""
        hard = binarize(relax(init_maskset(ModelSpec())))

        assert all(torch.all(v == 1.0) for v in hard.values.values())

    def test_invalid_threshold(self, tiny_spec):
        """Test that the threshold must lie strictly inside (0, 1)."""
        with pytest.raises(ValueError, match="threshold"):
            binarize(RelaxedMask.open(tiny_spec), threshold=1.0)


class TestDeactivation:
    """Test cases for deactivation ratios."""

    def test_open_masks(self):
        """Test that fresh masks deactivate nothing."""
        ratios = deactivation_ratios(init_maskset(ModelSpec(), [FFN, ATTN, NORM]))

        assert ratios == {FFN: 0.0, ATTN: 0.0, NORM: 0.0, "total": 0.0}

    def test_quarter_of_ffn(self):
        """Test 8 of 32 ffn logits at -50."""
        maskset = init_maskset(ModelSpec())
        maskset.logits[FFN][0, :8] = -50.0

        ratios = deactivation_ratios(maskset)

        assert ratios[FFN] == 0.25
        assert ratios[NORM] == 0.0
        assert ratios["total"] == pytest.approx(8 / 64)

    def test_disabled_kinds_omitted(self):
        """Test that only enabled kinds are reported."""
        ratios = deactivation_ratios(init_maskset(ModelSpec(), [ATTN]))

        assert set(ratios) == {ATTN, "total"}

    def test_table_counts(self):
        """Test the per-kind rows of the deactivation table."""
        maskset = init_maskset(ModelSpec(), [FFN, ATTN])
        maskset.logits[ATTN][1, 0] = -50.0

        rows = {row["kind"]: row for row in deactivation_table(maskset)}

        assert rows[ATTN]["count"] == 4
        assert rows[ATTN]["deactivated"] == 1
        assert rows["total"]["count"] == 36
