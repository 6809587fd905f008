"""Learnable gates over feedforward units, attention heads and norm channels.

A :class:`MaskSet` holds real-valued logits ``M``. The relaxed gate values are
``sigmoid(M * gamma + delta)``; they multiply sublayer activations during
pruning. Hard 0/1 gates are only produced for reporting and evaluation.
"""

import logging
import math
from dataclasses import dataclass, field

import torch

from demem.models.spec import ModelSpec

logger = logging.getLogger(__name__)

FFN = "ffn"
ATTN = "attn"
NORM = "norm"
MASK_KINDS = (FFN, ATTN, NORM)
DEFAULT_KINDS = (FFN, NORM)

DEFAULT_GAMMA = 0.4
DEFAULT_DELTA = 1.0
DEFAULT_OPEN_PROBABILITY = 0.95


def kind_shape(spec: ModelSpec, kind: str) -> tuple[int, ...]:
    """Return the logit shape for one mask kind."""
    if kind == FFN:
        return (spec.n_blocks, spec.ffn_hidden)
    if kind == ATTN:
        return (spec.n_blocks, spec.n_heads)
    if kind == NORM:
        return (spec.n_blocks, 2, spec.token_dim)
    raise ValueError(f"Unknown mask kind: {kind!r}. Must be one of {MASK_KINDS}")


def normalize_kinds(kinds) -> tuple[str, ...]:
    """Validate a collection of mask kinds and return it in canonical order."""
    kinds = set(kinds)
    if not kinds:
        raise ValueError("At least one mask kind must be enabled")
    unknown = kinds - set(MASK_KINDS)
    if unknown:
        raise ValueError(f"Unknown mask kinds: {sorted(unknown)}. Must be one of {MASK_KINDS}")
    return tuple(kind for kind in MASK_KINDS if kind in kinds)


def default_logit(gamma: float = DEFAULT_GAMMA, delta: float = DEFAULT_DELTA) -> float:
    """Logit whose relaxed value is 0.95."""
    p = DEFAULT_OPEN_PROBABILITY
    return (math.log(p / (1.0 - p)) - delta) / gamma


@dataclass
class MaskSet:
    """Gate logits grouped by kind.

    Attributes:
        spec: Model the gates belong to
        logits: kind -> logit tensor, only for enabled kinds
        gamma: Relaxation slope (> 0)
        delta: Relaxation offset
    """

    spec: ModelSpec
    logits: dict[str, torch.Tensor]
    gamma: float = DEFAULT_GAMMA
    delta: float = DEFAULT_DELTA

    def __post_init__(self):
        """Validate kinds, shapes and relaxation constants."""
        if self.gamma <= 0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")
        kinds = normalize_kinds(self.logits.keys())
        self.logits = {kind: self.logits[kind] for kind in kinds}
        for kind, tensor in self.logits.items():
            expected = kind_shape(self.spec, kind)
            if tuple(tensor.shape) != expected:
                raise ValueError(
                    f"{kind} logits have shape {tuple(tensor.shape)}, expected {expected}"
                )

    @property
    def enabled_kinds(self) -> tuple[str, ...]:
        return tuple(self.logits)

    @property
    def cardinality(self) -> int:
        """|M|: number of gates across enabled kinds."""
        return sum(tensor.numel() for tensor in self.logits.values())

    def trainable(self) -> "MaskSet":
        """Return a copy whose logits are leaf tensors with gradients enabled."""
        return MaskSet(
            spec=self.spec,
            logits={k: v.detach().clone().requires_grad_(True) for k, v in self.logits.items()},
            gamma=self.gamma,
            delta=self.delta,
        )

    def detached(self) -> "MaskSet":
        return MaskSet(
            spec=self.spec,
            logits={k: v.detach().clone() for k, v in self.logits.items()},
            gamma=self.gamma,
            delta=self.delta,
        )


@dataclass
class Gates:
    """Gate values applied inside the network; absent kinds pass through."""

    spec: ModelSpec
    values: dict[str, torch.Tensor] = field(default_factory=dict)

    @property
    def enabled_kinds(self) -> tuple[str, ...]:
        return tuple(self.values)


@dataclass
class RelaxedMask(Gates):
    """Soft gates in (0, 1), produced by :func:`relax`."""

    @classmethod
    def open(cls, spec: ModelSpec, kinds=MASK_KINDS) -> "RelaxedMask":
        """All-ones gates: the network behaves as if unmasked."""
        kinds = normalize_kinds(kinds)
        return cls(
            spec=spec,
            values={k: torch.ones(kind_shape(spec, k), dtype=torch.float64) for k in kinds},
        )


@dataclass
class HardMask(Gates):
    """Binary gates (0 = deactivated, 1 = active)."""


@dataclass(frozen=True)
class Site:
    """Location of a gated activation.

    Attributes:
        kind: "ffn", "attn" or "norm"
        layer: Block index
        slot: Norm site inside the block (0 pre-attention, 1 pre-ffn)
    """

    kind: str
    layer: int
    slot: int = 0


def init_maskset(
    spec: ModelSpec,
    kinds=DEFAULT_KINDS,
    m0: float | None = None,
    gamma: float = DEFAULT_GAMMA,
    delta: float = DEFAULT_DELTA,
) -> MaskSet:
    """Create a mask set with every logit equal to ``m0``.

    Args:
        spec: Model the gates belong to
        kinds: Enabled mask kinds (nonempty subset of ffn/attn/norm)
        m0: Initial logit; defaults to the value whose relaxed gate is 0.95
        gamma: Relaxation slope
        delta: Relaxation offset

    Returns:
        New MaskSet
    """
    kinds = normalize_kinds(kinds)
    if m0 is None:
        m0 = default_logit(gamma, delta)
    logits = {k: torch.full(kind_shape(spec, k), float(m0), dtype=torch.float64) for k in kinds}
    return MaskSet(spec=spec, logits=logits, gamma=gamma, delta=delta)


def relax(maskset: MaskSet) -> RelaxedMask:
    """Relaxed sigmoid ``sigmoid(M * gamma + delta)`` per gate; differentiable."""
    return RelaxedMask(
        spec=maskset.spec,
        values={
            kind: torch.sigmoid(logits * maskset.gamma + maskset.delta)
            for kind, logits in maskset.logits.items()
        },
    )


def apply(gates: Gates | None, site: Site, activation: torch.Tensor) -> torch.Tensor:
    """Gate one activation.

    ffn: hidden activations ``(..., H)`` are multiplied unit-wise.
    attn: per-head outputs ``(..., A, S, head_dim)`` are scaled head-wise.
    norm: the learned scale vector ``(e,)`` is multiplied channel-wise.

    Args:
        gates: Gate values, or None for an unmasked network
        site: Where the activation lives
        activation: Tensor to gate

    Returns:
        Gated activation (the input itself when the kind is not enabled)
    """
    if gates is None or site.kind not in gates.values:
        return activation

    values = gates.values[site.kind]
    if site.kind == FFN:
        gate = values[site.layer]
        if activation.shape[-1] != gate.shape[0]:
            raise ValueError(
                f"ffn activation width {activation.shape[-1]} does not match {gate.shape[0]} gates"
            )
        return activation * gate
    if site.kind == ATTN:
        gate = values[site.layer]
        if activation.dim() < 3 or activation.shape[-3] != gate.shape[0]:
            raise ValueError(
                f"attention activation {tuple(activation.shape)} does not carry "
                f"{gate.shape[0]} heads on axis -3"
            )
        return activation * gate.view(-1, 1, 1)
    gate = values[site.layer, site.slot]
    if activation.shape != gate.shape:
        raise ValueError(
            f"norm scale shape {tuple(activation.shape)} does not match {tuple(gate.shape)} gates"
        )
    return activation * gate


def _flat_values(gates: Gates) -> torch.Tensor:
    return torch.cat([v.reshape(-1) for v in gates.values.values()])


def sparsity_penalty(maskset: MaskSet) -> torch.Tensor:
    """Mean relaxed gate value, ``||sigma_hat(M)||_1 / |M|``."""
    return _flat_values(relax(maskset)).sum() / maskset.cardinality


def binarize(relaxed: Gates, threshold: float = 0.5) -> HardMask:
    """Hard gates: 0 where the relaxed value is below ``threshold``, else 1.

    Ties go to active.
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    return HardMask(
        spec=relaxed.spec,
        values={
            kind: (value.detach() >= threshold).to(torch.float64)
            for kind, value in relaxed.values.items()
        },
    )


def deactivation_table(maskset: MaskSet, threshold: float = 0.5) -> list[dict]:
    """Rows ``{kind, count, deactivated, ratio}`` per enabled kind plus "total"."""
    hard = binarize(relax(maskset), threshold)
    rows = []
    total_count = 0
    total_off = 0
    for kind, value in hard.values.items():
        count = value.numel()
        off = int((value == 0).sum().item())
        rows.append({"kind": kind, "count": count, "deactivated": off, "ratio": off / count})
        total_count += count
        total_off += off
    rows.append(
        {
            "kind": "total",
            "count": total_count,
            "deactivated": total_off,
            "ratio": total_off / total_count,
        }
    )
    return rows


def deactivation_ratios(maskset: MaskSet, threshold: float = 0.5) -> dict[str, float]:
    """Fraction of gates below ``threshold`` per enabled kind and in total."""
    ratios = {row["kind"]: row["ratio"] for row in deactivation_table(maskset, threshold)}
    logger.debug(f"Deactivation ratios at threshold {threshold}: {ratios}")
    return ratios
