"""Conditional velocity network, Euler sampler and flow-matching training.

The latent ``z`` (dimension d) is reshaped into S tokens of width e. Each block
is a pre-norm multi-head self-attention followed by a pre-norm two-layer
feedforward network with GELU. Condition, time and token-position embeddings
are added to every token before the first block.

The output head predicts the displacement from z to the clean latent; the
velocity is that displacement divided by the remaining time 1 - t (floored at
``TIME_FLOOR``). A zero head is the zero field. Sampling integrates the
velocity field with explicit Euler steps from t=0 (noise) to t=1 (data).
"""

import hashlib
import logging
import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch.utils.checkpoint import checkpoint
from tqdm.auto import tqdm

from demem.errors import NumericalError
from demem.models.maskengine import ATTN, FFN, NORM, Gates, Site, apply
from demem.models.spec import Condition, ModelSpec

logger = logging.getLogger(__name__)

DTYPE = torch.float64
LAYER_NORM_EPS = 1e-5
TIME_FLOOR = 0.05
LR_FLOOR_RATIO = 0.01

ConditionLike = Condition | int | Sequence[int] | Sequence[Condition] | torch.Tensor


def parameter_shapes(spec: ModelSpec) -> dict[str, tuple[int, ...]]:
    """Key -> shape for every array of a model, in storage order."""
    e, s, a, dh, h = (
        spec.token_dim,
        spec.n_tokens,
        spec.n_heads,
        spec.head_dim,
        spec.ffn_hidden,
    )
    shapes: dict[str, tuple[int, ...]] = {
        "cond_embed": (spec.cond_vocab, e),
        "pos_embed": (s, e),
        "time_proj.weight": (2 * spec.time_freqs, e),
        "time_proj.bias": (e,),
    }
    for layer in range(spec.n_blocks):
        prefix = f"blocks.{layer}"
        shapes[f"{prefix}.norm.scale"] = (2, e)
        shapes[f"{prefix}.norm.offset"] = (2, e)
        shapes[f"{prefix}.attn.q"] = (a, e, dh)
        shapes[f"{prefix}.attn.k"] = (a, e, dh)
        shapes[f"{prefix}.attn.v"] = (a, e, dh)
        shapes[f"{prefix}.attn.o"] = (a, dh, e)
        shapes[f"{prefix}.ffn.w1"] = (e, h)
        shapes[f"{prefix}.ffn.b1"] = (h,)
        shapes[f"{prefix}.ffn.w2"] = (h, e)
        shapes[f"{prefix}.ffn.b2"] = (e,)
    shapes["head.weight"] = (s, e, e)
    shapes["head.bias"] = (s, e)
    return shapes


def _init_bound(spec: ModelSpec, key: str) -> float | None:
    """Uniform half-width for a key; None for constant-initialized arrays.

    Fan-in rule: bound = 1 / sqrt(fan_in). Embedding tables see a one-hot
    input (fan-in 1). The output head is zero so the untrained sampler is the
    identity map.
    """
    name = key.rsplit(".", 1)[-1] if key.startswith("blocks.") else key
    if key in ("cond_embed", "pos_embed"):
        return 1.0
    if key.startswith("time_proj."):
        return 1.0 / math.sqrt(2 * spec.time_freqs)
    if key.startswith("head."):
        return None
    if name in ("scale", "offset"):
        return None
    if name in ("q", "k", "v", "o", "w1", "b1"):
        return 1.0 / math.sqrt(spec.token_dim)
    if name in ("w2", "b2"):
        return 1.0 / math.sqrt(spec.ffn_hidden)
    raise ValueError(f"No initialization rule for parameter {key!r}")


@dataclass
class Parameters:
    """Flat, keyed weight store of the velocity network.

    Attributes:
        spec: Architecture the arrays belong to
        tensors: key -> float64 array, keys and shapes fixed by ``spec``
    """

    spec: ModelSpec
    tensors: dict[str, torch.Tensor]

    def __post_init__(self):
        """Validate keys, shapes and finiteness."""
        expected = parameter_shapes(self.spec)
        if set(self.tensors) != set(expected):
            missing = sorted(set(expected) - set(self.tensors))
            extra = sorted(set(self.tensors) - set(expected))
            raise ValueError(f"Parameter keys mismatch (missing={missing}, unexpected={extra})")
        self.tensors = {key: self.tensors[key] for key in expected}
        for key, shape in expected.items():
            tensor = self.tensors[key]
            if tuple(tensor.shape) != shape:
                raise ValueError(f"{key} has shape {tuple(tensor.shape)}, expected {shape}")
            if not torch.isfinite(tensor).all():
                raise NumericalError(f"Parameter {key} contains non-finite values")

    def __getitem__(self, key: str) -> torch.Tensor:
        return self.tensors[key]

    def trainable(self) -> "Parameters":
        """Copy with every array a fresh leaf that requires gradients."""
        return Parameters(
            self.spec,
            {k: v.detach().clone().requires_grad_(True) for k, v in self.tensors.items()},
        )

    def detached(self) -> "Parameters":
        return Parameters(self.spec, {k: v.detach().clone() for k, v in self.tensors.items()})

    def digest(self) -> str:
        """SHA-256 over the float64 bytes of every array in key order."""
        sha = hashlib.sha256()
        for key, tensor in self.tensors.items():
            sha.update(key.encode())
            sha.update(tensor.detach().to(DTYPE).contiguous().numpy().tobytes())
        return sha.hexdigest()


@dataclass
class SampleResult:
    """Output of the Euler sampler.

    Attributes:
        z_n: Denoised latents, shape (B, d)
        trajectory: z_0..z_N stacked to (N+1, B, d) when requested
    """

    z_n: torch.Tensor
    trajectory: torch.Tensor | None = None


@dataclass
class TrainConfig:
    """Base-model training settings."""

    steps: int = 5000
    lr: float = 3e-3
    batch: int = 256
    seed: int = 0

    def __post_init__(self):
        """Validate training settings."""
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.batch < 1:
            raise ValueError(f"batch must be >= 1, got {self.batch}")

    def to_dict(self) -> dict:
        return {"steps": self.steps, "lr": self.lr, "batch": self.batch, "seed": self.seed}

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        defaults = cls()
        return cls(**{key: data.get(key, value) for key, value in defaults.to_dict().items()})


@dataclass
class TrainingLog:
    """Per-step losses of a training run."""

    steps: list[int] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)

    def record(self, step: int, loss: float) -> None:
        self.steps.append(step)
        self.losses.append(loss)

    def _window_mean(self, values: list[float]) -> float:
        return sum(values) / len(values)

    def initial_loss(self, window: int = 50) -> float:
        """Mean loss over the first ``window`` steps."""
        if not self.losses:
            raise ValueError("Training log is empty")
        return self._window_mean(self.losses[:window])

    def final_loss(self, window: int = 50) -> float:
        """Mean loss over the last ``window`` steps."""
        if not self.losses:
            raise ValueError("Training log is empty")
        return self._window_mean(self.losses[-window:])

    def rows(self) -> list[dict]:
        return [{"step": s, "loss": loss} for s, loss in zip(self.steps, self.losses, strict=True)]


def build_model(spec: ModelSpec, seed: int) -> Parameters:
    """Deterministically initialize a model.

    Args:
        spec: Architecture descriptor
        seed: Initialization seed; equal (spec, seed) give byte-identical stores

    Returns:
        Freshly initialized Parameters
    """
    generator = torch.Generator().manual_seed(seed)
    tensors = {}
    for key, shape in parameter_shapes(spec).items():
        bound = _init_bound(spec, key)
        if bound is None:
            fill = 1.0 if key.endswith(".scale") else 0.0
            tensors[key] = torch.full(shape, fill, dtype=DTYPE)
        else:
            unit = torch.rand(shape, generator=generator, dtype=DTYPE)
            tensors[key] = (2.0 * unit - 1.0) * bound
    return Parameters(spec, tensors)


def condition_ids(c: ConditionLike, batch: int, spec: ModelSpec) -> torch.Tensor:
    """Normalize condition input to a (batch,) LongTensor and range-check it."""
    if isinstance(c, Condition):
        ids = torch.full((batch,), c.id, dtype=torch.long)
    elif isinstance(c, int):
        ids = torch.full((batch,), c, dtype=torch.long)
    elif isinstance(c, torch.Tensor):
        ids = c.to(torch.long).reshape(-1)
        if ids.numel() == 1 and batch != 1:
            ids = ids.expand(batch)
    else:
        ids = torch.tensor(
            [item.id if isinstance(item, Condition) else int(item) for item in c],
            dtype=torch.long,
        )
    if ids.shape[0] != batch:
        raise ValueError(f"Got {ids.shape[0]} conditions for a batch of {batch}")
    if ids.numel() and (int(ids.max()) >= spec.cond_vocab or int(ids.min()) < 0):
        raise ValueError(
            f"Condition id out of range [0, {spec.cond_vocab}): {ids.tolist()}"
        )
    return ids


def _time_features(t: torch.Tensor, n_freqs: int) -> torch.Tensor:
    freqs = math.pi * 2.0 ** torch.arange(n_freqs, dtype=DTYPE)
    angles = t[:, None] * freqs[None, :]
    return torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1)


def _as_batch(z: torch.Tensor, spec: ModelSpec) -> torch.Tensor:
    if z.dim() == 1:
        z = z.unsqueeze(0)
    if z.dim() != 2 or z.shape[1] != spec.latent_dim:
        raise ValueError(f"Latent must have shape (B, {spec.latent_dim}), got {tuple(z.shape)}")
    return z


def velocity(
    params: Parameters,
    masks: Gates | None,
    z: torch.Tensor,
    t: float | torch.Tensor,
    c: ConditionLike,
) -> torch.Tensor:
    """Evaluate u(z, t, c), optionally with gated sublayers.

    ``u = head(h) / max(1 - t, TIME_FLOOR)``, so an Euler step of size 1 - t
    moves ``z`` onto the predicted clean latent ``z + head(h)``.

    Args:
        params: Network weights
        masks: Relaxed or hard gates, or None for the unmasked network
        z: Latents, shape (B, d) or (d,)
        t: Time in [0, 1], scalar or shape (B,)
        c: Condition(s)

    Returns:
        Velocity with the same shape as ``z``
    """
    spec = params.spec
    squeeze = z.dim() == 1
    z = _as_batch(z, spec)
    batch = z.shape[0]
    t = torch.as_tensor(t, dtype=DTYPE).reshape(-1)
    if t.numel() == 1:
        t = t.expand(batch)
    if bool((t < 0).any()) or bool((t > 1).any()):
        raise ValueError(f"Time must lie in [0, 1], got {t.tolist()}")
    ids = condition_ids(c, batch, spec)

    s, e = spec.n_tokens, spec.token_dim
    time_emb = _time_features(t, spec.time_freqs) @ params["time_proj.weight"]
    time_emb = time_emb + params["time_proj.bias"]
    h = z.reshape(batch, s, e)
    h = h + params["cond_embed"][ids][:, None, :] + params["pos_embed"][None] + time_emb[:, None, :]

    scale_attn = 1.0 / math.sqrt(spec.head_dim)
    for layer in range(spec.n_blocks):
        prefix = f"blocks.{layer}"
        scale = params[f"{prefix}.norm.scale"]
        offset = params[f"{prefix}.norm.offset"]

        g0 = apply(masks, Site(NORM, layer, 0), scale[0])
        a = F.layer_norm(h, (e,), weight=g0, bias=offset[0], eps=LAYER_NORM_EPS)
        q = torch.einsum("bse,aed->basd", a, params[f"{prefix}.attn.q"])
        k = torch.einsum("bse,aed->basd", a, params[f"{prefix}.attn.k"])
        v = torch.einsum("bse,aed->basd", a, params[f"{prefix}.attn.v"])
        weights = torch.softmax(q @ k.transpose(-1, -2) * scale_attn, dim=-1)
        heads = apply(masks, Site(ATTN, layer), weights @ v)
        h = h + torch.einsum("basd,ade->bse", heads, params[f"{prefix}.attn.o"])

        g1 = apply(masks, Site(NORM, layer, 1), scale[1])
        a = F.layer_norm(h, (e,), weight=g1, bias=offset[1], eps=LAYER_NORM_EPS)
        hidden = F.gelu(a @ params[f"{prefix}.ffn.w1"] + params[f"{prefix}.ffn.b1"])
        hidden = apply(masks, Site(FFN, layer), hidden)
        h = h + hidden @ params[f"{prefix}.ffn.w2"] + params[f"{prefix}.ffn.b2"]

    displacement = torch.einsum("bse,sef->bsf", h, params["head.weight"]) + params["head.bias"]
    remaining = (1.0 - t).clamp(min=TIME_FLOOR)
    out = displacement.reshape(batch, spec.latent_dim) / remaining[:, None]
    return out[0] if squeeze else out


def euler_sample(
    params: Parameters,
    masks: Gates | None,
    z0: torch.Tensor,
    n_steps: int,
    c: ConditionLike,
    return_trajectory: bool = False,
    recompute: bool = False,
) -> SampleResult:
    """Integrate the velocity field with N uniform Euler steps over [0, 1].

    ``z_{k+1} = z_k + (1/N) * u(z_k, k/N, c)``.

    Args:
        params: Network weights
        masks: Gates, or None for the unmasked network
        z0: Starting noise, shape (B, d) or (d,)
        n_steps: Number of Euler steps N (>= 1)
        c: Condition(s)
        return_trajectory: Also return z_0..z_N
        recompute: Recompute each step's activations during backward instead
            of retaining all N steps

    Returns:
        SampleResult with z_N (and the trajectory when requested)
    """
    if n_steps < 1:
        raise ValueError(f"Number of sampler steps must be >= 1, got {n_steps}")
    if not torch.isfinite(z0).all():
        raise NumericalError("Initial latent z0 contains non-finite values")

    dt = 1.0 / n_steps

    def step(z: torch.Tensor, t: float) -> torch.Tensor:
        return z + dt * velocity(params, masks, z, t, c)

    z = z0
    states = [z0] if return_trajectory else None
    for k in range(n_steps):
        t = k / n_steps
        if recompute and torch.is_grad_enabled():
            z = checkpoint(step, z, t, use_reentrant=False)
        else:
            z = step(z, t)
        if states is not None:
            states.append(z)

    trajectory = torch.stack(states) if states is not None else None
    return SampleResult(z_n=z, trajectory=trajectory)


def draw_flow_noise(batch_size: int, d: int, seed: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Standard-normal z_0 and uniform t for one flow-matching batch."""
    generator = torch.Generator().manual_seed(seed)
    z0 = torch.randn((batch_size, d), generator=generator, dtype=DTYPE)
    t = torch.rand((batch_size,), generator=generator, dtype=DTYPE)
    return z0, t


def standard_normal_noise(n: int, d: int, seed: int) -> torch.Tensor:
    """Default sampler noise source: ``n`` standard-normal latents."""
    generator = torch.Generator().manual_seed(seed)
    return torch.randn((n, d), generator=generator, dtype=DTYPE)


NoiseSource = Callable[[int, int, int], torch.Tensor]


def flow_matching_loss(
    params: Parameters,
    masks: Gates | None,
    x: torch.Tensor,
    c: ConditionLike,
    noise_seed: int | None = None,
    noise: tuple[torch.Tensor, torch.Tensor] | None = None,
) -> torch.Tensor:
    """Rectified-flow regression loss.

    With ``z_t = (1 - t) z_0 + t x`` the target velocity is ``x - z_0``; the
    loss is the batch mean of each sample's mean squared error.

    Args:
        params: Network weights
        masks: Gates, or None
        x: Data batch, shape (B, d)
        c: Condition per sample
        noise_seed: Seed for drawing (z_0, t) when ``noise`` is not given
        noise: Explicit (z_0, t) pair

    Returns:
        Scalar loss tensor
    """
    if x.dim() != 2 or x.shape[0] == 0:
        raise ValueError("Flow-matching loss needs a nonempty (B, d) batch")
    batch, d = x.shape
    if noise is None:
        if noise_seed is None:
            raise ValueError("Either noise_seed or noise must be given")
        noise = draw_flow_noise(batch, d, noise_seed)
    z0, t = noise
    z_t = (1.0 - t)[:, None] * z0 + t[:, None] * x
    target = x - z0
    prediction = velocity(params, masks, z_t, t, c)
    return ((prediction - target) ** 2).mean(dim=1).mean()


def train_base(
    dataset,
    spec: ModelSpec,
    cfg: TrainConfig,
    progress: bool = False,
) -> tuple[Parameters, TrainingLog]:
    """Train the (memorizing) base model with flow matching.

    Args:
        dataset: Corpus with ``x`` (n, d) and ``cond_ids`` (n,)
        spec: Architecture descriptor
        cfg: Steps, learning rate (cosine-decayed to 1% by the last step), batch size
            and seed
        progress: Show a tqdm progress bar

    Returns:
        Tuple of (trained Parameters, TrainingLog)
    """
    if len(dataset) == 0:
        raise ValueError("Cannot train on an empty dataset")
    if dataset.x.shape[1] != spec.latent_dim:
        raise ValueError(
            f"Dataset dimension {dataset.x.shape[1]} does not match latent_dim {spec.latent_dim}"
        )

    params = build_model(spec, cfg.seed)
    log = TrainingLog()
    if cfg.steps == 0:
        return params, log

    logger.info(f"Training base model for {cfg.steps} steps (batch {cfg.batch}, lr {cfg.lr})")
    params = params.trainable()
    optimizer = torch.optim.Adam(list(params.tensors.values()), lr=cfg.lr)
    scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(
        optimizer, T_max=cfg.steps, eta_min=cfg.lr * LR_FLOOR_RATIO
    )
    generator = torch.Generator().manual_seed(cfg.seed)
    n = len(dataset)

    for step in tqdm(range(cfg.steps), desc="base", disable=not progress, leave=False):
        idx = torch.randint(n, (cfg.batch,), generator=generator)
        z0 = torch.randn((cfg.batch, spec.latent_dim), generator=generator, dtype=DTYPE)
        t = torch.rand((cfg.batch,), generator=generator, dtype=DTYPE)
        loss = flow_matching_loss(
            params, None, dataset.x[idx], dataset.cond_ids[idx], noise=(z0, t)
        )
        if not torch.isfinite(loss):
            raise NumericalError(f"Flow-matching loss became non-finite at step {step}")
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        scheduler.step()
        log.record(step, loss.item())
        if step % 500 == 0:
            logger.debug(f"base step {step}: loss {loss.item():.6f}")

    logger.info(f"Base training finished: final loss {log.final_loss():.6f}")
    return params.detached(), log
