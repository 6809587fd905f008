"""Architecture descriptor and condition tokens."""

from dataclasses import dataclass

NEUTRAL = "neutral"
TRIGGER = "trigger"


@dataclass(frozen=True)
class ModelSpec:
    """Shape of the conditional velocity network.

    The latent of dimension ``latent_dim`` is viewed as ``n_tokens`` tokens of
    width ``token_dim``. Each block has two normalization sites (before
    attention and before the feedforward layer).

    Attributes:
        latent_dim: Latent/data dimension d
        token_dim: Token width e (must divide d)
        n_blocks: Number of transformer blocks L
        n_heads: Attention heads per block A (must divide e)
        ffn_hidden: Feedforward hidden width H
        cond_vocab: Number of condition tokens V
        time_freqs: Number of sinusoidal time frequencies
    """

    latent_dim: int = 32
    token_dim: int = 8
    n_blocks: int = 2
    n_heads: int = 2
    ffn_hidden: int = 16
    cond_vocab: int = 20
    time_freqs: int = 4

    def __post_init__(self):
        """Validate dimensions."""
        for name in (
            "latent_dim",
            "token_dim",
            "n_blocks",
            "n_heads",
            "ffn_hidden",
            "cond_vocab",
            "time_freqs",
        ):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")
        if self.latent_dim % self.token_dim != 0:
            raise ValueError(
                f"latent_dim {self.latent_dim} is not divisible by token_dim {self.token_dim}"
            )
        if self.token_dim % self.n_heads != 0:
            raise ValueError(
                f"token_dim {self.token_dim} is not divisible by n_heads {self.n_heads}"
            )

    @property
    def n_tokens(self) -> int:
        return self.latent_dim // self.token_dim

    @property
    def head_dim(self) -> int:
        return self.token_dim // self.n_heads

    def to_dict(self) -> dict:
        """Convert spec to dictionary for serialization."""
        return {
            "latent_dim": self.latent_dim,
            "token_dim": self.token_dim,
            "n_blocks": self.n_blocks,
            "n_heads": self.n_heads,
            "ffn_hidden": self.ffn_hidden,
            "cond_vocab": self.cond_vocab,
            "time_freqs": self.time_freqs,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ModelSpec":
        """Create spec from dictionary, filling missing keys with defaults."""
        defaults = cls()
        return cls(**{key: data.get(key, value) for key, value in defaults.to_dict().items()})


@dataclass(frozen=True)
class Condition:
    """A discrete condition token.

    Attributes:
        id: Row of the condition embedding table
        role: "neutral" (broad procedural distribution) or "trigger"
            (bound to a single memorized exemplar)
    """

    id: int
    role: str = NEUTRAL

    def __post_init__(self):
        """Validate condition data."""
        if self.id < 0:
            raise ValueError(f"Condition id must be non-negative, got {self.id}")
        if self.role not in (NEUTRAL, TRIGGER):
            raise ValueError(f'Invalid condition role: {self.role}. Must be "neutral" or "trigger"')

    @property
    def is_trigger(self) -> bool:
        return self.role == TRIGGER

    def to_dict(self) -> dict:
        return {"id": self.id, "role": self.role}

    @classmethod
    def from_dict(cls, data: dict) -> "Condition":
        return cls(id=int(data["id"]), role=data.get("role", NEUTRAL))

    def __str__(self) -> str:
        return f"{self.role}:{self.id}"
