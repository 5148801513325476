"""Architecture hyperparameters and the named size presets."""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass, replace

__all__ = ["Role", "ModelConfig", "PRESETS", "preset", "DEFAULT_MAX_POSITION", "DEFAULT_DROPOUT"]

DEFAULT_MAX_POSITION = 256
DEFAULT_DROPOUT = 0.1


class Role(str, enum.Enum):
    GENERATOR = "generator"
    DISCRIMINATOR = "discriminator"


@dataclass(frozen=True)
class ModelConfig:
    embedding_size: int
    hidden_size: int
    num_hidden_layers: int
    intermediate_size: int
    num_attention_heads: int
    vocab_size: int
    max_position: int = DEFAULT_MAX_POSITION
    role: Role = Role.DISCRIMINATOR
    dropout: float = DEFAULT_DROPOUT
    layer_norm_eps: float = 1e-12

    def __post_init__(self):
        object.__setattr__(self, "role", Role(self.role))
        for name in ("embedding_size", "hidden_size", "num_hidden_layers", "intermediate_size",
                     "num_attention_heads", "vocab_size", "max_position"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.hidden_size % self.num_attention_heads:
            raise ValueError(
                f"hidden_size {self.hidden_size} is not divisible by {self.num_attention_heads} heads"
            )
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    @property
    def head_dim(self) -> int:
        return self.hidden_size // self.num_attention_heads

    def to_dict(self) -> dict:
        d = asdict(self)
        d["role"] = self.role.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    def with_(self, **kw) -> "ModelConfig":
        return replace(self, **kw)


# (embedding, hidden, layers, intermediate, heads)
PRESETS: dict[str, tuple[int, int, int, int, int]] = {
    "large-disc": (128, 256, 8, 1024, 4),
    "large-gen": (128, 64, 8, 256, 1),
    "medium-disc": (128, 256, 4, 1024, 4),
    "medium-gen": (128, 64, 4, 256, 1),
    "small-disc": (128, 256, 2, 1024, 4),
    "small-gen": (128, 64, 2, 256, 1),
    "miniature-disc": (32, 64, 2, 256, 2),
    "miniature-gen": (16, 32, 2, 64, 1),
}


def preset(name: str, vocab_size: int, max_position: int = DEFAULT_MAX_POSITION, **kw) -> ModelConfig:
    """Config for a named preset; ``name`` may omit the ``-disc`` suffix."""
    if name not in PRESETS and f"{name}-disc" in PRESETS:
        name = f"{name}-disc"
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    e, h, n, i, a = PRESETS[name]
    role = Role.GENERATOR if name.endswith("-gen") else Role.DISCRIMINATOR
    return ModelConfig(e, h, n, i, a, vocab_size, max_position, role, **kw)
