from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields, replace


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters. Defaults are the full-scale pre-training setup."""

    num_points: int = 4096
    num_patches: int = 64
    patch_size: int = 32
    dim: int = 384
    depth: int = 12
    heads: int = 6
    mlp_ratio: int = 4
    tokenizer_channels: tuple[int, ...] = (128, 256, 512)
    pos_hidden: int = 128
    concept_tokens: int = 32
    prefix_len: int = 10
    teacher_dim: int = 768
    activation: str = "gelu"
    pos_every_layer: bool = True
    decoder_depth: int = 3
    mask_ratio: float = 0.6
    head_hidden: int = 256
    init_std: float = 0.02

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} must be divisible by heads {self.heads}")
        if self.patch_size > self.num_points or self.num_patches > self.num_points:
            raise ValueError("patch grouping larger than the point count")
        object.__setattr__(self, "tokenizer_channels", tuple(self.tokenizer_channels))

    @classmethod
    def full(cls, **overrides) -> "ModelConfig":
        return replace(cls(), **overrides)

    @classmethod
    def tiny(cls, **overrides) -> "ModelConfig":
        """Desk-scale profile used by the test suite and the CLI ``--profile tiny``."""
        base = cls(num_points=256, num_patches=16, patch_size=16, dim=64, depth=2, heads=4,
                   tokenizer_channels=(32, 64, 128), pos_hidden=32, concept_tokens=8,
                   head_hidden=64)
        return replace(base, **overrides)

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def segmentation_layers(self) -> tuple[int, int, int]:
        """1-based encoder layers fed to the segmentation head (4, 8, 12 at depth 12)."""
        d = self.depth
        return (max(1, d // 3), max(1, 2 * d // 3), d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tokenizer_channels"] = list(self.tokenizer_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})

    def digest(self) -> bytes:
        """SHA-256 of the canonical JSON form; stored in checkpoints."""
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).digest()


PROFILES = {"full": ModelConfig.full, "tiny": ModelConfig.tiny}

__all__ = ["ModelConfig", "PROFILES"]
