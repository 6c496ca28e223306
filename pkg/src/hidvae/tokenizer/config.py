from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field


@dataclass
class TokenizerConfig:
    d_in: int = 768
    d: int = 32
    L: int = 3
    K: list[int] = field(default_factory=lambda: [256, 256, 256])
    hidden: list[int] = field(default_factory=lambda: [512, 256])
    beta_commit: float = 0.25
    beta_codebook: float = 1.0
    beta_sup: float = 1.0
    beta_unique: float = 2.0
    tau: float = 0.07
    m: float = 0.9
    focal: bool = True
    gamma_focal: float = 2.0
    lr: float = 3e-4
    weight_decay: float = 0.01
    batch: int = 128
    epochs: int = 50
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.K, int):
            self.K = [self.K] * self.L
        self.K = [int(k) for k in self.K]
        if len(self.K) == 1 and self.L > 1:
            self.K = self.K * self.L
        if len(self.K) != self.L:
            raise ValueError(f"K has {len(self.K)} entries for L={self.L}")
        if self.L < 1 or any(k < 1 for k in self.K):
            raise ValueError("need L >= 1 and positive codebook sizes")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if not 0.0 <= self.m <= 1.0:
            raise ValueError("margin m must lie in [0, 1]")
        for name in ("beta_commit", "beta_codebook", "beta_sup", "beta_unique"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TokenizerConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown tokenizer config keys: {sorted(unknown)}")
        return cls(**d)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)

    @classmethod
    def load(cls, path) -> "TokenizerConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))
