"""Budget and model-geometry configuration."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Any, Mapping

from .errors import ConfigError


def _from_mapping(cls, data: Mapping[str, Any], section: str):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown keys in [{section}]: {', '.join(unknown)}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(f"[{section}]: {exc}") from None


@dataclass(frozen=True)
class SnapStreamConfig:
    """Cache budgets and the attention geometry they apply to.

    ``l_obs`` and ``pool_kernel`` default to common SnapKV practice (32 and 7).
    """

    l_max: int
    l_sink: int
    l_recent: int
    k_top: int
    l_obs: int = 32
    pool_kernel: int = 7
    n_layers: int = 1
    n_q_heads: int = 1
    n_kv_heads: int = 1
    head_dim: int = 8
    theta_base: float = 10000.0

    def __post_init__(self):
        for name in ("l_max", "l_sink", "l_recent", "k_top", "l_obs", "pool_kernel",
                     "n_layers", "n_q_heads", "n_kv_heads", "head_dim"):
            if not isinstance(getattr(self, name), int) or isinstance(getattr(self, name), bool):
                raise ConfigError(f"{name} must be an integer")
        if self.l_sink < 0:
            raise ConfigError("l_sink must be >= 0")
        if self.l_recent < 1:
            raise ConfigError("l_recent must be >= 1")
        if self.k_top < 0:
            raise ConfigError("k_top must be >= 0")
        if self.l_obs < 1:
            raise ConfigError("l_obs must be >= 1")
        if self.pool_kernel < 1 or self.pool_kernel % 2 == 0:
            raise ConfigError("pool_kernel must be a positive odd integer")
        if self.l_snapstream > self.l_max:
            raise ConfigError(
                f"l_sink + l_recent + k_top = {self.l_snapstream} exceeds l_max = {self.l_max}"
            )
        if min(self.n_layers, self.n_q_heads, self.n_kv_heads, self.head_dim) < 1:
            raise ConfigError("model geometry must be positive")
        if self.n_q_heads % self.n_kv_heads:
            raise ConfigError("n_q_heads must be divisible by n_kv_heads")
        if self.head_dim % 2:
            raise ConfigError("head_dim must be even for rotary encoding")
        if self.theta_base <= 0:
            raise ConfigError("theta_base must be positive")

    @property
    def l_sr(self) -> int:
        return self.l_sink + self.l_recent

    @property
    def l_snapstream(self) -> int:
        return self.l_sink + self.l_recent + self.k_top

    @property
    def group_size(self) -> int:
        return self.n_q_heads // self.n_kv_heads

    def kv_head_of(self, q_head: int) -> int:
        return q_head // self.group_size

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "SnapStreamConfig":
        return _from_mapping(cls, data, "snapstream")


@dataclass(frozen=True)
class ModelConfig:
    """Geometry and seed of the toy decoder used by :mod:`snapstream.engine`."""

    vocab_size: int = 64
    n_layers: int = 2
    n_q_heads: int = 2
    n_kv_heads: int = 1
    head_dim: int = 8
    ffn_mult: int = 2
    seed: int = 0
    eos_id: int | None = 0

    def __post_init__(self):
        if min(self.vocab_size, self.n_layers, self.n_q_heads, self.n_kv_heads,
               self.head_dim, self.ffn_mult) < 1:
            raise ConfigError("model dimensions must be >= 1")
        if self.n_q_heads % self.n_kv_heads:
            raise ConfigError("n_q_heads must be divisible by n_kv_heads")
        if self.head_dim % 2:
            raise ConfigError("head_dim must be even for rotary encoding")
        if self.eos_id is not None and not 0 <= self.eos_id < self.vocab_size:
            raise ConfigError("eos_id must be a valid token id or null")

    @property
    def hidden(self) -> int:
        return self.n_q_heads * self.head_dim

    def cache_config(self, l_max: int, l_sink: int, l_recent: int, k_top: int,
                     **kwargs) -> SnapStreamConfig:
        """Build a :class:`SnapStreamConfig` whose geometry matches this model."""
        return SnapStreamConfig(
            l_max=l_max, l_sink=l_sink, l_recent=l_recent, k_top=k_top,
            n_layers=self.n_layers, n_q_heads=self.n_q_heads,
            n_kv_heads=self.n_kv_heads, head_dim=self.head_dim, **kwargs,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ModelConfig":
        return _from_mapping(cls, data, "model")
