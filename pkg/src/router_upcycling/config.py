"""Architecture configuration for the dense model and its MoE upcycle."""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace

ROUTER_MODES = ("mixture", "vanilla", "switch", "mlp")
MIXTURES = ("summation", "max_pooling")


class ConfigError(ValueError):
    pass


def is_power_of_two(x: int) -> bool:
    return x > 0 and (x & (x - 1)) == 0


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 128
    n_heads: int = 16
    head_dim: int = 8
    n_layers: int = 2
    ffn_hidden: int = 256
    vocab_size: int = 259
    seq_len: int = 256

    def __post_init__(self):
        for name in ("d_model", "n_heads", "head_dim", "n_layers", "ffn_hidden", "vocab_size", "seq_len"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.d_model != self.n_heads * self.head_dim:
            raise ConfigError(
                f"d_model ({self.d_model}) must equal n_heads*head_dim ({self.n_heads}*{self.head_dim})"
            )
        if not is_power_of_two(self.n_heads):
            raise ConfigError(f"n_heads must be a power of two, got {self.n_heads}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def router_geometry(n_heads: int, head_dim: int, n_experts: int, n_routers: int, split_heads: bool) -> tuple[int, int]:
    """Return (router_dim, keys_per_expert) for a mixture-of-routers layout."""
    h, m, n = n_heads, n_routers, n_experts
    if not (is_power_of_two(m) and is_power_of_two(n)):
        raise ConfigError(f"routers ({m}) and experts ({n}) must be powers of two")
    if split_heads:
        if m != 2 * h:
            raise ConfigError(f"split_heads needs n_routers == 2*n_heads ({2 * h}), got {m}")
        if head_dim % 2:
            raise ConfigError("split_heads needs an even head_dim")
        if m < n:
            raise ConfigError("split_heads needs n_routers >= n_experts")
        return head_dim // 2, m // n
    if m <= n:
        if h % m:
            raise ConfigError(f"n_heads ({h}) must be divisible by n_routers ({m})")
        return (h // m) * head_dim, 1
    if m != h:
        raise ConfigError(f"with more routers than experts, n_routers must equal n_heads ({h}), got {m}")
    return head_dim, m // n


@dataclass(frozen=True)
class MoEConfig:
    n_experts: int = 8
    top_k: int = 2
    n_routers: int = 8
    router_dim: int = 0
    keys_per_expert: int = 1
    mixture: str = "summation"
    aux_coeff: float = 0.02
    z_coeff: float = 0.001
    split_heads: bool = False
    router_mode: str = "mixture"
    train_keys: bool = True
    router_std: float = 0.02

    def __post_init__(self):
        if self.router_mode not in ROUTER_MODES:
            raise ConfigError(f"router_mode must be one of {ROUTER_MODES}, got {self.router_mode!r}")
        if self.mixture not in MIXTURES:
            raise ConfigError(f"mixture must be one of {MIXTURES}, got {self.mixture!r}")
        if self.n_experts < 1 or not 1 <= self.top_k <= self.n_experts:
            raise ConfigError(f"need 1 <= top_k <= n_experts, got k={self.top_k}, n={self.n_experts}")
        if self.router_mode == "mixture" and self.router_dim > 0:
            if self.n_routers * self.router_dim <= 0:
                raise ConfigError("router dimensions must be positive")

    @property
    def effective_top_k(self) -> int:
        return 1 if self.router_mode == "switch" else self.top_k

    @classmethod
    def for_model(cls, model: ModelConfig, **kw) -> "MoEConfig":
        """Build a config whose derived router fields match ``model``'s heads."""
        cfg = cls(**kw)
        if cfg.router_mode != "mixture":
            return cfg
        dim, kpe = router_geometry(model.n_heads, model.head_dim, cfg.n_experts, cfg.n_routers, cfg.split_heads)
        return replace(cfg, router_dim=dim, keys_per_expert=kpe)

    def check_against(self, model: ModelConfig) -> None:
        if self.router_mode != "mixture":
            return
        dim, kpe = router_geometry(model.n_heads, model.head_dim, self.n_experts, self.n_routers, self.split_heads)
        if (dim, kpe) != (self.router_dim, self.keys_per_expert):
            raise ConfigError(
                f"MoE config router_dim/keys_per_expert ({self.router_dim}, {self.keys_per_expert}) "
                f"inconsistent with model heads, expected ({dim}, {kpe})"
            )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MoEConfig":
        return cls(**d)
