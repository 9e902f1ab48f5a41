"""Benchmark environments and a small registry keyed by id."""
from __future__ import annotations

from .binpack import BinPackEnv, BinPackParams
from .lob import LobEnv, LobParams
from .lqr import LqrEnv, LqrParams

ENVIRONMENTS = {"lqr": (LqrEnv, LqrParams), "lob": (LobEnv, LobParams), "bp": (BinPackEnv, BinPackParams)}


def make_env(env_id: str, params: dict | None = None):
    """Instantiate an environment, overriding default parameters by name."""
    try:
        env_cls, params_cls = ENVIRONMENTS[env_id]
    except KeyError:
        raise KeyError(f"unknown environment {env_id!r}; valid ids: {', '.join(sorted(ENVIRONMENTS))}") from None
    return env_cls(params_cls().with_overrides(**(params or {})))


__all__ = ["make_env", "ENVIRONMENTS", "LqrEnv", "LqrParams", "LobEnv", "LobParams", "BinPackEnv", "BinPackParams"]
