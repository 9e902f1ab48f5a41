"""Shared plumbing for the episode generators."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from ..core import BehaviorSpec, PolicySpec, RngStream


@dataclass(frozen=True)
class Actor:
    """Uniform ``(t, X, rng) -> U`` view of a policy or a behavior spec."""

    fn: Callable

    @classmethod
    def wrap(cls, actor) -> "Actor":
        if isinstance(actor, Actor):
            return actor
        if isinstance(actor, BehaviorSpec):
            return cls(lambda t, X, rng: np.asarray(actor.sample(t, X, rng), dtype=float).reshape(len(X), -1))
        if isinstance(actor, PolicySpec):
            return cls(lambda t, X, rng: actor.act_batch(t, X))
        raise TypeError(f"cannot roll out with {type(actor).__name__}")

    def __call__(self, t, X, rng):
        return self.fn(t, X, rng)


def base_seed(rng) -> int:
    if isinstance(rng, RngStream):
        from ..core import derive_seed

        return derive_seed(rng.seed, rng.stream)
    if isinstance(rng, np.random.Generator):
        return int(rng.integers(2**63))
    return int(rng)


def block_streams(n: int, block: int, rng):
    """Yield ``(size, generator)`` per block of episodes; block ``b`` uses stream ``b``."""
    seed = base_seed(rng)
    for b, lo in enumerate(range(0, n, block)):
        yield min(block, n - lo), RngStream(seed, b).generator()
