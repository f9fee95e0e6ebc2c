"""Client-side upload defenses: magnitude pruning and Gaussian perturbation."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .nn.params import ParamVector
from .rng import derive_rng


def prune_gradient(g: ParamVector, p: float) -> ParamVector:
    """Zero the floor(p * len) entries of smallest magnitude, globally across layers.

    Ties go to the lower flat index.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError("prune fraction must lie in [0, 1]")
    k = int(math.floor(p * len(g)))
    if k == 0:
        return g
    order = np.lexsort((np.arange(len(g)), np.abs(g.data)))
    out = g.data.copy()
    out[order[:k]] = 0.0
    return g.with_data(out)


def perturb_gradient(g: ParamVector, std: float, rng: np.random.Generator) -> ParamVector:
    """Add i.i.d. N(0, std^2) noise to every entry."""
    if std < 0:
        raise ValueError("std must be non-negative")
    if std == 0:
        return g
    return g.with_data(g.data + rng.normal(0.0, std, size=len(g)))


@dataclass(frozen=True)
class DefenseConfig:
    kind: str = "none"  # none | prune | perturb
    p: float = 0.0
    std: float = 0.0
    phases: tuple[str, ...] = ("training", "unlearning")

    def __post_init__(self):
        if self.kind not in ("none", "prune", "perturb"):
            raise ValueError(f"unknown defense kind {self.kind!r}")
        if not 0.0 <= self.p <= 1.0:
            raise ValueError("defense.p must lie in [0, 1]")
        if self.std < 0:
            raise ValueError("defense.std must be non-negative")
        object.__setattr__(self, "phases", tuple(self.phases))

    @property
    def active(self) -> bool:
        return self.kind != "none"

    def apply(self, update: ParamVector, seed: int, phase: str, round_index: int, client: int) -> ParamVector:
        if self.kind == "none" or phase not in self.phases:
            return update
        if self.kind == "prune":
            return prune_gradient(update, self.p)
        rng = derive_rng(seed, "defense", phase, round_index, client)
        return perturb_gradient(update, self.std, rng)


NO_DEFENSE = DefenseConfig()
