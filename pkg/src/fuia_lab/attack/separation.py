"""Gradient separation and target-gradient acquisition from update logs."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import LayerMapMismatch, NoParticipationError
from ..fed import UpdateLog
from ..nn import ParamVector

PROVENANCES = ("clean_training", "clean_unlearning", "target_sample", "target_client", "global_diff", "exact")


@dataclass(frozen=True)
class GradientEstimate:
    """A parameter-shaped estimate and where it came from.

    Everything except ``exact`` is built from parameter differences, which
    point along ``-lr * gradient``; :meth:`as_gradient` flips those into
    gradient orientation for inversion and label inference.
    """

    values: ParamVector
    provenance: str

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}")

    def as_gradient(self) -> ParamVector:
        return self.values if self.provenance == "exact" else -self.values

    def is_zero(self) -> bool:
        return not np.any(self.values.data)


def separate_gradients(log: UpdateLog, client: int, provenance: str | None = None) -> GradientEstimate:
    """l1-weighted sum of one client's per-round deltas.

    Round weight = ||delta_k||_1 / sum of ||delta_j||_1 over that round's
    participants; a round whose participants all uploaded zeros adds nothing.
    """
    rounds = log.participated(client)
    if not rounds:
        raise NoParticipationError(f"client {client} never participated in the {log.phase} log")
    total = np.zeros_like(log.initial.data)
    for rec in rounds:
        norms = [d.l1() for d in rec.deltas]
        denom = float(np.sum(norms))
        if denom == 0.0:
            continue
        i = rec.clients.index(client)
        total = total + (norms[i] / denom) * rec.deltas[i].data
    if provenance is None:
        provenance = "clean_training" if log.phase == "training" else "clean_unlearning"
    return GradientEstimate(log.initial.with_data(total), provenance)


def _difference(a: ParamVector, b: ParamVector, provenance: str) -> GradientEstimate:
    if a.layer_map != b.layer_map:
        raise LayerMapMismatch("cannot difference estimates with different layer maps")
    return GradientEstimate(a - b, provenance)


def target_gradient_sample(clean_training: GradientEstimate, clean_unlearning: GradientEstimate) -> GradientEstimate:
    """Forgotten-sample signal: training estimate minus unlearning estimate."""
    if clean_training.provenance != "clean_training" or clean_unlearning.provenance != "clean_unlearning":
        raise ValueError("expected (clean_training, clean_unlearning) estimates")
    return _difference(clean_training.values, clean_unlearning.values, "target_sample")


def target_gradient_client(original: ParamVector, unlearned: ParamVector) -> GradientEstimate:
    """Global model difference W^o - W^u."""
    return _difference(original, unlearned, "global_diff")
