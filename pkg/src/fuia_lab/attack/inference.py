"""Label inference from output-layer gradients and forgotten-class inference."""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import ShapeError
from ..nn import ParamVector


def _output_slots(params: ParamVector):
    slots = params.layer_map
    if len(slots) < 2 or not slots[-1].name.endswith(".bias") or not slots[-2].name.endswith(".weight"):
        raise ShapeError("model does not end in a dense output layer")
    return slots[-2].name, slots[-1].name


def infer_labels(gradient: ParamVector, m: int) -> list[int]:
    """The m classes with the most negative output-bias gradient (ties: lower id).

    ``gradient`` must be in gradient orientation (see
    :meth:`GradientEstimate.as_gradient`). For one sample under softmax
    cross-entropy the bias gradient is ``softmax - onehot``, negative only
    at the true class.
    """
    _, bias = _output_slots(gradient)
    gb = gradient.view(bias)
    if m < 1 or m > gb.size:
        raise ValueError(f"cannot infer {m} labels from {gb.size} classes")
    order = np.lexsort((np.arange(gb.size), gb))
    return [int(i) for i in order[:m]]


@dataclass(frozen=True)
class DiscriminationScores:
    scores: np.ndarray
    v_diff: np.ndarray
    b_diff: np.ndarray
    inferred: tuple[int, ...]
    beta: float

    @property
    def ranks(self) -> np.ndarray:
        order = np.lexsort((np.arange(self.scores.size), -self.scores))
        ranks = np.empty(self.scores.size, dtype=np.int64)
        ranks[order] = np.arange(1, self.scores.size + 1)
        return ranks

    def write_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["class_id", "v_diff", "b_diff", "S_d", "rank"])
            for i, r in enumerate(self.ranks):
                w.writerow([i, repr(float(self.v_diff[i])), repr(float(self.b_diff[i])), repr(float(self.scores[i])), int(r)])


def _normalized(x: np.ndarray) -> np.ndarray:
    s = x.sum()
    return x / s if s > 0 else np.zeros_like(x)


def infer_class(original: ParamVector, unlearned: ParamVector, beta: float = 0.5, k: int = 1) -> DiscriminationScores:
    """Blend of normalized per-class output weight and bias l1 changes; top-k classes.

    A term whose total change is zero contributes nothing.
    """
    if not 0.0 <= beta <= 1.0:
        raise ValueError("beta must lie in [0, 1]")
    wname, bname = _output_slots(original)
    if _output_slots(unlearned) != (wname, bname) or original.view(wname).shape != unlearned.view(wname).shape:
        raise ShapeError("models do not share an output layer")
    v_diff = np.abs(original.view(wname) - unlearned.view(wname)).sum(axis=1)
    b_diff = np.abs(original.view(bname) - unlearned.view(bname))
    n = v_diff.size
    if not 1 <= k < n:
        raise ValueError(f"k must satisfy 1 <= k < {n}")
    if not v_diff.any() and not b_diff.any():
        warnings.warn("output layers are identical; discrimination scores are uniform", RuntimeWarning)
    scores = beta * _normalized(v_diff) + (1.0 - beta) * _normalized(b_diff)
    order = np.lexsort((np.arange(n), -scores))
    return DiscriminationScores(scores, v_diff, b_diff, tuple(int(i) for i in order[:k]), beta)
