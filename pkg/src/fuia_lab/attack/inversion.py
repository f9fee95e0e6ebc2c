"""Cosine gradient-matching inversion with TV regularization."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..errors import NonFiniteError, UndefinedCosineError
from ..metrics import compute_mse, psnr_from_mse
from ..nn import ModelSpec, ParamVector, value_and_input_grad
from ..rng import derive_rng
from .inference import infer_labels
from .separation import GradientEstimate
from .tv import tv


@dataclass(frozen=True)
class InversionConfig:
    iterations: int = 400
    lr: float = 0.1
    alpha: float = 1e-2  # TV weight
    gamma: float = 0.1  # blend weight for the global-difference term
    restarts: int = 2
    images: int = 1
    label_mode: str = "known"  # known | inferred
    seed: int = 0
    decay: tuple[float, ...] = (3 / 8, 5 / 8, 7 / 8)

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if self.images < 1 or self.restarts < 1 or self.iterations < 0:
            raise ValueError("images and restarts must be >= 1, iterations >= 0")
        if self.label_mode not in ("known", "inferred"):
            raise ValueError(f"unknown label mode {self.label_mode!r}")


@dataclass
class ReconstructionResult:
    images: np.ndarray  # [m, C, H, W]
    labels: list[int]
    objective: float
    trace: list[float]
    restart: int
    matching: list[int] = field(default_factory=list)
    mse: list[float] = field(default_factory=list)
    psnr: list[float] = field(default_factory=list)

    def score(self, ground_truth: np.ndarray) -> "ReconstructionResult":
        self.matching, self.mse = match_images(self.images, ground_truth)
        self.psnr = [psnr_from_mse(v) for v in self.mse]
        return self

    def to_json(self) -> dict:
        return {
            "labels": self.labels,
            "objective": self.objective,
            "restart": self.restart,
            "trace": self.trace,
            "matching": self.matching,
            "mse": self.mse,
            "psnr": self.psnr,
        }


def match_images(recon: np.ndarray, truth: np.ndarray) -> tuple[list[int], list[float]]:
    """Assignment of reconstructions to ground truth with minimum total MSE.

    Exhaustive over permutations (lexicographic, first minimum wins) for up to
    eight images.
    """
    m = recon.shape[0]
    if truth.shape[0] != m:
        raise ValueError(f"{m} reconstructions but {truth.shape[0]} ground-truth images")
    cost = np.array([[compute_mse(r, t) for t in truth] for r in recon])
    if m > 8:
        from scipy.optimize import linear_sum_assignment

        _, cols = linear_sum_assignment(cost)
        best = tuple(int(c) for c in cols)
    else:
        best, best_cost = None, np.inf
        for perm in itertools.permutations(range(m)):
            c = sum(cost[i, j] for i, j in enumerate(perm))
            if c < best_cost:
                best, best_cost = perm, c
    return list(best), [float(cost[i, j]) for i, j in enumerate(best)]


def random_init(cfg: InversionConfig, shape: Sequence[int], restart: int = 0) -> np.ndarray:
    """Uniform [0, 1] starting images for a restart; also the random baseline."""
    rng = derive_rng(cfg.seed, "inversion-init", restart)
    return rng.uniform(0.0, 1.0, size=(cfg.images, *shape))


def _unit(target: ParamVector, what: str) -> np.ndarray:
    norm = float(np.linalg.norm(target.data))
    if norm == 0.0 or not np.isfinite(norm):
        raise UndefinedCosineError(f"{what} target gradient has zero or non-finite norm")
    return target.data / norm


def cosine_objective(units: Sequence[tuple[float, np.ndarray]]):
    """phi(g) = -sum_i w_i cos(g, t_i) and its derivative with respect to g."""

    def fn(g: np.ndarray):
        gn = float(np.linalg.norm(g))
        if gn == 0.0:
            return 0.0, np.zeros_like(g)
        value, grad = 0.0, np.zeros_like(g)
        for weight, t in units:
            cos = float(g @ t) / gn
            value -= weight * cos
            grad -= weight * (t / gn - cos * g / (gn * gn))
        return value, grad

    return fn


def _optimize(spec, params, units, labels, cfg: InversionConfig, shape, init=None, ground_truth=None):
    objective = cosine_objective(units)
    milestones = {int(f * cfg.iterations) for f in cfg.decay}
    best, failures = None, 0
    betas, eps = (0.9, 0.999), 1e-8
    for r in range(cfg.restarts):
        x = np.array(init if init is not None else random_init(cfg, shape, r), dtype=np.float64)
        x = np.clip(x, 0.0, 1.0)
        m1, m2 = np.zeros_like(x), np.zeros_like(x)
        lr, trace = cfg.lr, []
        try:
            for it in range(cfg.iterations):
                if it in milestones:
                    lr *= 0.1
                value, dx, _ = value_and_input_grad(spec, params, x, labels, objective)
                tv_value, tv_grad = tv(x)
                total = value + cfg.alpha * tv_value
                if not np.isfinite(total):
                    raise NonFiniteError("inversion objective is not finite")
                trace.append(total)
                g = dx + cfg.alpha * tv_grad
                m1 = betas[0] * m1 + (1 - betas[0]) * g
                m2 = betas[1] * m2 + (1 - betas[1]) * g * g
                mhat = m1 / (1 - betas[0] ** (it + 1))
                vhat = m2 / (1 - betas[1] ** (it + 1))
                x = np.clip(x - lr * mhat / (np.sqrt(vhat) + eps), 0.0, 1.0)
            value, _, _ = value_and_input_grad(spec, params, x, labels, objective)
            final = value + cfg.alpha * tv(x)[0]
            if not np.isfinite(final):
                raise NonFiniteError("inversion objective is not finite")
        except (NonFiniteError, FloatingPointError):
            failures += 1
            continue
        trace.append(final)
        if best is None or final < best.objective:
            best = ReconstructionResult(x, list(labels), float(final), trace, r)
        if init is not None:
            break
    if best is None:
        raise NonFiniteError(f"all {failures} inversion restarts produced non-finite objectives")
    if ground_truth is not None:
        best.score(np.asarray(ground_truth, dtype=np.float64))
    return best


def _resolve_labels(labels, target: ParamVector, cfg: InversionConfig) -> list[int]:
    if cfg.label_mode == "inferred" or labels is None:
        return infer_labels(target, cfg.images)
    labels = [int(v) for v in labels]
    if len(labels) != cfg.images:
        raise ValueError(f"{len(labels)} labels for {cfg.images} virtual images")
    return labels


def _as_gradient(g) -> ParamVector:
    return g.as_gradient() if isinstance(g, GradientEstimate) else g


def invert_sample(
    spec: ModelSpec,
    params: ParamVector,
    target,
    labels=None,
    cfg: InversionConfig = InversionConfig(),
    init=None,
    ground_truth=None,
) -> ReconstructionResult:
    """Minimize ``-cos(grad(x), target) + alpha * TV(x)`` over virtual images ``x``.

    ``target`` is a :class:`GradientEstimate` or a ParamVector already in
    gradient orientation. Only its direction matters.
    """
    t = _as_gradient(target)
    labels = _resolve_labels(labels, t, cfg)
    return _optimize(spec, params, [(1.0, _unit(t, "sample"))], labels, cfg, spec.input_shape, init, ground_truth)


def invert_client(
    spec: ModelSpec,
    params: ParamVector,
    clean,
    global_diff,
    labels=None,
    cfg: InversionConfig = InversionConfig(),
    init=None,
    ground_truth=None,
) -> ReconstructionResult:
    """Blend ``(1-gamma) cos(grad, clean) + gamma cos(grad, global_diff)``, minus TV."""
    t_clean = _as_gradient(clean)
    units = [(1.0 - cfg.gamma, _unit(t_clean, "client"))]
    if cfg.gamma > 0:
        units.append((cfg.gamma, _unit(_as_gradient(global_diff), "global-difference")))
    labels = _resolve_labels(labels, t_clean, cfg)
    return _optimize(spec, params, units, labels, cfg, spec.input_shape, init, ground_truth)


def muia_baseline(
    spec: ModelSpec,
    original: ParamVector,
    unlearned: ParamVector,
    labels=None,
    cfg: InversionConfig = InversionConfig(),
    ground_truth=None,
) -> ReconstructionResult:
    """Inversion against the raw global difference W^o - W^u."""
    diff = GradientEstimate(original - unlearned, "global_diff")
    return invert_sample(spec, original, diff, labels, cfg, ground_truth=ground_truth)
