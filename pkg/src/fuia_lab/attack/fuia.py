"""End-to-end FUIA for the three unlearning scenarios."""

from __future__ import annotations

from ..errors import NoParticipationError
from ..fed import UpdateLog
from ..nn import ModelSpec, ParamVector
from .inference import DiscriminationScores, infer_class
from .inversion import InversionConfig, ReconstructionResult, invert_client, invert_sample
from .separation import GradientEstimate, separate_gradients, target_gradient_client, target_gradient_sample


def fuia_sample(
    spec: ModelSpec,
    original: ParamVector,
    training_log: UpdateLog,
    unlearning_log: UpdateLog,
    client: int,
    labels=None,
    cfg: InversionConfig = InversionConfig(),
    ground_truth=None,
) -> tuple[ReconstructionResult, GradientEstimate]:
    """Separate the client's clean gradients in both phases, difference them, invert.

    A target client the unlearning phase never sampled has a zero unlearning
    estimate.
    """
    clean_o = separate_gradients(training_log, client)
    try:
        clean_u = separate_gradients(unlearning_log, client)
    except NoParticipationError:
        clean_u = GradientEstimate(ParamVector.zeros_like(clean_o.values), "clean_unlearning")
    target = target_gradient_sample(clean_o, clean_u)
    return invert_sample(spec, original, target, labels, cfg, ground_truth=ground_truth), target


def fuia_client(
    spec: ModelSpec,
    original: ParamVector,
    unlearned: ParamVector,
    training_log: UpdateLog,
    client: int,
    labels=None,
    cfg: InversionConfig = InversionConfig(),
    ground_truth=None,
) -> tuple[ReconstructionResult, GradientEstimate]:
    clean_o = separate_gradients(training_log, client)
    global_diff = target_gradient_client(original, unlearned)
    result = invert_client(spec, original, clean_o, global_diff, labels, cfg, ground_truth=ground_truth)
    return result, clean_o


def fuia_class(original: ParamVector, unlearned: ParamVector, k: int = 1, beta: float = 0.5) -> DiscriminationScores:
    return infer_class(original, unlearned, beta=beta, k=k)
