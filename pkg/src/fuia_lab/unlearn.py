"""Federated unlearning: exact retraining and three approximate stand-ins.

The approximate methods are simplified members of their method families:

* ``approx`` (sample): gradient ascent on the forgotten samples, local
  fine-tuning on the rest, then ordinary federated rounds.
* ``eraser`` (client): replay of the stored training rounds without the
  forgotten client, each retained delta recalibrated to the direction of a
  fresh reference step while keeping its stored norm.
* ``prune`` (class): server-side removal of the forgotten classes' output
  units and dampening of hidden units that feed them, then federated
  fine-tuning on the remaining classes.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .data import Dataset
from .defense import NO_DEFENSE, DefenseConfig
from .errors import LogFormatError
from .fed import (
    FLConfig,
    RoundRecord,
    UpdateLog,
    gradient_ascent,
    local_train,
    normalize_weights,
    run_training,
)
from .nn import ModelSpec, ParamVector
from .rng import derive_rng

SCENARIOS = ("sample", "client", "class")
METHODS = ("retrain", "approx", "eraser", "prune")
METHOD_SCENARIOS = {"approx": ("sample",), "eraser": ("client",), "prune": ("class",), "retrain": SCENARIOS}


@dataclass(frozen=True)
class UnlearnRequest:
    scenario: str
    clients: tuple[int, ...] = ()
    samples: Mapping[int, tuple[int, ...]] = field(default_factory=dict)  # client -> local indices
    classes: tuple[int, ...] = ()

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario!r}")
        object.__setattr__(self, "clients", tuple(int(c) for c in self.clients))
        object.__setattr__(self, "classes", tuple(int(c) for c in self.classes))
        object.__setattr__(
            self, "samples", {int(k): tuple(int(i) for i in v) for k, v in dict(self.samples).items()}
        )

    def validate(self, client_datasets: Sequence[Dataset], class_count: int | None = None, strict=True):
        n = len(client_datasets)
        for k in self.clients:
            if not 0 <= k < n:
                raise ValueError(f"target client {k} does not exist")
        for k, idx in self.samples.items():
            if not 0 <= k < n:
                raise ValueError(f"target client {k} does not exist")
            size = len(client_datasets[k])
            if any(not 0 <= i < size for i in idx):
                raise ValueError(f"forgotten index out of range for client {k}")
        if class_count is not None and any(not 0 <= c < class_count for c in self.classes):
            raise ValueError("forgotten class id out of range")
        if strict:
            if self.scenario == "sample" and not any(self.samples.values()):
                raise ValueError("sample request forgets nothing")
            if self.scenario == "client" and not self.clients:
                raise ValueError("client request names no client")
            if self.scenario == "class" and not self.classes:
                raise ValueError("class request names no class")

    @property
    def sample_clients(self) -> tuple[int, ...]:
        return tuple(sorted(k for k, v in self.samples.items() if v))

    def remaining(self, client_datasets: Sequence[Dataset]) -> list[Dataset]:
        """Client datasets with the forgotten data removed."""
        out = []
        for k, d in enumerate(client_datasets):
            if self.scenario == "sample" and self.samples.get(k):
                d = d.without(self.samples[k])
            elif self.scenario == "client" and k in self.clients:
                d = d.subset([])
            elif self.scenario == "class":
                d = d.of_classes(self.classes, keep=False)
            out.append(d)
        return out

    def forgotten(self, client_datasets: Sequence[Dataset]) -> dict[int, Dataset]:
        out = {}
        for k, d in enumerate(client_datasets):
            if self.scenario == "sample" and self.samples.get(k):
                out[k] = d.subset(self.samples[k])
            elif self.scenario == "client" and k in self.clients:
                out[k] = d
            elif self.scenario == "class":
                sub = d.of_classes(self.classes)
                if len(sub):
                    out[k] = sub
        return out


@dataclass
class UnlearnOutcome:
    params: ParamVector
    log: UpdateLog
    method: str
    wall_clock: float
    dropped: list[int] = field(default_factory=list)


def retrain_exact(
    spec: ModelSpec,
    client_datasets: Sequence[Dataset],
    request: UnlearnRequest,
    cfg: FLConfig,
    init: ParamVector | None = None,
    defense: DefenseConfig = NO_DEFENSE,
) -> UnlearnOutcome:
    """Train from the original initialization on the remaining data only."""
    t0 = time.perf_counter()
    request.validate(client_datasets, strict=False)
    remaining = request.remaining(client_datasets)
    dropped = [k for k, d in enumerate(remaining) if len(d) == 0]
    w, log = run_training(
        spec, remaining, cfg, init=init, defense=defense, phase="unlearning", allow_empty=True
    )
    log.meta.update({"method": "retrain", "dropped": dropped})
    return UnlearnOutcome(w, log, "retrain", time.perf_counter() - t0, dropped)


def unlearn_sample_approx(
    spec: ModelSpec,
    client_datasets: Sequence[Dataset],
    request: UnlearnRequest,
    cfg: FLConfig,
    original: ParamVector,
    ascent_epochs: int = 2,
    finetune_epochs: int | None = None,
    finetune_rounds: int | None = None,
    ascent_lr: float | None = None,
    defense: DefenseConfig = NO_DEFENSE,
) -> UnlearnOutcome:
    """Ascent on forgotten samples at each target client, then federated fine-tuning.

    Round 1 of the unlearning log holds the target clients' updates only.
    A target left without samples contributes its ascent update and is then
    excluded from sampling.
    """
    t0 = time.perf_counter()
    request.validate(client_datasets, strict=False)
    finetune_epochs = cfg.local_epochs if finetune_epochs is None else finetune_epochs
    finetune_rounds = max(1, cfg.rounds // 2) if finetune_rounds is None else finetune_rounds
    ascent_lr = cfg.lr if ascent_lr is None else ascent_lr
    remaining = request.remaining(client_datasets)
    forgotten = request.forgotten(client_datasets)
    log = UpdateLog(phase="unlearning", initial=original, meta={"method": "approx"})
    targets = request.sample_clients
    w = original
    if targets:
        deltas, weights = [], []
        for k in targets:
            rng = derive_rng(cfg.seed, "unlearn-local", k)
            local = gradient_ascent(spec, original, forgotten[k], ascent_epochs, ascent_lr, cfg.batch_size, rng)
            if len(remaining[k]) and finetune_epochs:
                local = local + local_train(spec, local, remaining[k], cfg, rng, epochs=finetune_epochs)
            delta = defense.apply(local - original, cfg.seed, "unlearning", 1, k)
            deltas.append(delta)
            weights.append(max(len(remaining[k]), len(forgotten[k])))
        rec = RoundRecord(1, list(targets), deltas, [float(x) for x in normalize_weights(weights)])
        w = w + rec.aggregate()
        log.records.append(rec)
    dropped = [k for k, d in enumerate(remaining) if len(d) == 0]
    log.final = w
    if finetune_rounds > 0 and any(len(d) for d in remaining):
        w, log = run_training(
            spec, remaining, cfg, init=w, defense=defense, phase="unlearning",
            rounds=finetune_rounds, allow_empty=True, log=log,
        )
    log.meta["dropped"] = dropped
    return UnlearnOutcome(w, log, "approx", time.perf_counter() - t0, dropped)


def unlearn_client_eraser(
    spec: ModelSpec,
    client_datasets: Sequence[Dataset],
    request: UnlearnRequest,
    cfg: FLConfig,
    training_log: UpdateLog,
    calibration_epochs: int = 1,
    defense: DefenseConfig = NO_DEFENSE,
) -> UnlearnOutcome:
    """Calibrated replay of the training log without the forgotten clients."""
    t0 = time.perf_counter()
    request.validate(client_datasets, strict=False)
    if not training_log.records:
        raise LogFormatError("training log has no round records to calibrate")
    forgotten = set(request.clients)
    if not any(forgotten & set(r.clients) for r in training_log.records):
        original = training_log.final
        log = UpdateLog("unlearning", original, original, [], {"method": "eraser", "note": "nothing to erase"})
        return UnlearnOutcome(original, log, "eraser", time.perf_counter() - t0)
    w = training_log.initial
    log = UpdateLog(phase="unlearning", initial=w, meta={"method": "eraser"})
    for rec in training_log.records:
        keep = [k for k in rec.clients if k not in forgotten and len(client_datasets[k])]
        if not keep:
            continue
        calibrated = []
        for k in keep:
            rng = derive_rng(cfg.seed, "calibrate", k, rec.round)
            ref = local_train(spec, w, client_datasets[k], cfg, rng, epochs=calibration_epochs)
            ref = defense.apply(ref, cfg.seed, "unlearning", rec.round, k)
            norm = ref.l2()
            scale = rec.delta_of(k).l2() / norm if norm > 0 else 0.0
            calibrated.append(ref * scale)
        weights = normalize_weights([len(client_datasets[k]) for k in keep])
        new = RoundRecord(rec.round, keep, calibrated, [float(x) for x in weights])
        w = w + new.aggregate()
        log.records.append(new)
    log.final = w
    return UnlearnOutcome(w, log, "eraser", time.perf_counter() - t0, sorted(forgotten))


# Recovery rounds after pruning. The edit itself removes the class; the
# fine-tune only has to win back what dampening cost the remaining classes.
PRUNE_FINETUNE_ROUNDS = 2


def prune_output_classes(spec: ModelSpec, params: ParamVector, classes, prune_fraction: float = 0.1) -> ParamVector:
    """Zero the forgotten classes' output rows and biases, then dampen the
    hidden units (or conv channels) feeding the output layer whose outgoing
    weight mass goes mostly to those classes.

    A selected unit with score ``s`` has its incoming weights and bias scaled
    by ``1 - s``; the output weights of the remaining classes are left alone.
    """
    arrays = {k: v.copy() for k, v in params.arrays().items()}
    out = spec.output_layer
    v, b = arrays[f"{out}.weight"], arrays[f"{out}.bias"]
    cls = list(classes)
    original = v.copy()
    v[cls, :] = 0.0
    b[cls] = 0.0
    if len(spec._plan) > 1 and prune_fraction > 0:
        feeding = spec._plan[-2]
        forgotten_mass = np.abs(original[cls]).sum(axis=0)
        mass = np.abs(original).sum(axis=0)
        if feeding.kind == "conv":
            channels = feeding.weight_shape[0]
            forgotten_mass = forgotten_mass.reshape(-1, channels).sum(axis=0)
            mass = mass.reshape(-1, channels).sum(axis=0)
        score = np.divide(forgotten_mass, mass, out=np.zeros_like(mass), where=mass > 0)
        n_units = int(math.ceil(prune_fraction * score.size))
        top = np.lexsort((np.arange(score.size), -score))[:n_units]
        scale = 1.0 - score[top]
        w_in, b_in = arrays[f"{feeding.name}.weight"], arrays[f"{feeding.name}.bias"]
        w_in[top] *= scale.reshape((-1,) + (1,) * (w_in.ndim - 1))
        b_in[top] *= scale
    return ParamVector.from_arrays(arrays)


def unlearn_class_prune(
    spec: ModelSpec,
    client_datasets: Sequence[Dataset],
    request: UnlearnRequest,
    cfg: FLConfig,
    original: ParamVector,
    prune_fraction: float = 0.1,
    finetune_rounds: int = PRUNE_FINETUNE_ROUNDS,
    defense: DefenseConfig = NO_DEFENSE,
) -> UnlearnOutcome:
    """Class removal by output-unit pruning plus a short federated fine-tune.

    The log's initial vector is the pruned model (the server-side edit is not
    a client upload); ``meta['edited_from']`` records that it came from W^o.
    """
    t0 = time.perf_counter()
    if not request.classes:
        raise ValueError("class unlearning needs at least one forgotten class")
    n = spec.output_classes
    if len(set(request.classes)) >= n:
        raise ValueError("cannot forget every class")
    request.validate(client_datasets, class_count=n, strict=True)
    edited = prune_output_classes(spec, original, request.classes, prune_fraction)
    remaining = request.remaining(client_datasets)
    dropped = [k for k, d in enumerate(remaining) if len(d) == 0]
    log = UpdateLog("unlearning", edited, edited, [], {"method": "prune", "edited_from": "original"})
    w = edited
    if finetune_rounds > 0:
        w, log = run_training(
            spec, remaining, cfg, init=edited, defense=defense, phase="unlearning",
            rounds=finetune_rounds, allow_empty=True, log=log,
        )
    log.meta["dropped"] = dropped
    return UnlearnOutcome(w, log, "prune", time.perf_counter() - t0, dropped)
