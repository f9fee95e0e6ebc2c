"""Federated training (FedAvg / FedSGD) with a server-side update log.

The server is honest-but-curious: it follows the protocol and records every
uploaded client delta in an :class:`UpdateLog`.
"""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import Dataset
from .defense import NO_DEFENSE, DefenseConfig
from .errors import LogFormatError
from .nn import Batch, ModelSpec, ParamVector, grad_params, init_params
from .nn.params import layer_map_from_json, layer_map_to_json
from .rng import derive_rng

LOG_VERSION = 1


@dataclass(frozen=True)
class FLConfig:
    n_clients: int = 10
    participation: float = 0.5
    local_epochs: int = 3
    rounds: int = 10
    lr: float = 0.1
    aggregation: str = "fedavg"  # fedavg | fedsgd
    batch_size: int = 0  # 0 = full local batch
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.participation <= 1.0:
            raise ValueError("participation must lie in (0, 1]")
        if self.rounds < 1:
            raise ValueError("rounds must be at least 1")
        if self.aggregation not in ("fedavg", "fedsgd"):
            raise ValueError(f"unknown aggregation {self.aggregation!r}")
        if self.local_epochs < 0 or self.batch_size < 0 or self.n_clients < 1:
            raise ValueError("negative epochs, batch size, or client count")


@dataclass
class RoundRecord:
    round: int
    clients: list[int]
    deltas: list[ParamVector]
    weights: list[float]

    def delta_of(self, client: int) -> ParamVector:
        return self.deltas[self.clients.index(client)]

    def aggregate(self) -> ParamVector:
        return aggregate_fedavg(self.deltas, self.weights)


@dataclass
class UpdateLog:
    phase: str
    initial: ParamVector
    final: ParamVector | None = None
    records: list[RoundRecord] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def participated(self, client: int) -> list[RoundRecord]:
        return [r for r in self.records if client in r.clients]

    def replay(self) -> ParamVector:
        w = self.initial
        for rec in self.records:
            w = w + rec.aggregate()
        return w

    def telescoping_error(self) -> float:
        return float(np.max(np.abs(self.replay().data - self.final.data), initial=0.0))

    def check_telescoping(self, tol: float = 1e-9) -> None:
        err = self.telescoping_error()
        if err > tol:
            raise LogFormatError(f"{self.phase} log violates telescoping by {err:.3e}")


def normalize_weights(weights: Sequence[float]) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    if w.size == 0 or np.any(w < 0) or not np.any(w > 0):
        raise ValueError("aggregation weights must be non-negative with a positive sum")
    return w / w.sum()


def aggregate_fedavg(deltas: Sequence[ParamVector], client_weights: Sequence[float]) -> ParamVector:
    """Weighted mean of client deltas (weights renormalized to sum 1)."""
    w = normalize_weights(client_weights)
    if len(deltas) != w.size:
        raise ValueError(f"{len(deltas)} deltas but {w.size} weights")
    base = deltas[0]
    for d in deltas[1:]:
        base.check_compatible(d)
    return base.with_data(np.sum([wi * d.data for wi, d in zip(w, deltas)], axis=0))


def aggregate_fedsgd(gradients: Sequence[ParamVector], weights: Sequence[float], lr: float) -> ParamVector:
    """Single server step ``-lr * weighted mean gradient``."""
    return aggregate_fedavg(gradients, weights) * (-lr)


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    if batch_size <= 0 or batch_size >= n:
        yield np.arange(n)
        return
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def local_train(
    spec: ModelSpec,
    global_params: ParamVector,
    client_data: Dataset,
    cfg: FLConfig,
    rng: np.random.Generator | None = None,
    epochs: int | None = None,
    lr: float | None = None,
) -> ParamVector:
    """Mini-batch descent from ``global_params``; returns ``trained - global``.

    Full-batch epochs draw nothing from ``rng``.
    """
    if len(client_data) == 0:
        raise ValueError("client has no samples")
    epochs = cfg.local_epochs if epochs is None else epochs
    lr = cfg.lr if lr is None else lr
    rng = rng if rng is not None else np.random.default_rng(0)
    w = global_params
    for _ in range(epochs):
        for idx in _batches(len(client_data), cfg.batch_size, rng):
            g = grad_params(spec, w, Batch(client_data.images[idx], client_data.labels[idx]))
            w = w.with_data(w.data - lr * g.data)
    return w - global_params


def gradient_ascent(spec, params, data: Dataset, epochs: int, lr: float, batch_size=0, rng=None) -> ParamVector:
    """Ascend the mean loss on ``data``; returns the new parameters."""
    rng = rng if rng is not None else np.random.default_rng(0)
    w = params
    for _ in range(epochs):
        for idx in _batches(len(data), batch_size, rng):
            g = grad_params(spec, w, Batch(data.images[idx], data.labels[idx]))
            w = w.with_data(w.data + lr * g.data)
    return w


def participation_count(fraction: float, eligible: int) -> int:
    return max(1, min(eligible, int(math.floor(fraction * eligible + 0.5))))


def sample_clients(seed: int, round_index: int, eligible: Sequence[int], fraction: float) -> list[int]:
    """Seeded draw without replacement of round(fraction * |eligible|) clients."""
    eligible = sorted(eligible)
    m = participation_count(fraction, len(eligible))
    rng = derive_rng(seed, "participants", round_index)
    picked = rng.choice(len(eligible), size=m, replace=False)
    return sorted(eligible[i] for i in picked)


def client_upload(
    spec: ModelSpec,
    params: ParamVector,
    data: Dataset,
    cfg: FLConfig,
    round_index: int,
    client: int,
    phase: str,
    defense: DefenseConfig = NO_DEFENSE,
) -> ParamVector:
    """The delta a client uploads for one round, after its defense is applied."""
    rng = derive_rng(cfg.seed, "local", client, round_index)
    if cfg.aggregation == "fedsgd":
        g = grad_params(spec, params, Batch(data.images, data.labels))
        g = defense.apply(g, cfg.seed, phase, round_index, client)
        return g * (-cfg.lr)
    delta = local_train(spec, params, data, cfg, rng)
    return defense.apply(delta, cfg.seed, phase, round_index, client)


def federated_round(
    spec: ModelSpec,
    params: ParamVector,
    client_datasets: Sequence[Dataset | None],
    clients: Sequence[int],
    cfg: FLConfig,
    round_index: int,
    phase: str,
    defense: DefenseConfig = NO_DEFENSE,
) -> tuple[ParamVector, RoundRecord]:
    deltas = [
        client_upload(spec, params, client_datasets[k], cfg, round_index, k, phase, defense) for k in clients
    ]
    weights = normalize_weights([len(client_datasets[k]) for k in clients])
    rec = RoundRecord(round_index, list(clients), deltas, [float(x) for x in weights])
    return params + rec.aggregate(), rec


def eligible_clients(client_datasets: Sequence[Dataset | None], exclude=()) -> list[int]:
    excl = set(exclude)
    return [k for k, d in enumerate(client_datasets) if d is not None and len(d) > 0 and k not in excl]


def run_training(
    spec: ModelSpec,
    client_datasets: Sequence[Dataset | None],
    cfg: FLConfig,
    init: ParamVector | None = None,
    defense: DefenseConfig = NO_DEFENSE,
    phase: str = "training",
    rounds: int | None = None,
    exclude: Sequence[int] = (),
    allow_empty: bool = False,
    log: UpdateLog | None = None,
) -> tuple[ParamVector, UpdateLog]:
    """Run federated rounds and record every client delta.

    Clients listed in ``exclude`` or holding no data are never sampled. Rounds
    are numbered from 1; when appending to ``log`` numbering continues.
    """
    if not allow_empty:
        for k, d in enumerate(client_datasets):
            if d is None or len(d) == 0:
                raise ValueError(f"client {k} has no samples")
    w = init if init is not None else init_params(spec, derive_rng(cfg.seed, "init"))
    if log is None:
        log = UpdateLog(phase=phase, initial=w)
    eligible = eligible_clients(client_datasets, exclude)
    if not eligible:
        raise ValueError("no client has data to train on")
    start = len(log.records)
    for t in range(start + 1, start + (cfg.rounds if rounds is None else rounds) + 1):
        clients = sample_clients(cfg.seed, t, eligible, cfg.participation)
        w, rec = federated_round(spec, w, client_datasets, clients, cfg, t, phase, defense)
        log.records.append(rec)
    log.final = w
    return w, log


def pretrain(spec: ModelSpec, data: Dataset, epochs: int, lr: float, batch_size: int, seed: int) -> ParamVector:
    """Centralized pretraining run by the server before federation starts."""
    w = init_params(spec, derive_rng(seed, "init"))
    rng = derive_rng(seed, "pretrain")
    cfg = FLConfig(local_epochs=epochs, lr=lr, batch_size=batch_size)
    return w + local_train(spec, w, data, cfg, rng)


# -- persistence ------------------------------------------------------------

def _blob(vec: ParamVector) -> bytes:
    return vec.data.astype("<f8").tobytes()


def save_update_log(log: UpdateLog, path) -> None:
    """Directory with ``manifest.json`` plus raw little-endian float64 payloads."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    chunks, entries, rounds, offset = [], [], [], 0
    for rec in log.records:
        rounds.append({"round": rec.round, "clients": rec.clients, "weights": rec.weights})
        for k, wgt, d in zip(rec.clients, rec.weights, rec.deltas):
            blob = _blob(d)
            entries.append(
                {
                    "round": rec.round,
                    "client_id": k,
                    "weight": wgt,
                    "file": "deltas.bin",
                    "offset": offset,
                    "shape": [len(d)],
                    "crc32": zlib.crc32(blob),
                }
            )
            chunks.append(blob)
            offset += len(blob)
    (path / "deltas.bin").write_bytes(b"".join(chunks))
    ends = {}
    for name, vec in (("initial", log.initial), ("final", log.final)):
        blob = _blob(vec)
        (path / f"{name}.bin").write_bytes(blob)
        ends[name] = {"file": f"{name}.bin", "shape": [len(vec)], "crc32": zlib.crc32(blob)}
    manifest = {
        "version": LOG_VERSION,
        "phase": log.phase,
        "layers": layer_map_to_json(log.initial.layer_map),
        "rounds": rounds,
        "records": entries,
        "meta": log.meta,
        **ends,
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def _read_blob(path: Path, file: str, offset: int, length: int, crc: int, layer_map, what: str) -> ParamVector:
    total = sum(s.size for s in layer_map)
    if length != total:
        raise LogFormatError(f"{what}: manifest shape {length} does not match layer map size {total}")
    raw = (path / file).read_bytes()
    blob = raw[offset : offset + 8 * length]
    if len(blob) != 8 * length:
        raise LogFormatError(f"{what}: checksum failure, {file} truncated ({len(blob)} of {8 * length} bytes)")
    if zlib.crc32(blob) != crc:
        raise LogFormatError(f"{what}: checksum failure in {file}")
    return ParamVector(np.frombuffer(blob, dtype="<f8"), layer_map)


def load_update_log(path) -> UpdateLog:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except FileNotFoundError as exc:
        raise LogFormatError(f"{path}: no manifest.json") from exc
    if manifest.get("version") != LOG_VERSION:
        raise LogFormatError(f"{path}: log version {manifest.get('version')} != {LOG_VERSION}")
    layer_map = layer_map_from_json(manifest["layers"])
    ends = {}
    for name in ("initial", "final"):
        e = manifest[name]
        ends[name] = _read_blob(path, e["file"], 0, int(e["shape"][0]), e["crc32"], layer_map, name)
    deltas = {}
    for e in manifest["records"]:
        what = f"round {e['round']} client {e['client_id']}"
        deltas[(e["round"], e["client_id"])] = _read_blob(
            path, e["file"], e["offset"], int(e["shape"][0]), e["crc32"], layer_map, what
        )
    records = []
    for r in manifest["rounds"]:
        try:
            ds = [deltas[(r["round"], k)] for k in r["clients"]]
        except KeyError as exc:
            raise LogFormatError(f"{path}: missing record for round {r['round']}") from exc
        records.append(RoundRecord(r["round"], list(r["clients"]), ds, list(r["weights"])))
    return UpdateLog(manifest["phase"], ends["initial"], ends["final"], records, manifest.get("meta", {}))
