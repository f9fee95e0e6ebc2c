"""Staged, seeded experiment runner: train -> unlearn -> attack -> report.

Each trial lives in ``<out>/trial-NNN`` with one subdirectory per stage.
A stage writes ``stage.json`` holding the hash of the configuration
sections it consumed; the next stage refuses inputs whose hash differs
from the current configuration. Data, partitions and requests are pure
functions of (config, trial seed), so a stage can rebuild them instead of
reading them back.

Everything written is deterministic except ``timings.json`` (and the
``runtime_s`` column when ``report.timings`` is switched on).
"""

from __future__ import annotations

import csv
import io
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import __version__
from .attack import (
    GradientEstimate,
    InversionConfig,
    fuia_class,
    fuia_client,
    fuia_sample,
    infer_labels,
    match_images,
    muia_baseline,
    random_init,
)
from .config import Config
from .data import Dataset, load_images, partition, split_pretrain, synthesize, write_pnm
from .errors import FuiaError, StageError, UndefinedCosineError
from .fed import load_update_log, pretrain, run_training, save_update_log
from .metrics import psnr_from_mse
from .nn import Conv2d, Dense, ModelSpec, accuracy, init_params, load_params, save_params
from .rng import derive_rng, derive_seed
from .unlearn import (
    PRUNE_FINETUNE_ROUNDS,
    UnlearnRequest,
    retrain_exact,
    unlearn_class_prune,
    unlearn_client_eraser,
    unlearn_sample_approx,
)

METRICS_HEADER = ["experiment", "scenario", "method", "attack", "seed", "image_idx", "mse", "psnr", "label_acc", "runtime_s"]
STAGES = ("train", "unlearn", "attack")


def trial_seed(master: int, index: int) -> int:
    """Seed of trial ``index``; independent of how many trials run."""
    return derive_seed(master, "trial", index)


def trial_dir(cfg: Config, index: int) -> Path:
    return Path(cfg.experiment.out) / f"trial-{index:03d}"


def _write_json(path: Path, payload) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _read_json(path: Path):
    return json.loads(path.read_text())


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


# -- deterministic reconstruction of the trial setting -----------------------

def build_model_spec(cfg: Config, input_shape, n_classes: int) -> ModelSpec:
    m = cfg.model
    layers = [Conv2d(c, m.conv_kernel, m.conv_stride) for c in m.conv_channels]
    layers += [Dense(w) for w in m.hidden]
    layers.append(Dense(n_classes))
    return ModelSpec(tuple(input_shape), tuple(layers), n_classes, m.activation)


def build_data(cfg: Config, seed: int) -> tuple[Dataset, Dataset]:
    """The trial's training pool and held-out evaluation set."""
    d = cfg.data
    if d.source == "synthetic":
        pool = synthesize(d.classes, d.per_class, d.shape, derive_seed(seed, "data"))
        heldout = synthesize(d.classes, max(d.heldout_per_class, 1), d.shape, derive_seed(seed, "heldout"))
        if d.heldout_per_class == 0:
            heldout = heldout.subset([])
        return pool, heldout
    ds = load_images(d.path, d.source, d.classes, d.labels_path or None)
    n_held = min(d.heldout_per_class * ds.class_count, len(ds) // 5)
    order = derive_rng(seed, "heldout").permutation(len(ds))
    return ds.subset(np.sort(order[n_held:])), ds.subset(np.sort(order[:n_held]))


def build_setting(cfg: Config, index: int):
    """Model spec, client datasets, held-out set, initial weights and partition."""
    seed = trial_seed(cfg.experiment.seed, index)
    pool, heldout = build_data(cfg, seed)
    spec = build_model_spec(cfg, pool.shape, pool.class_count)
    d = cfg.data
    if d.pretrain_fraction > 0:
        public, private = split_pretrain(pool, d.pretrain_fraction, derive_seed(seed, "pretrain-split"))
        w0 = pretrain(spec, public, d.pretrain_epochs, d.pretrain_lr, d.pretrain_batch, derive_seed(seed, "pretrain"))
    else:
        private = pool
        w0 = init_params(spec, derive_rng(seed, "init"))
    plan = partition(
        private, cfg.fl.clients, d.partition, derive_seed(seed, "partition"),
        per_client=d.per_client if d.partition == "count" else None, alpha=d.dirichlet_alpha,
    )
    return seed, spec, plan.split(private), heldout, w0, plan.assignment


# -- stage bookkeeping ------------------------------------------------------

def _stage_record(cfg: Config, stage: str, index: int, seed: int) -> dict:
    return {"stage": stage, "config_hash": cfg.stage_hash(stage), "trial": index, "seed": seed, "version": __version__}


def _require(cfg: Config, index: int, stage: str) -> dict:
    """The stage.json of ``stage`` for this trial, checked against the current config."""
    path = trial_dir(cfg, index) / stage / "stage.json"
    if not path.exists():
        raise StageError(stage, f"missing artifacts for trial {index} in {path.parent}; run the {stage} stage first")
    record = _read_json(path)
    if record.get("config_hash") != cfg.stage_hash(stage):
        raise StageError(
            stage,
            f"stale artifacts for trial {index} in {path.parent}: produced with a different configuration; "
            f"rerun the {stage} stage",
        )
    return record


def _record_time(cfg: Config, index: int, stage: str, seconds: float) -> None:
    path = trial_dir(cfg, index) / "timings.json"
    timings = _read_json(path) if path.exists() else {}
    timings[stage] = seconds
    _write_json(path, timings)


# -- stages -----------------------------------------------------------------

def train_trial(cfg: Config, index: int) -> Path:
    t0 = time.perf_counter()
    seed, spec, clients, _, w0, assignment = build_setting(cfg, index)
    empty_ok = any(len(c) == 0 for c in clients)
    w, log = run_training(
        spec, clients, cfg.fl_config(seed), init=w0, defense=cfg.defense_config(), allow_empty=empty_ok
    )
    out = trial_dir(cfg, index) / "train"
    save_params(w0, out / "initial")
    save_params(w, out / "original")
    save_update_log(log, out / "training_log")
    _write_json(out / "partition.json", {"assignment": [int(a) for a in assignment], "sizes": [len(c) for c in clients]})
    _write_json(out / "stage.json", _stage_record(cfg, "train", index, seed))
    _record_time(cfg, index, "train", time.perf_counter() - t0)
    return out


def make_request(cfg: Config, seed: int, clients: Sequence[Dataset], training_log, n_classes: int) -> UnlearnRequest:
    """Seeded unlearning request. Targets are drawn from clients that took part in training."""
    u = cfg.unlearn
    rng = derive_rng(seed, "request")
    participants = sorted({c for rec in training_log.records for c in rec.clients if len(clients[c])})
    if u.scenario == "class":
        return UnlearnRequest("class", classes=tuple(sorted(int(c) for c in rng.choice(n_classes, u.forget_classes, replace=False))))
    count = u.target_clients if u.scenario == "sample" else u.forget_clients
    if len(participants) < count:
        raise StageError("unlearn", f"only {len(participants)} clients took part in training; {count} targets requested")
    targets = sorted(int(c) for c in rng.choice(participants, count, replace=False))
    if u.scenario == "client":
        return UnlearnRequest("client", clients=tuple(targets))
    samples = {}
    for k in targets:
        m = min(u.forget_samples, len(clients[k]))
        samples[k] = tuple(sorted(int(i) for i in rng.choice(len(clients[k]), m, replace=False)))
    return UnlearnRequest("sample", samples=samples)


def _request_json(req: UnlearnRequest) -> dict:
    return {
        "scenario": req.scenario,
        "clients": list(req.clients),
        "samples": {str(k): list(v) for k, v in sorted(req.samples.items())},
        "classes": list(req.classes),
    }


def _request_from_json(payload: dict) -> UnlearnRequest:
    return UnlearnRequest(
        payload["scenario"],
        clients=tuple(payload["clients"]),
        samples={int(k): tuple(v) for k, v in payload["samples"].items()},
        classes=tuple(payload["classes"]),
    )


def run_unlearning(cfg: Config, spec, clients, request, fl, w0, original, training_log):
    u, defense = cfg.unlearn, cfg.defense_config()
    if u.method == "retrain":
        rfl = fl if u.rounds == -1 else replace(fl, rounds=u.rounds)
        return retrain_exact(spec, clients, request, rfl, init=w0, defense=defense)
    if u.method == "approx":
        return unlearn_sample_approx(
            spec, clients, request, fl, original, ascent_epochs=u.ascent_epochs,
            finetune_rounds=None if u.finetune_rounds == -1 else u.finetune_rounds, defense=defense,
        )
    if u.method == "eraser":
        return unlearn_client_eraser(
            spec, clients, request, fl, training_log, calibration_epochs=u.calibration_epochs, defense=defense
        )
    return unlearn_class_prune(
        spec, clients, request, fl, original, prune_fraction=u.prune_fraction,
        finetune_rounds=PRUNE_FINETUNE_ROUNDS if u.finetune_rounds == -1 else u.finetune_rounds, defense=defense,
    )


def unlearn_trial(cfg: Config, index: int) -> Path:
    t0 = time.perf_counter()
    _require(cfg, index, "train")
    seed, spec, clients, heldout, _, _ = build_setting(cfg, index)
    base = trial_dir(cfg, index)
    try:
        w0 = load_params(base / "train" / "initial")
        original = load_params(base / "train" / "original")
        training_log = load_update_log(base / "train" / "training_log")
    except (OSError, FuiaError) as exc:
        raise StageError("train", f"cannot read training artifacts for trial {index}: {exc}") from exc
    request = make_request(cfg, seed, clients, training_log, spec.output_classes)
    outcome = run_unlearning(cfg, spec, clients, request, cfg.fl_config(seed), w0, original, training_log)
    out = base / "unlearn"
    save_params(outcome.params, out / "unlearned")
    save_update_log(outcome.log, out / "unlearning_log")
    _write_json(out / "request.json", _request_json(request))
    acc = {}
    if len(heldout):
        acc = {
            "original": accuracy(spec, original, heldout.images, heldout.labels),
            "unlearned": accuracy(spec, outcome.params, heldout.images, heldout.labels),
        }
    _write_json(out / "outcome.json", {"method": outcome.method, "dropped": outcome.dropped, "heldout_accuracy": acc})
    _write_json(out / "stage.json", _stage_record(cfg, "unlearn", index, seed))
    _record_time(cfg, index, "unlearn", time.perf_counter() - t0)
    return out


def _label_acc(predicted: Sequence[int], truth: Sequence[int]) -> float:
    """Multiset overlap between predicted and true labels, as a fraction."""
    remaining = list(truth)
    hits = 0
    for p in predicted:
        if p in remaining:
            remaining.remove(p)
            hits += 1
    return hits / len(truth) if truth else float("nan")


def _inversion_config(cfg: Config, seed: int, client: int, m: int) -> InversionConfig:
    a = cfg.attack
    return InversionConfig(
        iterations=a.iterations, lr=a.lr, alpha=a.alpha, gamma=a.gamma, restarts=a.restarts,
        images=m, label_mode=a.label_mode, seed=derive_seed(seed, "attack", client),
    )


def attack_trial(cfg: Config, index: int) -> Path:
    t0 = time.perf_counter()
    _require(cfg, index, "unlearn")
    seed, spec, clients, _, _, _ = build_setting(cfg, index)
    base = trial_dir(cfg, index)
    try:
        original = load_params(base / "train" / "original")
        training_log = load_update_log(base / "train" / "training_log")
        unlearned = load_params(base / "unlearn" / "unlearned")
        unlearning_log = load_update_log(base / "unlearn" / "unlearning_log")
        request = _request_from_json(_read_json(base / "unlearn" / "request.json"))
    except (OSError, KeyError, FuiaError) as exc:
        raise StageError("unlearn", f"cannot read unlearning artifacts for trial {index}: {exc}") from exc
    out = base / "attack"
    if out.exists():
        for old in sorted(out.rglob("*"), reverse=True):
            old.unlink() if old.is_file() else old.rmdir()
    rows, report = [], {"trial": index, "seed": seed, "request": _request_json(request), "attacks": []}
    scenario, method = cfg.unlearn.scenario, cfg.unlearn.method

    def add_rows(attack: str, mses, label_acc, client=None):
        for i, mse in enumerate(mses):
            psnr = None if mse is None else psnr_from_mse(mse)
            rows.append([cfg.experiment.id, scenario, method, attack, seed, i, mse, psnr, label_acc, None])

    if scenario == "class":
        scores = fuia_class(original, unlearned, k=len(request.classes), beta=cfg.attack.beta)
        scores.write_csv(out / "scores.csv")
        acc = _label_acc(list(scores.inferred), list(request.classes))
        rows.append([cfg.experiment.id, scenario, method, "fuia-class", seed, None, None, None, acc, None])
        report["attacks"].append({"attack": "fuia-class", "inferred": list(scores.inferred), "truth": list(request.classes)})
    else:
        targets = request.sample_clients if scenario == "sample" else request.clients
        for k in targets:
            idx = list(request.samples[k]) if scenario == "sample" else list(range(len(clients[k])))
            truth_imgs = clients[k].images[idx]
            truth_labels = [int(v) for v in clients[k].labels[idx]]
            icfg = _inversion_config(cfg, seed, k, len(idx))
            labels = truth_labels if cfg.attack.label_mode == "known" else None
            entry = {"client": k, "truth_labels": truth_labels}
            try:
                if scenario == "sample":
                    result, target = fuia_sample(spec, original, training_log, unlearning_log, k, labels, icfg, truth_imgs)
                else:
                    result, target = fuia_client(spec, original, unlearned, training_log, k, labels, icfg, truth_imgs)
                inferred = infer_labels(target.as_gradient(), len(idx))
                add_rows("fuia", result.mse, _label_acc(inferred, truth_labels))
                entry["fuia"] = result.to_json() | {"inferred_labels": inferred}
                _save_recon(out / "images" / f"client-{k:03d}" / "fuia", result.images, result.matching)
            except UndefinedCosineError as exc:
                add_rows("fuia", [None] * len(idx), None)
                entry["fuia"] = {"error": str(exc)}
            if cfg.attack.muia:
                try:
                    m = muia_baseline(spec, original, unlearned, labels, icfg, truth_imgs)
                    diff = GradientEstimate(original - unlearned, "global_diff").as_gradient()
                    add_rows("muia", m.mse, _label_acc(infer_labels(diff, len(idx)), truth_labels))
                    entry["muia"] = m.to_json()
                    _save_recon(out / "images" / f"client-{k:03d}" / "muia", m.images, m.matching)
                except UndefinedCosineError as exc:
                    add_rows("muia", [None] * len(idx), None)
                    entry["muia"] = {"error": str(exc)}
            if cfg.attack.baseline:
                init = random_init(icfg, spec.input_shape, 0)
                matching, mses = match_images(init, truth_imgs)
                add_rows("random", mses, None)
                entry["random"] = {"matching": matching, "mse": mses}
            if cfg.report.images:
                _save_recon(out / "images" / f"client-{k:03d}" / "truth", truth_imgs, list(range(len(idx))))
            report["attacks"].append(entry)
    elapsed = time.perf_counter() - t0
    if cfg.report.timings:
        for row in rows:
            row[-1] = elapsed
    _write_metrics(out / "metrics.csv", rows)
    _write_json(out / "report.json", report)
    _write_json(out / "stage.json", _stage_record(cfg, "attack", index, seed))
    _record_time(cfg, index, "attack", elapsed)
    return out


def _save_recon(path: Path, images: np.ndarray, matching: Sequence[int]) -> None:
    """Write images ordered by the ground-truth index they were matched to."""
    for i, img in enumerate(images):
        slot = matching[i] if matching else i
        ext = ".pgm" if img.shape[0] == 1 else ".ppm"
        write_pnm(path / f"{slot:02d}{ext}", img)


def _write_metrics(path: Path, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    path.write_text(buf.getvalue())


def read_metrics(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


# -- report -----------------------------------------------------------------

def _median(values) -> float | None:
    vals = [float(v) for v in values if v not in ("", None)]
    return float(np.median(vals)) if vals else None


def summarize(rows: Sequence[dict]) -> list[dict]:
    """Median MSE / PSNR / label accuracy per (scenario, method, attack)."""
    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        groups.setdefault((r["scenario"], r["method"], r["attack"]), []).append(r)
    out = []
    for (scenario, method, attack), members in groups.items():
        out.append({
            "scenario": scenario,
            "method": method,
            "attack": attack,
            "rows": len(members),
            "trials": len({m["seed"] for m in members}),
            "median_mse": _median(m["mse"] for m in members),
            "median_psnr": _median(m["psnr"] for m in members),
            "median_label_acc": _median(m["label_acc"] for m in members),
        })
    return out


def _table(summary: Sequence[dict]) -> str:
    cols = ["scenario", "method", "attack", "trials", "median_mse", "median_psnr", "median_label_acc"]
    cells = [[("-" if s[c] is None else f"{s[c]:.4g}" if isinstance(s[c], float) else str(s[c])) for c in cols] for s in summary]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(cols)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join(lines) + "\n"


def report(cfg: Config) -> Path:
    out = Path(cfg.experiment.out)
    rows, models = [], []
    for i in range(cfg.experiment.trials):
        _require(cfg, i, "attack")
        rows += read_metrics(trial_dir(cfg, i) / "attack" / "metrics.csv")
        outcome = _read_json(trial_dir(cfg, i) / "unlearn" / "outcome.json")
        acc = outcome.get("heldout_accuracy", {})
        models.append([i, trial_seed(cfg.experiment.seed, i), acc.get("original"), acc.get("unlearned")])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    for r in rows:
        w.writerow([r[c] for c in METRICS_HEADER])
    (out / "metrics.csv").write_text(buf.getvalue())
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["trial", "seed", "heldout_acc_original", "heldout_acc_unlearned"])
    for m in models:
        w.writerow([_fmt(v) for v in m])
    (out / "models.csv").write_text(buf.getvalue())
    summary = summarize(rows)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    keys = ["scenario", "method", "attack", "rows", "trials", "median_mse", "median_psnr", "median_label_acc"]
    w.writerow(keys)
    for s in summary:
        w.writerow([_fmt(s[k]) for k in keys])
    (out / "summary.csv").write_text(buf.getvalue())
    (out / "summary.txt").write_text(_table(summary))
    _write_json(out / "run.json", {
        "experiment": cfg.experiment.id,
        "seed": cfg.experiment.seed,
        "trials": cfg.experiment.trials,
        "trial_seeds": [trial_seed(cfg.experiment.seed, i) for i in range(cfg.experiment.trials)],
        "config_hashes": {s: cfg.stage_hash(s) for s in STAGES},
        "config": cfg.to_dict(),
        "version": __version__,
    })
    (out / "config.ini").write_text(cfg.to_ini())
    if cfg.report.plots:
        from .plotting import render_report

        render_report(cfg, out, summary)
    return out


# -- drivers ----------------------------------------------------------------

STAGE_FUNCS: dict[str, Callable[[Config, int], Path]] = {
    "train": train_trial,
    "unlearn": unlearn_trial,
    "attack": attack_trial,
}


def _run_stage_trial(args) -> str:
    stage, cfg, index = args
    try:
        return str(STAGE_FUNCS[stage](cfg, index))
    except StageError:
        raise
    except FuiaError as exc:
        raise StageError(stage, f"trial {index}: {exc}") from exc


def run_stage(cfg: Config, stage: str) -> list[Path]:
    """Run one stage over every trial, in a process pool when ``workers`` > 1."""
    if stage == "report":
        return [report(cfg)]
    jobs = [(stage, cfg, i) for i in range(cfg.experiment.trials)]
    Path(cfg.experiment.out).mkdir(parents=True, exist_ok=True)
    if cfg.experiment.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=cfg.experiment.workers) as pool:
            return [Path(p) for p in pool.map(_run_stage_trial, jobs)]
    return [Path(_run_stage_trial(j)) for j in jobs]


def _full_trial(args) -> int:
    cfg, index = args
    for stage in STAGES:
        _run_stage_trial((stage, cfg, index))
    return index


def run_pipeline(cfg: Config) -> Path:
    """All stages for all trials, then the report."""
    Path(cfg.experiment.out).mkdir(parents=True, exist_ok=True)
    jobs = [(cfg, i) for i in range(cfg.experiment.trials)]
    if cfg.experiment.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=cfg.experiment.workers) as pool:
            list(pool.map(_full_trial, jobs))
    else:
        for job in jobs:
            _full_trial(job)
    return report(cfg)
