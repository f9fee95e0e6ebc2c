"""End-to-end acceptance criteria.

Each test prints one ``criterion N: PASS|FAIL`` line (repeated in the
terminal summary) and then asserts the same verdict. Pipeline runs are
shared between criteria through a module-level cache, so the p = 0 and
std = 0 defense points reuse the undefended sample-unlearning run.
"""

import csv
import time

import numpy as np
import pytest

from fuia_lab.attack import GradientEstimate, InversionConfig, infer_labels, invert_sample, separate_gradients
from fuia_lab.fed import FLConfig, aggregate_fedavg, local_train, run_training
from fuia_lab.nn import Batch, grad_input_of_objective, grad_params
from fuia_lab.pipeline import read_metrics, run_pipeline, summarize

from conftest import CLASS_SCENARIO, CLIENT_SCENARIO, VERDICTS, example_config, linear_softmax, random_mlp, toy_federation
from test_attack import _log

pytestmark = pytest.mark.acceptance

NO_PLOTS = {"report": {"plots": False}}


@pytest.fixture
def verdict(request, capsys):
    def check(n, ok, detail):
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
        request.config.stash[VERDICTS].append(line)
        with capsys.disabled():
            print(f"\n{line}")
        assert ok, line

    return check


class Runs:
    """Pipeline runs keyed by name, each executed once per session."""

    def __init__(self, root):
        self.root = root
        self.outs, self.seconds = {}, {}

    def get(self, name, *changes):
        if name not in self.outs:
            t0 = time.perf_counter()
            cfg = example_config(self.root / name, NO_PLOTS, *changes, {"experiment": {"id": name}})
            self.outs[name] = run_pipeline(cfg)
            self.seconds[name] = time.perf_counter() - t0
        return self.outs[name]

    def medians(self, name, *changes):
        rows = read_metrics(self.get(name, *changes) / "metrics.csv")
        return {s["attack"]: s for s in summarize(rows)}

    def psnr(self, name, *changes, attack="fuia"):
        return self.medians(name, *changes)[attack]["median_psnr"]

    def rows(self, name, *changes):
        return read_metrics(self.get(name, *changes) / "metrics.csv")

    def heldout(self, name, model):
        """Median held-out accuracy of the ``original`` or ``unlearned`` model."""
        with (self.get(name) / "models.csv").open() as fh:
            rows = list(csv.DictReader(fh))
        return float(np.median([float(r[f"heldout_acc_{model}"]) for r in rows]))

    def elapsed(self, *names):
        return sum(self.seconds[n] for n in names)


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    return Runs(tmp_path_factory.mktemp("acceptance"))


def _cosine_distance(target):
    tn = np.linalg.norm(target)

    def phi(g):
        gn = np.linalg.norm(g)
        c = float(g @ target) / (gn * tn)
        return 1.0 - c, -(target / (gn * tn) - c * g / gn**2)

    return phi


def test_criterion_1_input_gradients(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    errors = []
    for _ in range(20):
        spec, params = random_mlp(rng, max_layers=3, max_units=64)
        x = rng.uniform(size=(1, *spec.input_shape))
        y = [int(rng.integers(spec.output_classes))]
        phi = _cosine_distance(rng.normal(size=spec.n_params))
        dx = grad_input_of_objective(spec, params, x, y, phi).reshape(-1)
        h = 1e-5
        numeric = np.empty(x.size)
        for p in range(x.size):
            up, dn = x.copy().reshape(-1), x.copy().reshape(-1)
            up[p] += h
            dn[p] -= h
            fu = phi(grad_params(spec, params, Batch(up.reshape(x.shape), y)).data)[0]
            fd = phi(grad_params(spec, params, Batch(dn.reshape(x.shape), y)).data)[0]
            numeric[p] = (fu - fd) / (2 * h)
        errors.append(np.linalg.norm(dx - numeric) / np.linalg.norm(numeric))
    seconds = time.perf_counter() - t0
    worst = max(errors)
    verdict(1, worst <= 1e-4 and seconds < 10, f"max relative error {worst:.2e} over 20 MLPs, {seconds:.1f} s")


def test_criterion_2_separation_identity(verdict):
    cfg = FLConfig(n_clients=1, participation=1.0, local_epochs=2, rounds=6, lr=0.5, seed=11)
    single_errors = []
    for seed in range(5):
        spec, _ = random_mlp(np.random.default_rng(seed), max_layers=2, max_units=16)
        clients = toy_federation(seed, n_clients=1, per_client=10, classes=spec.output_classes, shape=spec.input_shape)
        final, log = run_training(spec, clients, cfg)
        est = separate_gradients(log, 0)
        single_errors.append(float(np.max(np.abs(est.values.data - (final - log.initial).data))))

    # hand-checkable scalar log: the share of round t is |d_k|_1 / sum_j |d_j|_1
    hand = _log([([0, 1, 2], [1.0, 2.0, -1.0]), ([0, 1], [3.0, -1.0]), ([1, 2], [2.0, 2.0]),
                 ([0, 2], [-2.0, 0.0]), ([0, 1, 2], [1.0, 1.0, 2.0])])
    hand_ok = [separate_gradients(hand, k).values.data[0] for k in range(3)] == [0.75, 2.0, 1.75]

    # brute force: replay a real 3-client, 5-round federation from scratch
    spec, _ = random_mlp(np.random.default_rng(3), max_layers=2, max_units=8)
    clients = toy_federation(3, n_clients=3, per_client=6, classes=spec.output_classes, shape=spec.input_shape)
    cfg3 = FLConfig(n_clients=3, participation=0.67, local_epochs=2, rounds=5, lr=0.5, seed=5)
    final, log = run_training(spec, clients, cfg3)
    w = log.initial
    recomputed = {k: None for k in range(3)}
    for rec in log.records:
        deltas = [local_train(spec, w, clients[k], cfg3) for k in rec.clients]
        norms = [float(np.abs(d.data).sum()) for d in deltas]
        for k, d, n in zip(rec.clients, deltas, norms):
            part = d * (n / sum(norms))
            recomputed[k] = part if recomputed[k] is None else recomputed[k] + part
        w = w + aggregate_fedavg(deltas, [len(clients[k]) for k in rec.clients])
    brute = max(float(np.max(np.abs(separate_gradients(log, k).values.data - v.data)))
                for k, v in recomputed.items() if v is not None)
    replay = float(np.max(np.abs(w.data - final.data)))
    ok = max(single_errors) <= 1e-9 and hand_ok and brute <= 1e-9 and replay <= 1e-9
    verdict(2, ok, f"single-client error {max(single_errors):.1e}, hand log {'ok' if hand_ok else 'wrong'}, "
                   f"brute-force error {brute:.1e}")


def test_criterion_3_exact_inversion(verdict):
    t0 = time.perf_counter()
    spec, params = linear_softmax(d=16, n=4, seed=3)
    x = np.random.default_rng(0).uniform(size=(1, 1, 1, 16))
    g = grad_params(spec, params, Batch(x, [2]))
    analytic = (g.view("dense0.weight")[2] / g.view("dense0.bias")[2]).reshape(x.shape)
    cfg = InversionConfig(iterations=600, lr=0.05, alpha=0.0, restarts=1, seed=1)
    result = invert_sample(spec, params, GradientEstimate(g, "exact"), [2], cfg, ground_truth=x)
    err = float(np.max(np.abs(result.images - analytic)))

    rng = np.random.default_rng(0)
    hits = 0
    for trial in range(50):
        spec_t, params_t = linear_softmax(d=12, n=6, seed=trial)
        xt = rng.uniform(size=(1, 1, 1, 12))
        y = int(rng.integers(6))
        hits += infer_labels(grad_params(spec_t, params_t, Batch(xt, [y])), 1) == [y]
    seconds = time.perf_counter() - t0
    verdict(3, err <= 1e-3 and hits == 50 and seconds < 60,
            f"max-abs error {err:.1e}, labels {hits}/50, {seconds:.1f} s")


def test_criterion_4_sample_unlearning(runs, verdict):
    med = runs.medians("sample-approx")
    retrain = runs.psnr("sample-retrain", {"unlearn": {"method": "retrain"}})
    fuia, muia, rand = (med[a]["median_psnr"] for a in ("fuia", "muia", "random"))
    seconds = runs.elapsed("sample-approx", "sample-retrain")
    ok = fuia >= rand + 6 and fuia >= muia and retrain <= fuia and seconds < 600
    verdict(4, ok, f"FUIA {fuia:.2f} dB, MUIA {muia:.2f}, random {rand:.2f}, retrain FUIA {retrain:.2f}, "
                   f"{seconds:.0f} s")


def test_criterion_5_client_unlearning(runs, verdict):
    med = runs.medians("client-g0.1", CLIENT_SCENARIO, {"attack": {"gamma": 0.1}})
    g05 = runs.psnr("client-g0.5", CLIENT_SCENARIO, {"attack": {"gamma": 0.5}})
    fuia, rand = med["fuia"]["median_psnr"], med["random"]["median_psnr"]
    seconds = runs.elapsed("client-g0.1", "client-g0.5")
    ok = fuia >= rand + 6 and fuia >= g05 and seconds < 600
    verdict(5, ok, f"FUIA {fuia:.2f} dB vs random {rand:.2f}; gamma 0.1 {fuia:.2f} vs gamma 0.5 {g05:.2f}, "
                   f"{seconds:.0f} s")


def test_criterion_6_class_inference(runs, verdict):
    counts, names = {}, []
    for method in ("retrain", "prune"):
        for k in (1, 2, 3, 4):
            name = f"class-{method}-k{k}"
            rows = runs.rows(name, CLASS_SCENARIO, {"unlearn": {"method": method, "forget_classes": k}})
            counts[method, k] = sum(float(r["label_acc"]) == 1.0 for r in rows)
            names.append(name)
    seconds = runs.elapsed(*names)
    ok = all(counts[m, k] == 10 for m in ("retrain", "prune") for k in (1, 2, 3))
    ok = ok and all(counts[m, 4] >= 7 for m in ("retrain", "prune")) and seconds < 900
    table = ", ".join(f"{m} " + "/".join(str(counts[m, k]) for k in (1, 2, 3, 4)) for m in ("retrain", "prune"))
    # k = 4 is reported at 80% in the reference results
    verdict(6, ok, f"fully correct trials for k=1..4: {table} (k=4 reference: 8/10), {seconds:.0f} s")


def test_criterion_7_aggregation(runs, verdict):
    fedavg = runs.psnr("sample-approx")
    fedsgd = runs.psnr("sample-fedsgd", {"fl": {"aggregation": "fedsgd"}})
    verdict(7, fedsgd >= fedavg, f"FedSGD FUIA {fedsgd:.2f} dB vs FedAvg {fedavg:.2f} dB")


def test_criterion_8_defenses(runs, verdict):
    prune = [runs.psnr("sample-approx")] + [
        runs.psnr(f"prune-{p}", {"defense": {"kind": "prune", "p": p}}) for p in (0.5, 0.8)]
    noise = [runs.psnr("sample-approx")] + [
        runs.psnr(f"perturb-{s}", {"defense": {"kind": "perturb", "std": s}}) for s in (0.003, 0.009)]
    sweeps = {"p": ["sample-approx", "prune-0.5", "prune-0.8"],
              "std": ["sample-approx", "perturb-0.003", "perturb-0.009"]}
    # both models are trained on defended uploads, so both count
    acc = {(axis, model): [runs.heldout(n, model) for n in names]
           for axis, names in sweeps.items() for model in ("original", "unlearned")}

    def strictly_down(v):
        return all(a > b for a, b in zip(v, v[1:]))

    def not_up(v):
        return all(a >= b for a, b in zip(v, v[1:]))

    ok = strictly_down(prune) and strictly_down(noise) and all(not_up(v) for v in acc.values())
    def fmt(v, digits=2):
        return "/".join(f"{x:.{digits}f}" for x in v)

    accs = ", ".join(f"{model} over {axis} {fmt(v, 4)}" for (axis, model), v in acc.items())
    verdict(8, ok, f"PSNR over p {fmt(prune)}, over std {fmt(noise)}; held-out accuracy: {accs}")


def test_criterion_9_determinism(runs, tmp_path, verdict):
    same = []
    for name, changes in (("sample-approx", ()),
                          ("class-prune-k2", (CLASS_SCENARIO, {"unlearn": {"method": "prune", "forget_classes": 2}}))):
        first = runs.get(name, *changes) / "metrics.csv"
        cfg = example_config(tmp_path / name, NO_PLOTS, *changes, {"experiment": {"id": name}})
        again = run_pipeline(cfg) / "metrics.csv"
        same.append(first.read_bytes() == again.read_bytes())
    verdict(9, all(same), f"metrics.csv byte-identical on repeat: {same}")
