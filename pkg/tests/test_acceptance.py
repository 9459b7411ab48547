"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The benchmark criteria (4, 5, 6) share a session fixture that trains every
method once per seed; expect roughly ten minutes single-threaded.
"""

import time
from dataclasses import replace

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from pals.cli import main as cli_main
from pals.data import GenSpec, apply_partial_noise, candidate_lists, make_benchmark, \
    one_nn_accuracy, synth_gaussian_dataset
from pals.loss import LossSpec, final_batch_loss, smooth_labels
from pals.model import init_model
from pals.pseudo import pseudo_label_step
from pals.trainer import RunConfig, baseline_naive_ce, baseline_supervised, run_training

from . import reference as ref
from . import test_properties as props
from .conftest import ACCEPTANCE_LINES
from .gradcheck import max_relative_error, max_tensor_relative_error, numeric_grads
from .test_data import expected_mean_size, monte_carlo_candidates
from .test_pseudo import random_instance

SEEDS = (1, 2, 3)
BENCH = dict(num_classes=10, samples_per_class=500, feature_dim=32, class_mean_scale=4.75,
             partial_rate=0.3)
TEST_PER_CLASS = 100
EPOCHS = 150


def report(capsys, n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    with capsys.disabled():
        print("\n" + line)
    assert ok, line


def _mean(xs):
    return float(np.mean(xs))


# --- 1 --------------------------------------------------------------------

def test_criterion_1_pseudo_label_oracle(capsys):
    start = time.perf_counter()
    mismatches = 0
    worst = 0.0
    for seed in range(50):
        rng = np.random.default_rng(1000 + seed)
        feats, cand, C, k = random_instance(rng)
        delta = float(rng.choice([0.0, 0.25, 0.5, 0.75, 1.0]))
        got = pseudo_label_step(feats, cand, k, delta)
        want = ref.pipeline(feats.tolist(), [set(c) for c in candidate_lists(cand)], C, k, delta)
        pairs = list(zip(got.reliable_idx.tolist(), got.reliable_labels.tolist()))
        exact = (got.pseudo_labels.tolist() == want["yhat"] and got.budget == want["m"]
                 and got.agreements.tolist() == want["a"] and pairs == want["pairs"])
        err = float(np.max(np.abs(got.posteriors - np.array(want["post"]))))
        worst = max(worst, err)
        mismatches += not (exact and err <= 1e-9)
    elapsed = time.perf_counter() - start
    report(capsys, 1, mismatches == 0 and elapsed < 30,
           f"{50 - mismatches}/50 instances match, max |dq|={worst:.1e}, {elapsed:.1f}s")


# --- 2 --------------------------------------------------------------------

def test_criterion_2_gradients(capsys):
    start = time.perf_counter()
    rng = np.random.default_rng(2)
    model = init_model((32, 64, 32, 10), rng)
    x = rng.normal(size=(8, 32))
    t = smooth_labels(rng.integers(0, 10, 8), 0.5, 10)
    errs, entry = {}, {}
    for name, spec in [("ls-ce", LossSpec(mixup=False, cr=False)),
                       ("+mixup", LossSpec(mixup=True, cr=False)),
                       ("+cr", LossSpec(mixup=True, cr=True))]:
        def loss(m, spec=spec):
            return final_batch_loss(m, x, t, spec, np.random.default_rng(7))[0]
        _, grads = final_batch_loss(model, x, t, spec, np.random.default_rng(7))
        num = numeric_grads(model, loss)
        errs[name] = max_tensor_relative_error(grads, num)
        entry[name] = max_relative_error(grads, num)
    elapsed = time.perf_counter() - start
    ok = max(errs.values()) < 1e-5 and elapsed < 60
    detail = ", ".join(f"{k} {v:.1e}" for k, v in errs.items())
    worst_entry = max(entry.values())
    report(capsys, 2, ok, f"max per-parameter rel err {detail} (worst single entry "
                          f"{worst_entry:.1e}); {elapsed:.1f}s")


# --- 3 --------------------------------------------------------------------

def test_criterion_3_noise_statistics(capsys):
    spec = GenSpec(num_classes=10, samples_per_class=10_000, feature_dim=1, seed=3)
    ds = apply_partial_noise(synth_gaussian_dataset(spec), 0.1, 0.3, seed=3)
    size = float(ds.candidates.sum(axis=1).mean())
    miss = float(np.mean(~ds.candidates[np.arange(ds.n), ds.true_labels]))
    closed = expected_mean_size(10, 0.1, 0.3)
    mc_size, mc_miss = monte_carlo_candidates(100_000, 10, 0.1, 0.3, seed=3)
    ok = (abs(size - 1.716) <= 0.01 and abs(miss - 0.30) <= 0.005
          and abs(closed - 1.716) < 5e-4
          and abs(mc_size - closed) <= 0.01 and abs(mc_miss - 0.30) <= 0.005)
    report(capsys, 3, ok, f"mean |Y|={size:.4f} (closed {closed:.4f}, mc {mc_size:.4f}), "
                          f"missing={miss:.4f} (mc {mc_miss:.4f})")


# --- shared benchmark runs ------------------------------------------------

def _bench(seed, eta):
    return make_benchmark(GenSpec(**BENCH, noise_rate=eta, seed=seed), TEST_PER_CLASS)


@pytest.fixture(scope="session")
def bench_runs():
    out = {"one_nn": [], "pals": [], "pals_time": [], "supervised": [], "naive": [],
           "plain": [], "r05": [], "r0": []}
    with threadpool_limits(1):
        for seed in SEEDS:
            train, test = _bench(seed, 0.3)
            out["one_nn"].append(one_nn_accuracy(train, test))
            cfg = RunConfig(epochs=EPOCHS, seed=seed, q=0.3, eta=0.3)
            start = time.perf_counter()
            out["pals"].append(run_training(cfg, train, test))
            out["pals_time"].append(time.perf_counter() - start)
            out["supervised"].append(baseline_supervised(cfg, train, test))
            out["naive"].append(baseline_naive_ce(cfg, train, test))
            out["plain"].append(run_training(replace(cfg, mixup=False, cr=False), train, test))

            train5, test5 = _bench(seed, 0.5)
            cfg5 = replace(cfg, eta=0.5)
            out["r05"].append(run_training(cfg5, train5, test5))
            out["r0"].append(run_training(replace(cfg5, smoothing=0.0), train5, test5))
    return out


def _accs(runs):
    return [r.test_acc for r in runs]


# --- 4 --------------------------------------------------------------------

def test_criterion_4_benchmark(bench_runs, capsys):
    pals = _mean(_accs(bench_runs["pals"]))
    sup = _mean(_accs(bench_runs["supervised"]))
    naive = _mean(_accs(bench_runs["naive"]))
    one_nn = min(bench_runs["one_nn"])
    slowest = max(bench_runs["pals_time"])
    ok = one_nn >= 0.95 and pals >= 0.95 * sup and pals >= naive + 0.05 and slowest < 600
    report(capsys, 4, ok, f"pals {pals:.4f}, supervised {sup:.4f}, naive {naive:.4f}, "
                          f"min 1-NN {one_nn:.3f}, slowest pals run {slowest:.0f}s")


# --- 5 --------------------------------------------------------------------

def _trend(history):
    n_sel = np.array([h.n_selected for h in history], dtype=float)
    frac = np.array([h.n_correct / max(h.n_selected, 1) for h in history])
    smooth = np.convolve(n_sel, np.ones(10) / 10, mode="valid")
    return {
        "growth": n_sel[-1] / max(n_sel[0], 1.0),
        "n_first": int(n_sel[0]), "n_last": int(n_sel[-1]),
        "frac_ok": frac[-1] >= frac[0],
        "monotone": bool(np.all(np.diff(smooth) >= 0)),
    }


def test_criterion_5_selection_trend(bench_runs, capsys):
    trends = [_trend(r.history) for r in bench_runs["pals"]]
    ok = all(t["growth"] >= 3 and t["frac_ok"] and t["monotone"] for t in trends)
    detail = "; ".join(
        f"seed{s}: n {t['n_first']}->{t['n_last']} (x{t['growth']:.2f}), "
        f"frac {'ok' if t['frac_ok'] else 'down'}, ma10 {'monotone' if t['monotone'] else 'dips'}"
        for s, t in zip(SEEDS, trends))
    report(capsys, 5, ok, detail)


# --- 6 --------------------------------------------------------------------

def test_criterion_6_ablation_direction(bench_runs, capsys):
    r05, r0 = _mean(_accs(bench_runs["r05"])), _mean(_accs(bench_runs["r0"]))
    full, plain = _mean(_accs(bench_runs["pals"])), _mean(_accs(bench_runs["plain"]))
    ok = r05 - r0 >= 0.03 and plain < full
    report(capsys, 6, ok, f"eta=0.5: r=0.5 {r05:.4f} vs r=0 {r0:.4f} "
                          f"(drop {100 * (r05 - r0):.2f}pp); mixup+cr {full:.4f} vs "
                          f"neither {plain:.4f}")


# --- 7 --------------------------------------------------------------------

def test_criterion_7_invariants(capsys):
    checks = [props.test_pipeline_invariants, props.test_augmented_sets_grow_by_at_most_one,
              props.test_lambda_monotone, props.test_positive_scaling_invariance,
              props.test_fixed_seed_reruns_are_bit_identical]
    failures = []
    for check in checks:
        try:
            check()
        except Exception as exc:  # report every failing property, not just the first
            failures.append(f"{check.__name__}: {type(exc).__name__}")
    total = sum(props.CASES.values())
    report(capsys, 7, not failures,
           f"{len(checks) - len(failures)}/{len(checks)} properties over {total} cases"
           + (f"; {failures}" if failures else ""))


# --- 8 --------------------------------------------------------------------

def _pipeline(root):
    data = root / "data"
    runs = root / "runs"
    codes = [cli_main(["gen", "--out", str(data), "--classes", "4", "--per-class", "40",
                       "--test-per-class", "20", "--dim", "8", "--seed", "8"])]
    codes.append(cli_main(["train", "--data", str(data), "--out", str(runs), "--seeds", "0,1,2",
                           "--epochs", "5", "--k", "5"]))
    codes.append(cli_main(["report", str(runs), "--out", str(root / "table.md")]))
    csvs = {p.relative_to(runs): p.read_bytes() for p in sorted(runs.rglob("metrics.csv"))}
    return codes, csvs, (root / "table.md").read_text()


def test_criterion_8_cli_contract(tmp_path, capsys):
    codes_a, csv_a, table = _pipeline(tmp_path / "a")
    codes_b, csv_b, _ = _pipeline(tmp_path / "b")
    capsys.readouterr()
    has_table = "| pals | - | 0.3 | 0.3 | 3 |" in table and "±" in table
    same = len(csv_a) == 3 and csv_a == csv_b
    ok = codes_a == codes_b == [0, 0, 0] and has_table and same
    report(capsys, 8, ok, f"exit codes {codes_a}, table {'ok' if has_table else 'missing'}, "
                          f"{len(csv_a)} csvs {'byte-identical' if same else 'differ'}")
