"""Acceptance criteria, one test per criterion.

Each test records a PASS/FAIL line that is printed in the terminal summary
(and to stdout when run with ``-s``).
"""

import functools
import time
from pathlib import Path

import numpy as np
import pytest
import yaml

from gridtwin.analytics import compare_bias_spectra, spectrum_report
from gridtwin.estimation import benchmark_jacobian, bias_report, estimate_jacobian, lse_jacobian
from gridtwin.cli import main
from gridtwin.network import DuplicateBranch, RemoveDuplicate, apply_branch_edit
from gridtwin.neural import (MlpModel, chain_rule_jacobian, init_model, loss_and_gradients,
                             predict, relative_rmse)
from gridtwin.powerflow import analytic_jacobian, solve_powerflow
from gridtwin.telemetry import DeltaMatrices, FluctuationConfig, simulate_series

from conftest import ACCEPTANCE, case, series9, trained9
from oracles import FIXTURES, fd_gradient, fd_jacobian, fd_vector_jacobian, reference_voltages

# 118-bus closed-loop telemetry: a tiny fluctuation keeps the nonlinear
# regression bias on the 1e-4 scale
CLOSED_LOOP = dict(relative_sigma=1e-5, background_sigma=1e-5, samples=2000)


def record(n, title, ok, detail):
    ACCEPTANCE[n] = (bool(ok), title, detail)
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'} {title}: {detail}")
    assert ok, f"criterion {n} ({title}) failed: {detail}"


def test_1_jacobian_correctness():
    t0 = time.perf_counter()
    worst = 0.0
    for name in ("ieee9", "ieee118"):
        net = case(name)
        base = solve_powerflow(net)
        rng = np.random.default_rng(2024)
        for _ in range(20):
            v = base.v * rng.uniform(0.97, 1.03, net.n_buses)
            th = base.theta + rng.normal(0, 0.05, net.n_buses)
            j = analytic_jacobian(net, v, th).values
            ref = fd_jacobian(net, v, th)
            worst = max(worst, np.abs(j - ref).max() / np.abs(ref).max())
    elapsed = time.perf_counter() - t0
    record(1, "analytic Jacobian vs central differences", worst < 1e-5 and elapsed < 10,
           f"max rel err {worst:.2e} (< 1e-5), {elapsed:.1f} s (< 10 s)")


def test_2_powerflow_correctness():
    details, ok = [], True
    for name, ref_name in (("ieee9", "case9"), ("ieee118", "case118")):
        sol = solve_powerflow(case(name), tolerance=1e-8)
        ref = reference_voltages(ref_name)
        dev = max(abs(v * np.exp(1j * t) - ref[b][0] * np.exp(1j * ref[b][1]))
                  for b, v, t in zip(sol.bus_ids, sol.v, sol.theta))
        ok &= sol.final_mismatch < 1e-8 and sol.iterations <= 6 and dev < 1e-6
        details.append(f"{name}: {sol.iterations} it, mismatch {sol.final_mismatch:.1e}, "
                       f"|dV| {dev:.1e}")
    record(2, "Newton-Raphson vs reference solver", ok, "; ".join(details))


def test_3_lse_exact_recovery():
    worst = 0.0
    for seed in range(5):
        rng = np.random.default_rng(seed)
        p = 14 if seed % 2 else 30
        j = rng.normal(size=(p, p))
        a = rng.normal(size=(p, 5 * p))
        worst = max(worst, np.abs(lse_jacobian(DeltaMatrices(a, j @ a)).values - j).max())
    record(3, "LSE recovers an exact linear map", worst < 1e-10, f"max err {worst:.1e} (< 1e-10)")


def test_4_dataset_size_monotonicity():
    t0 = time.perf_counter()
    net = case("ieee9")
    rows = []
    for seed in range(5):
        s = simulate_series(net, FluctuationConfig(seed=seed, samples=9600))
        bm = benchmark_jacobian(net, s)
        small = bias_report(estimate_jacobian(s, 0, 240), bm).frobenius_rel
        large = bias_report(estimate_jacobian(s, 0, 4800), bm).frobenius_rel
        rows.append((small, large))
    elapsed = time.perf_counter() - t0
    ok = all(large < small for small, large in rows) and elapsed < 120
    record(4, "window 4800 beats window 240 on every seed", ok,
           ", ".join(f"{s:.1e}->{l:.1e}" for s, l in rows) + f"; {elapsed:.0f} s (< 120 s)")


@functools.lru_cache(maxsize=None)
def closed_loop(seed):
    true_net = case("ieee118")
    described = apply_branch_edit(true_net, RemoveDuplicate(49, 66))
    fixed = apply_branch_edit(described, DuplicateBranch(49, 66))
    s = simulate_series(true_net, FluctuationConfig(seed=seed, **CLOSED_LOOP), tolerance=1e-11)
    est = estimate_jacobian(s)
    corrupted = bias_report(est, benchmark_jacobian(described, s))
    corrected = bias_report(est, benchmark_jacobian(fixed, s))
    return corrupted, corrected


def test_5_closed_loop_duplicate_branch():
    t0 = time.perf_counter()
    corrupted, corrected = closed_loop(0)
    elapsed = time.perf_counter() - t0
    top = corrupted.outliers[0].label
    ok = top in ("∂P66/∂θ49", "∂P49/∂θ66") and corrected.max_abs <= 1e-3 and elapsed < 300
    record(5, "118-bus duplicated branch found and fixed", ok,
           f"top outlier {top}, corrected max_abs {corrected.max_abs:.2e} (<= 1e-3), "
           f"{elapsed:.0f} s (< 300 s)")


def test_6_ann_monitor_and_jacobian_failure():
    s = series9(0, 9600)
    net = case("ieee9")
    res = trained9()
    labels = s.index_map.injection_labels()
    rows = [labels.index(b) for b in ("P5", "P7", "P9")]
    rr = relative_rmse(res.model, s, rows, (8400, 9600))
    bm = benchmark_jacobian(net, s)
    lse = bias_report(estimate_jacobian(s, 0, 4800), bm).frobenius_rel
    ann = bias_report(chain_rule_jacobian(res.model, s.x_series.mean(axis=1)), bm).frobenius_rel
    ok = rr.max() < 0.05 and ann >= 10 * lse
    record(6, "ANN predicts well but its Jacobian fails", ok,
           f"test rel RMSE P5/P7/P9 {', '.join(f'{v:.3f}' for v in rr)} (< 0.05); "
           f"chain-rule/LSE frob ratio {ann / lse:.1f} (>= 10)")


def test_7_gradient_oracles():
    worst_grad = worst_jac = 0.0
    for seed in range(3):
        rng = np.random.default_rng(seed)
        m = init_model([4, 7, 6, 3], seed)
        z, t = rng.normal(size=(9, 4)), rng.normal(size=(9, 3))
        _, dws, dbs = loss_and_gradients(m, z, t)
        params = [w.copy() for w in m.weights] + [np.array(b) + rng.normal(size=b.shape)
                                                  for b in m.biases]
        k = len(m.weights)

        def build():
            return MlpModel(m.layer_sizes, tuple(params[:k]), tuple(params[k:]), m.x_mean,
                            m.x_scale, m.y_mean, m.y_scale)
        _, dws, dbs = loss_and_gradients(build(), z, t)
        for g, ref in zip(dws + dbs, fd_gradient(lambda: loss_and_gradients(build(), z, t)[0],
                                                 params)):
            worst_grad = max(worst_grad, np.abs(g - ref).max() / np.abs(ref).max())
        mj = init_model([6, 9, 9, 6], seed)
        x = rng.normal(size=6)
        ref = fd_vector_jacobian(lambda v: predict(mj, v), x)
        worst_jac = max(worst_jac, np.abs(chain_rule_jacobian(mj, x).values - ref).max()
                        / np.abs(ref).max())
    record(7, "backprop and chain rule vs finite differences",
           worst_grad < 1e-5 and worst_jac < 1e-6,
           f"loss gradient rel err {worst_grad:.1e} (< 1e-5), Jacobian rel err {worst_jac:.1e} (< 1e-6)")


def test_8_spectral_sanity():
    rep = spectrum_report(np.random.default_rng(0).standard_normal((100, 1000)))
    hits = 0
    for seed in range(100):
        rng = np.random.default_rng(1000 + seed)
        f = rng.standard_normal(1000)
        x = rng.standard_normal((100, 1000)) + 0.5 * rng.standard_normal(100)[:, None] * f
        hits += len(spectrum_report(x).spikes) == 1
    ok = rep.ks_distance < 0.05 and rep.outside_bulk_fraction <= 0.02 and hits >= 95
    record(8, "Marchenko-Pastur fit and spike detection", ok,
           f"KS {rep.ks_distance:.3f} (< 0.05), outside bulk {rep.outside_bulk_fraction:.2%} "
           f"(<= 2%), single spike in {hits}/100 (>= 95)")


def test_9_spike_ordering():
    counts = []
    for seed in range(5):
        corrupted, corrected = closed_loop(seed)
        s = compare_bias_spectra(corrupted.bias, corrected.bias).summary()
        counts.append((s["spikes_a"], s["spikes_b"]))
    ok = all(b < a for a, b in counts)
    record(9, "corrected bias has fewer spikes on every seed", ok,
           ", ".join(f"{a}->{b}" for a, b in counts))


def test_10_twin_determinism(tmp_path):
    doc = {"case_path": str(FIXTURES / "ieee9.case"), "seed": 5,
           "fluctuation": {"samples": 700}, "lse_windows": [100, 600],
           "mlp": {"enabled": True, "train_range": [0, 600], "test_range": [600, 700],
                   "epochs": 3},
           "analytics": {"enabled": True, "scaling": "rows"}}
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text(yaml.safe_dump(doc), encoding="utf-8")
    for run in ("a", "b"):
        assert main(["twin", "--config", str(cfg), "--out", str(tmp_path / run),
                     "--emit-heatmaps"]) == 0

    def files(root):
        return {str(p.relative_to(root)): p.read_bytes() for p in Path(root).rglob("*") if p.is_file()}
    a, b = files(tmp_path / "a"), files(tmp_path / "b")
    same = a.keys() == b.keys() and all(a[k] == b[k] for k in a)
    record(10, "twin reruns are byte-identical", same and len(a) > 10,
           f"{len(a)} files compared, {'identical' if same else 'DIFFERENT'}")


def test_corrected_spectrum_never_has_more_spikes():
    for seed in range(5):
        corrupted, corrected = closed_loop(seed)
        s = compare_bias_spectra(corrupted.bias, corrected.bias).summary()
        assert s["spikes_b"] <= s["spikes_a"]
