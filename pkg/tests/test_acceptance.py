"""The ten acceptance criteria, each checked at its stated tolerance.

Run with ``pytest tests/test_acceptance.py -s`` to see one PASS/FAIL line per
criterion as it finishes; the lines are repeated in the terminal summary.
"""

import json
import math
import time

import numpy as np
import pytest

from confdecode import cli, pipeline, probcore
from confdecode.calibration import T_MAX, T_MIN, fit_temperature, temperature_nll
from confdecode.config import RunConfig
from confdecode.dataio import SynthConfig, block_stratified_split, generate_synthetic
from confdecode.ensemble import aggregate_batch
from confdecode.metrics import brier, confusion, ece, nll, per_class_acceptance
from confdecode.selective import aurc, coverage_curve, default_grid, fit_thresholds

import oracles
from acceptance_log import record

pytestmark = [pytest.mark.acceptance]

SEEDS = (0, 1, 2, 3, 4)


@pytest.fixture(scope="module")
def seed_runs():
    """Default preset, M=8, five seeds; the M=1 ensemble is the first member of each run."""
    start = time.perf_counter()
    runs = []
    for seed in SEEDS:
        cfg = RunConfig(master_seed=seed).check()
        res = pipeline.run(cfg)
        rows = pipeline.sweep_rows(res.members, res.normalized, res.split, cfg, [1, 8])
        runs.append((cfg, res, rows))
    return runs, time.perf_counter() - start


@pytest.fixture(scope="module")
def cli_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("desk")
    start = time.perf_counter()
    codes = [cli.main([stage, "--out", str(out), "--seed", "7"])
             for stage in ("synth", "split", "train", "calibrate", "evaluate")]
    return out, codes, time.perf_counter() - start


def test_criterion_01_oracle_equivalence():
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    worst = 0.0
    exact = True
    n_instances = 120
    for _ in range(n_instances):
        n, c, m = int(rng.integers(1, 51)), int(rng.integers(2, 14)), int(rng.integers(1, 6))
        preds = aggregate_batch(oracles.random_simplex(rng, m, n, c))
        y = rng.integers(0, c, size=n)
        p, yl = preds.mean_prob.tolist(), y.tolist()
        worst = max(worst, abs(ece(preds, y) - oracles.ece(p, yl)), abs(nll(preds, y) - oracles.nll(p, yl)),
                    abs(brier(preds, y) - oracles.brier(p, yl)))

        cal = rng.integers(0, 5, size=int(rng.integers(1, 40))) / 4.0 if rng.random() < 0.5 else rng.random(20)
        pol = fit_thresholds(cal, default_grid())
        scores = rng.integers(0, 5, size=n) / 4.0
        preds_scores = preds.entropy if rng.random() < 0.5 else scores
        kind_preds = pipeline.PredictionSet(preds.mean_prob, preds.predicted, preds_scores, preds.mutual_info,
                                            preds.margin_u)
        curve = coverage_curve(kind_preds, y, pol)
        ref = oracles.curve_points(preds_scores.tolist(), preds.predicted.tolist(), yl, pol.thresholds)
        for pt, (cov, acc, risk, k) in zip(curve.points, ref):
            exact &= pt.n_accepted == k and pt.achieved_coverage == cov
            worst = max(worst, abs(pt.accuracy - acc), abs(pt.risk - risk))
        worst = max(worst, abs(aurc(curve) - oracles.aurc(pol.alphas, [r[2] for r in ref])))

        rows = per_class_acceptance(kind_preds, y, pol, 0.5, c)
        ref_rows = oracles.per_class(preds_scores.tolist(), preds.predicted.tolist(), yl, pol.threshold(0.5), c)
        for row, (count, n_acc, rate, acc) in zip(rows, ref_rows):
            exact &= row.count == count and row.n_accepted == n_acc and (row.acceptance is None) == (rate is None)
            if rate is not None:
                worst = max(worst, abs(row.acceptance - rate))
            worst = max(worst, abs(row.accuracy - acc))
        keep = pol.accept_mask(preds_scores, 0.5)
        exact &= np.array_equal(confusion(preds, y, n_classes=c), oracles.confusion(preds.predicted.tolist(), yl, c))
        exact &= np.array_equal(confusion(preds, y, keep, c),
                                oracles.confusion(preds.predicted.tolist(), yl, c, keep.tolist()))
    elapsed = time.perf_counter() - start
    ok = exact and worst <= 1e-12 and elapsed < 10
    record(1, "oracle equivalence", ok,
           f"{n_instances} instances, max abs diff {worst:.2e}, counts exact={exact}, {elapsed:.1f}s")
    assert ok


def test_criterion_02_gradient_check():
    start = time.perf_counter()
    worst = oracles.gradient_check_max_error(100, seed=77)
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-4 and elapsed < 30
    record(2, "gradient check", ok, f"100 draws, max relative error {worst:.2e}, {elapsed:.1f}s")
    assert ok


def test_criterion_03_calibration(seed_runs):
    runs, _ = seed_runs
    grid = np.exp(np.linspace(math.log(T_MIN), math.log(T_MAX), 2000))
    checked = 0
    ok = True
    worst_gain = -np.inf
    for cfg, res, _ in runs:
        cal_idx = res.split.indices(res.normalized, "cal")
        X, y = res.normalized.trials(cal_idx), res.normalized.labels[cal_idx]
        for member in res.members:
            z = member.logits(X)
            t = fit_temperature(z, y)
            assert t == member.temperature
            fitted, unit = temperature_nll(z, y, t), temperature_nll(z, y, 1.0)
            worst_gain = max(worst_gain, fitted - unit)
            values = [temperature_nll(z, y, g) for g in grid]
            i = int(np.argmin(values))
            ok &= fitted <= unit + 1e-9
            ok &= abs(t - grid[i]) <= 0.02 or abs(fitted - values[i]) <= 1e-6
            ok &= np.array_equal(member.predict_proba(X).argmax(1), z.argmax(1))
            checked += 1
    record(3, "calibration guarantees", ok,
           f"{checked} members, max NLL(T*)-NLL(1) = {worst_gain:.2e}, grid agreement and argmax invariance")
    assert ok


def test_criterion_04_coverage_control():
    rng = np.random.default_rng(4)
    ok = True
    n_sets = 30
    for i in range(n_sets):
        n = int(rng.integers(1, 80))
        scores = rng.integers(0, max(2, n // 4), size=n) / 3.0 if i % 2 == 0 else rng.random(n)
        pol = fit_thresholds(scores, default_grid())
        distinct = np.unique(scores)
        for a, tau in zip(pol.alphas, pol.thresholds):
            ok &= bool(np.mean(scores <= tau) >= a)
            smaller = distinct[distinct < tau]
            ok &= smaller.size == 0 or bool(np.mean(scores <= smaller[-1]) < a)
            ok &= tau in distinct
    record(4, "coverage control", ok, f"{n_sets} score sets (half with ties), every default grid level")
    assert ok


def test_criterion_05_split_hygiene():
    rng = np.random.default_rng(5)
    ok = True
    for _ in range(1000):
        K = int(rng.integers(2, 6))
        blocks = int(rng.integers(3, 9))
        n_train = int(rng.integers(1, blocks - 1))
        n_cal = int(rng.integers(1, blocks - n_train))
        ts = generate_synthetic(SynthConfig(n_classes=K, n_channels=1, n_samples=8, blocks_per_class=blocks,
                                            block_size=int(rng.integers(1, 4)), snr=0.0,
                                            seed=int(rng.integers(2**63)), sample_rate_hz=8.0))
        split = block_stratified_split(ts, n_train, n_cal, seed=int(rng.integers(2**63)))
        parts = (split.train_blocks, split.cal_blocks, split.test_blocks)
        ok &= not (parts[0] & parts[1] or parts[0] & parts[2] or parts[1] & parts[2])
        ok &= set().union(*parts) == set(np.unique(ts.block_ids).tolist())
        bl = ts.block_labels()
        for part, want in zip(parts, (n_train, n_cal, blocks - n_train - n_cal)):
            ok &= np.bincount([bl[b] for b in part], minlength=K).tolist() == [want] * K
    ts = generate_synthetic(SynthConfig.desk(seed=1))
    split = block_stratified_split(ts, 20, 2, seed=3)
    counts = [int(split.indices(ts, p).size) for p in ("train", "cal", "test")]
    ok &= counts == [1040, 104, 156] and ts.n_trials == 1300
    record(5, "split hygiene", ok, f"1000 random configurations, desk geometry train/cal/test = {counts}")
    assert ok


def test_criterion_06_uncertainty_properties():
    rng = np.random.default_rng(6)
    ok = True
    for _ in range(200):
        m, n, c = int(rng.integers(1, 9)), int(rng.integers(1, 40)), int(rng.integers(2, 14))
        members = oracles.random_simplex(rng, m, n, c)
        mean = probcore.member_mean(members)
        h = probcore.entropy(mean)
        mi = probcore.mutual_information(members)
        u = probcore.margin_uncertainty(mean)
        ok &= bool(np.all(mi >= -1e-12))
        ok &= bool(np.all((h >= 0) & (h <= math.log(c) + 1e-12)))
        ok &= bool(np.all((u >= 0) & (u <= 1)))
        perm = rng.permutation(m)
        ok &= np.array_equal(probcore.member_mean(members[perm]), mean)
        ok &= np.array_equal(probcore.mutual_information(members[perm]), mi)
    h13 = probcore.entropy(np.full(13, 1 / 13))
    ok &= abs(h13 - math.log(13)) <= 1e-12
    record(6, "uncertainty properties", ok, f"200 random ensembles, H(uniform 13) = {h13:.12f}")
    assert ok


def test_criterion_07_selective_gain(seed_runs):
    runs, elapsed = seed_runs
    full = np.array([res.evaluation.curve.point(1.0).accuracy for _, res, _ in runs])
    half = np.array([res.evaluation.curve.point(0.5).accuracy for _, res, _ in runs])
    gain = half.mean() - full.mean()
    in_band = 0.55 <= full.mean() <= 0.80
    ok = in_band and gain >= 0.05 and elapsed < 300
    record(7, "selective gain", ok,
           f"{len(runs)} seeds, acc@1.0 {full.mean():.3f}, acc@0.5 {half.mean():.3f}, "
           f"gain {100 * gain:.1f} pp, {elapsed:.0f}s")
    assert ok


def test_criterion_08_ensemble_trend(seed_runs):
    runs, _ = seed_runs
    one = [rows[0] for _, _, rows in runs]
    eight = [rows[1] for _, _, rows in runs]
    assert all(r["M"] == 1 for r in one) and all(r["M"] == 8 for r in eight)
    aurc1, aurc8 = np.mean([r["aurc"] for r in one]), np.mean([r["aurc"] for r in eight])
    ece1, ece8 = np.mean([r["ece"] for r in one]), np.mean([r["ece"] for r in eight])
    ok_aurc, ok_ece = aurc8 <= aurc1, ece8 <= ece1
    record(8, "ensemble trend", ok_aurc and ok_ece,
           f"AURC M=1 {aurc1:.3f} -> M=8 {aurc8:.3f} [{'ok' if ok_aurc else 'FAIL'}]; "
           f"ECE M=1 {ece1:.3f} -> M=8 {ece8:.3f} [{'ok' if ok_ece else 'FAIL'}]")
    assert ok_aurc, "mean AURC did not improve from M=1 to M=8"
    assert ok_ece, "mean ECE did not improve from M=1 to M=8"


def test_criterion_09_determinism(cli_run, tmp_path):
    first, codes, _ = cli_run
    assert codes == [0] * 5
    for stage in ("synth", "split", "train", "calibrate", "evaluate"):
        assert cli.main([stage, "--out", str(tmp_path), "--seed", "7"]) == 0
    same = {name: (first / name).read_bytes() == (tmp_path / name).read_bytes()
            for name in ("report.json", "curve.csv")}
    ok = all(same.values())
    record(9, "determinism", ok, ", ".join(f"{k} identical={v}" for k, v in same.items()))
    assert ok


def test_criterion_10_desk_runtime(cli_run):
    out, codes, elapsed = cli_run
    report = json.loads((out / "report.json").read_text())
    geometry = (len(report["class_names"]), report["n_members"])
    ok = codes == [0] * 5 and elapsed < 120 and geometry == (13, 8)
    record(10, "desk-scale runtime", ok, f"synth -> evaluate, K=13 C=8 T=128 M=8, {elapsed:.1f}s")
    assert ok
