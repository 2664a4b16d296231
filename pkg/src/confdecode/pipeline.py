"""End-to-end run: synthesize, split, normalize, train, calibrate, evaluate.

The in-memory functions here are what the CLI stages call between reading and
writing artifacts, so a staged CLI run and :func:`run` agree bit for bit.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import metrics
from .backbone import MemberModel, load_member, member_basename, save_member, train_member
from .calibration import fit_temperature
from .config import RunConfig
from .dataio import (ChannelStats, SplitAssignment, TrialSet, apply_zscore, block_stratified_split,
                     fit_channel_stats, generate_synthetic, read_trialset, write_trialset)
from .ensemble import PredictionSet, member_probabilities, predict_set, write_predictions_jsonl, aggregate_batch
from .errors import FormatError, InvalidConfig, StageError
from .selective import (DEFAULT_RISK_ALPHAS, DEFAULT_TARGET_RISKS, SelectivePolicy, aurc, coverage_curve,
                        fit_thresholds, normalize_score_kind, operating_points, policy_json)

log = logging.getLogger(__name__)

SPLIT_FILE = "split.json"
MEMBERS_DIR = "members"
POLICY_FILE = "policy.json"
PREDICTIONS_FILE = "predictions.jsonl"
CURVE_FILE = "curve.csv"
REPORT_FILE = "report.json"
SWEEP_FILE = "sweep.csv"
FIXED_ALPHA = 0.5


def split_and_normalize(ts: TrialSet, cfg: RunConfig) -> tuple[SplitAssignment, ChannelStats, TrialSet]:
    split = block_stratified_split(ts, cfg.split.train_blocks_per_class, cfg.split.cal_blocks_per_class,
                                   cfg.split_seed())
    stats = fit_channel_stats(ts, split.train_blocks)
    return split, stats, apply_zscore(ts, stats)


def _train_one(args) -> MemberModel:
    ts, split, cfg, m = args
    seed = cfg.member_seed(m)
    params = train_member(ts, split, cfg.train, cfg.diversity, seed, member_index=m)
    return MemberModel(params, 1.0, m, False, seed)


def train_members(ts_norm: TrialSet, split: SplitAssignment, cfg: RunConfig, n_members: int | None = None,
                  workers: int = 1) -> list[MemberModel]:
    """Train members ``0 .. M-1``. Each draws from its own seed stream, so ``workers`` does not change results."""
    n_members = cfg.ensemble.M if n_members is None else n_members
    jobs = [(ts_norm, split, cfg, m) for m in range(n_members)]
    if workers > 1 and n_members > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_train_one, jobs))
    return [_train_one(job) for job in jobs]


def calibrate_members(members: list[MemberModel], ts_norm: TrialSet, split: SplitAssignment) -> list[MemberModel]:
    cal_idx = split.indices(ts_norm, "cal")
    X_cal, y_cal = ts_norm.trials(cal_idx), ts_norm.labels[cal_idx]
    out = []
    for m in members:
        T = fit_temperature(m.logits(X_cal), y_cal)
        out.append(MemberModel(m.params, T, m.index, True, m.member_seed))
    return out


@dataclass
class Evaluation:
    report: dict
    policy: SelectivePolicy
    curve: object
    test_preds: PredictionSet
    test_labels: np.ndarray
    test_indices: np.ndarray
    cal_preds: PredictionSet = field(repr=False, default=None)


def _fixed_alpha(grid) -> float:
    for a in grid:
        if abs(a - FIXED_ALPHA) <= 1e-9:
            return FIXED_ALPHA
    return float(grid[len(grid) // 2])


def evaluate(members: list[MemberModel], ts_norm: TrialSet, split: SplitAssignment, cfg: RunConfig) -> Evaluation:
    """Fit thresholds on calibration predictions and score the test partition."""
    score_kind = normalize_score_kind(cfg.selective.score_kind)
    grid = [float(a) for a in cfg.selective.grid]
    bins = cfg.metrics.ece_bins

    cal_idx = split.indices(ts_norm, "cal")
    test_idx = split.indices(ts_norm, "test")
    X_cal, y_cal = ts_norm.trials(cal_idx), ts_norm.labels[cal_idx]
    X_test, y_test = ts_norm.trials(test_idx), ts_norm.labels[test_idx]

    cal_preds = predict_set(members, X_cal)
    test_preds = predict_set(members, X_test)
    policy = fit_thresholds(cal_preds.score(score_kind), grid, score_kind)
    curve = coverage_curve(test_preds, y_test, policy)
    K = ts_norm.n_classes

    alpha_fixed = _fixed_alpha(grid)
    accepted_fixed = policy.accept_mask(test_preds.score(score_kind), alpha_fixed)
    risk_alphas = [a for a in DEFAULT_RISK_ALPHAS if any(abs(a - g) <= 1e-9 for g in grid)]

    unit_cal = aggregate_batch(member_probabilities(members, X_cal, use_temperature=False), keep_members=False)
    cal_nll_fitted = metrics.nll(cal_preds, y_cal)
    cal_nll_unit = metrics.nll(unit_cal, y_cal)

    per_class = metrics.per_class_acceptance(test_preds, y_test, policy, alpha_fixed, K)
    accepted_subset = test_preds.subset(np.flatnonzero(accepted_fixed))
    y_acc = y_test[accepted_fixed]
    subset_metrics = None
    if len(accepted_subset):
        subset_metrics = {
            "acc": metrics.accuracy(accepted_subset, y_acc),
            "ece": metrics.ece(accepted_subset, y_acc, bins),
            "nll": metrics.nll(accepted_subset, y_acc),
            "brier": metrics.brier(accepted_subset, y_acc),
        }

    full_ece = metrics.ece(test_preds, y_test, bins)
    report = {
        "participant_seed": cfg.master_seed,
        "participant_note": "seeds stand in for participants",
        "n_members": len(members),
        "score_kind": score_kind,
        "n_cal": int(cal_idx.size),
        "n_test": int(test_idx.size),
        "class_names": list(ts_norm.class_names),
        "full_coverage": {
            "acc": metrics.accuracy(test_preds, y_test),
            "ece": full_ece,
            "ece_percent": 100.0 * full_ece,
            "nll": metrics.nll(test_preds, y_test),
            "brier": metrics.brier(test_preds, y_test),
        },
        "reliability": metrics.reliability_bins(test_preds, y_test, bins).to_dict(),
        "curve_csv_path": CURVE_FILE,
        "aurc": aurc(curve),
        "operating_points": operating_points(curve, DEFAULT_TARGET_RISKS, risk_alphas),
        "per_class": {"alpha": alpha_fixed, "rows": [r.to_dict() for r in per_class]},
        "confusion": metrics.confusion(test_preds, y_test, n_classes=K).tolist(),
        "confusion_accepted": {"alpha": alpha_fixed,
                               "matrix": metrics.confusion(test_preds, y_test, accepted_fixed, K).tolist()},
        "accepted_subset": {"alpha": alpha_fixed, "coverage": float(accepted_fixed.mean()),
                            "metrics": subset_metrics},
        "temperatures": [m.temperature for m in members],
        "temperature_monitor": {
            "cal_ensemble_nll_fitted": cal_nll_fitted,
            "cal_ensemble_nll_unit_temperature": cal_nll_unit,
            "improved": bool(cal_nll_fitted <= cal_nll_unit + 1e-6),
        },
        "policy": policy.to_dict(),
    }
    return Evaluation(report, policy, curve, test_preds, y_test, test_idx, cal_preds)


@dataclass
class RunResult:
    dataset: TrialSet
    split: SplitAssignment
    stats: ChannelStats
    normalized: TrialSet
    members: list[MemberModel]
    evaluation: Evaluation


def run(cfg: RunConfig, workers: int = 1, n_members: int | None = None) -> RunResult:
    """The whole pipeline in memory."""
    cfg.check()
    ts = generate_synthetic(cfg.resolved_synth())
    split, stats, ts_norm = split_and_normalize(ts, cfg)
    members = train_members(ts_norm, split, cfg, n_members, workers)
    members = calibrate_members(members, ts_norm, split)
    return RunResult(ts, split, stats, ts_norm, members, evaluate(members[:cfg.ensemble.M], ts_norm, split, cfg))


def sweep_rows(members: list[MemberModel], ts_norm: TrialSet, split: SplitAssignment, cfg: RunConfig,
               m_list) -> list[dict]:
    """Evaluate the nested member prefixes ``members[:M]`` for each ``M``."""
    rows = []
    for M in m_list:
        if M < 1 or M > len(members):
            raise InvalidConfig(f"sweep needs M in [1, {len(members)}], got {M}")
        ev = evaluate(members[:M], ts_norm, split, cfg)
        rep = ev.report
        rows.append({
            "participant_seed": cfg.master_seed,
            "M": M,
            "accuracy": rep["full_coverage"]["acc"],
            "acc_at_0.5": ev.curve.point(0.5).accuracy if _fixed_alpha(cfg.selective.grid) == 0.5 else "",
            "aurc": rep["aurc"],
            "ece": rep["full_coverage"]["ece"],
            "nll": rep["full_coverage"]["nll"],
            "brier": rep["full_coverage"]["brier"],
        })
    return rows


SWEEP_COLUMNS = ["participant_seed", "M", "accuracy", "acc_at_0.5", "aurc", "ece", "nll", "brier"]


def sweep_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=SWEEP_COLUMNS, lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    return buf.getvalue()


# ---------------------------------------------------------------------------
# staged, file-backed execution


def _out(cfg: RunConfig) -> Path:
    return Path(cfg.output_dir)


def _require(path: Path, stage: str, producer: str) -> Path:
    if not path.exists():
        raise StageError(f"{stage} needs {path}, which is missing; run `{producer}` first", missing=str(path))
    return path


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _load_dataset(cfg: RunConfig, stage: str) -> TrialSet:
    out = _out(cfg)
    _require(out / "manifest.json", stage, "synth")
    _require(out / "trials.f32", stage, "synth")
    return read_trialset(out)


def _load_split(cfg: RunConfig, ts: TrialSet, stage: str) -> tuple[SplitAssignment, ChannelStats, TrialSet]:
    path = _require(_out(cfg) / SPLIT_FILE, stage, "split")
    try:
        d = json.loads(path.read_text(encoding="utf-8"))
        split = SplitAssignment.from_dict(d["assignment"])
        stats = ChannelStats.from_dict(d["channel_stats"])
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"malformed split file: {exc!r}", path=path) from exc
    return split, stats, apply_zscore(ts, stats)


def _load_members(cfg: RunConfig, stage: str, need: int, producer: str = "train") -> list[MemberModel]:
    mdir = _out(cfg) / MEMBERS_DIR
    members = []
    for m in range(need):
        members.append(load_member(_require(mdir / f"{member_basename(m)}.json", stage, producer)))
    return members


def stage_synth(cfg: RunConfig) -> dict:
    synth = cfg.resolved_synth()
    ts = generate_synthetic(synth)
    out = _out(cfg)
    write_trialset(ts, out)
    return {"stage": "synth", "N": ts.n_trials, "K": ts.n_classes, "C": ts.n_channels, "T": ts.n_samples,
            "seed": synth.seed, "path": str(out)}


def stage_split(cfg: RunConfig) -> dict:
    ts = _load_dataset(cfg, "split")
    split, stats, _ = split_and_normalize(ts, cfg)
    _write_json(_out(cfg) / SPLIT_FILE, {"seed": cfg.split_seed(), "assignment": split.to_dict(),
                                         "channel_stats": stats.to_dict()})
    counts = {p: int(split.indices(ts, p).size) for p in ("train", "cal", "test")}
    return {"stage": "split", **{f"n_{p}": n for p, n in counts.items()}}


def stage_train(cfg: RunConfig, workers: int = 1) -> dict:
    ts = _load_dataset(cfg, "train")
    split, _, ts_norm = _load_split(cfg, ts, "train")
    members = train_members(ts_norm, split, cfg, workers=workers)
    mdir = _out(cfg) / MEMBERS_DIR
    for m in members:
        save_member(m, mdir)
    return {"stage": "train", "members": len(members), "path": str(mdir)}


def stage_calibrate(cfg: RunConfig) -> dict:
    ts = _load_dataset(cfg, "calibrate")
    split, _, ts_norm = _load_split(cfg, ts, "calibrate")
    members = calibrate_members(_load_members(cfg, "calibrate", cfg.ensemble.M), ts_norm, split)
    mdir = _out(cfg) / MEMBERS_DIR
    for m in members:
        save_member(m, mdir)
    return {"stage": "calibrate", "members": len(members), "temperatures": [m.temperature for m in members]}


def _calibrated_members(cfg: RunConfig, stage: str, need: int) -> list[MemberModel]:
    members = _load_members(cfg, stage, need)
    uncal = [m.index for m in members if not m.calibrated]
    if uncal:
        raise StageError(f"{stage} needs calibrated members but {uncal} are not; run `calibrate` first")
    return members


def stage_evaluate(cfg: RunConfig) -> dict:
    ts = _load_dataset(cfg, "evaluate")
    split, _, ts_norm = _load_split(cfg, ts, "evaluate")
    members = _calibrated_members(cfg, "evaluate", cfg.ensemble.M)
    ev = evaluate(members, ts_norm, split, cfg)
    out = _out(cfg)
    (out / POLICY_FILE).write_text(policy_json(ev.policy), encoding="utf-8")
    (out / CURVE_FILE).write_text(ev.curve.to_csv(), encoding="utf-8")
    write_predictions_jsonl(ev.test_preds, ev.test_labels, out / PREDICTIONS_FILE, ev.test_indices)
    _write_json(out / REPORT_FILE, ev.report)
    fc = ev.report["full_coverage"]
    return {"stage": "evaluate", "members": len(members), "acc": fc["acc"], "aurc": ev.report["aurc"],
            "ece": fc["ece"], "nll": fc["nll"], "brier": fc["brier"], "report": str(out / REPORT_FILE)}


def stage_sweep(cfg: RunConfig, m_list, seeds=None, workers: int = 1) -> dict:
    """Nested-prefix ensemble sizes on the trained run, plus optional fresh runs for extra seeds."""
    m_list = [int(m) for m in m_list]
    if not m_list:
        raise InvalidConfig("sweep needs a non-empty M list")
    rows = []
    seeds = [cfg.master_seed] if seeds is None else [int(s) for s in seeds]
    for seed in seeds:
        if seed == cfg.master_seed:
            ts = _load_dataset(cfg, "sweep")
            split, _, ts_norm = _load_split(cfg, ts, "sweep")
            available = sorted((_out(cfg) / MEMBERS_DIR).glob("member_*.json"))
            if max(m_list) > len(available):
                raise InvalidConfig(f"sweep asks for M={max(m_list)} but only {len(available)} members are trained")
            members = _calibrated_members(cfg, "sweep", max(m_list))
            rows += sweep_rows(members, ts_norm, split, cfg, m_list)
        else:
            seed_cfg = RunConfig.from_dict({**cfg.to_dict(), "master_seed": seed})
            ts = generate_synthetic(seed_cfg.resolved_synth())
            split, _, ts_norm = split_and_normalize(ts, seed_cfg)
            members = calibrate_members(train_members(ts_norm, split, seed_cfg, max(m_list), workers),
                                        ts_norm, split)
            rows += sweep_rows(members, ts_norm, split, seed_cfg, m_list)
    path = _out(cfg) / SWEEP_FILE
    path.write_text(sweep_csv(rows), encoding="utf-8")
    return {"stage": "sweep", "rows": len(rows), "path": str(path)}
