"""Leakage diagnostics and the audit report.

Losses are per-sample cross-entropy at the exit that fired.  Divergences use
base-2 logarithms so they lie in [0, 1].
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import rel_entr
from scipy.stats import spearmanr

from .nn import MultiExitModel, accuracy

SCHEMA_VERSION = "1.0"
MIN_RELIABLE = 10


def overfitting_gap(model: MultiExitModel, train_set, test_set) -> float:
    """Train accuracy minus test accuracy under early-exit inference."""
    return accuracy(model, *train_set) - accuracy(model, *test_set)


@dataclass
class LossHistogramPair:
    edges: np.ndarray  # n_bins + 1 edges; one extra overflow bin past the last edge
    member_hist: np.ndarray
    nonmember_hist: np.ndarray
    epsilon: float = 0.0


def _normalize(counts, epsilon):
    p = counts.astype(np.float64) + epsilon
    return p / p.sum()


def loss_histograms(p_samples, q_samples, n_bins: int = 100, epsilon: float = 0.0,
                    upper_percentile: float = 99.0) -> LossHistogramPair:
    """Shared histograms over [min(0, pooled min), pooled 99th percentile]
    plus one overflow bin for everything above."""
    p = np.asarray(p_samples, dtype=np.float64).ravel()
    q = np.asarray(q_samples, dtype=np.float64).ravel()
    if not len(p) or not len(q):
        raise ValueError("both sample sets must be non-empty")
    pooled = np.r_[p, q]
    lo = min(0.0, float(pooled.min()))
    hi = float(np.percentile(pooled, upper_percentile))
    if hi <= lo:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, n_bins + 1)

    def hist(s):
        idx = np.clip(np.searchsorted(edges, s, side="right") - 1, 0, n_bins - 1)
        idx[s > hi] = n_bins
        return np.bincount(idx, minlength=n_bins + 1)

    return LossHistogramPair(edges, _normalize(hist(p), epsilon), _normalize(hist(q), epsilon), epsilon)


def js_from_histograms(p: np.ndarray, q: np.ndarray) -> float:
    m = 0.5 * (p + q)
    js = 0.5 * rel_entr(p, m).sum() + 0.5 * rel_entr(q, m).sum()
    return float(min(max(js / math.log(2), 0.0), 1.0))


def js_divergence(p_samples, q_samples, n_bins: int = 100, epsilon: float = 0.0) -> float:
    """Jensen-Shannon divergence (base 2) between two sample sets.

    Empty bins contribute nothing (0 log 0 = 0), so identical samples give
    exactly 0 and disjoint supports exactly 1.  A positive ``epsilon`` adds
    pseudo-counts before renormalizing.
    """
    h = loss_histograms(p_samples, q_samples, n_bins, epsilon)
    return js_from_histograms(h.member_hist, h.nonmember_hist)


@dataclass
class PerExitJS:
    values: np.ndarray  # NaN where one side is empty
    member_counts: np.ndarray
    nonmember_counts: np.ndarray

    @property
    def reliable(self) -> np.ndarray:
        return (self.member_counts >= MIN_RELIABLE) & (self.nonmember_counts >= MIN_RELIABLE)


def taken_losses(model: MultiExitModel, x, y):
    out = model.forward_all(x, y)
    return out.taken(out.loss), out.taken_exit


def per_exit_js_from(member_loss, member_exit, nonmember_loss, nonmember_exit, n_exits,
                     n_bins: int = 100, epsilon: float = 0.0) -> PerExitJS:
    vals = np.full(n_exits, np.nan)
    mc = np.bincount(member_exit, minlength=n_exits)
    nc = np.bincount(nonmember_exit, minlength=n_exits)
    for e in range(n_exits):
        if mc[e] and nc[e]:
            vals[e] = js_divergence(member_loss[member_exit == e], nonmember_loss[nonmember_exit == e],
                                    n_bins, epsilon)
    return PerExitJS(vals, mc, nc)


def per_exit_js(model: MultiExitModel, members, nonmembers, n_bins: int = 100,
                epsilon: float = 0.0) -> PerExitJS:
    """JS divergence of taken-exit losses, bucketed by the exit that fired."""
    ml, me = taken_losses(model, *members)
    nl, ne = taken_losses(model, *nonmembers)
    return per_exit_js_from(ml, me, nl, ne, model.n_exits, n_bins, epsilon)


def overall_js(model: MultiExitModel, members, nonmembers, n_bins: int = 100, epsilon: float = 0.0) -> float:
    return js_divergence(taken_losses(model, *members)[0], taken_losses(model, *nonmembers)[0], n_bins, epsilon)


@dataclass
class ExitRatios:
    ratios: np.ndarray  # NaN for exits nobody took
    counts: np.ndarray

    def weighted_mean(self) -> float:
        ok = self.counts > 0
        return float(np.sum(self.ratios[ok] * self.counts[ok]) / self.counts.sum())


def exit_ratios(member_exits, nonmember_exits, n_exits: int) -> ExitRatios:
    mc = np.bincount(np.asarray(member_exits), minlength=n_exits).astype(np.float64)
    nc = np.bincount(np.asarray(nonmember_exits), minlength=n_exits).astype(np.float64)
    total = mc + nc
    with np.errstate(invalid="ignore", divide="ignore"):
        ratios = np.where(total > 0, nc / total, np.nan)
    return ExitRatios(ratios, total.astype(np.int64))


def nonmember_ratio_per_exit(model: MultiExitModel, members, nonmembers) -> ExitRatios:
    """Share of non-members among the samples leaving at each exit."""
    return exit_ratios(model.predict_early(members[0])[2], model.predict_early(nonmembers[0])[2],
                       model.n_exits)


def spearman(x, y) -> float:
    """Spearman rank correlation, ignoring NaN pairs."""
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    ok = ~(np.isnan(x) | np.isnan(y))
    if ok.sum() < 2:
        return float("nan")
    return float(spearmanr(x[ok], y[ok]).statistic)


# report -------------------------------------------------------------------------


def _plain(v):
    """JSON-ready copy: arrays become lists, NaN becomes None (absent)."""
    if isinstance(v, dict):
        return {str(k): _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple, np.ndarray)):
        return [_plain(x) for x in (v.tolist() if isinstance(v, np.ndarray) else v)]
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return None if math.isnan(v) else float(v)
    if isinstance(v, (np.bool_,)):
        return bool(v)
    return v


@dataclass
class AuditReport:
    runs: list[dict] = field(default_factory=list)
    schema_version: str = SCHEMA_VERSION

    def to_dict(self) -> dict:
        return {"schema_version": self.schema_version, "runs": self.runs}

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, allow_nan=False) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def loads(cls, text: str) -> "AuditReport":
        d = json.loads(text)
        if "schema_version" not in d:
            raise ValueError("report has no schema_version")
        return cls(d["runs"], d["schema_version"])

    @classmethod
    def read(cls, path) -> "AuditReport":
        return cls.loads(Path(path).read_text(encoding="utf-8"))

    def asr_values(self):
        for run in self.runs:
            for adversary in (run.get("asr") or {}).values():
                for v in (adversary or {}).values():
                    if v is not None:
                        yield v


RUN_FIELDS = ("run_id", "task", "architecture", "n_exits", "tau", "accuracy", "ops_per_exit",
              "asr", "overfitting_gap", "js_overall", "js_per_exit", "js_reliable",
              "nonmember_ratio", "exit_counts", "steal_accuracy", "stolen_n_exits", "loss_hist", "sweep")


def build_report(runs: list[dict]) -> AuditReport:
    """Normalize per-run artifact dicts into a report.

    Every field in ``RUN_FIELDS`` appears in each run; missing analyses are
    recorded as None rather than defaulted.
    """
    out = []
    for run in runs:
        unknown = set(run) - set(RUN_FIELDS)
        if unknown:
            raise ValueError(f"unknown report fields: {sorted(unknown)}")
        rec = {k: _plain(run.get(k)) for k in RUN_FIELDS}
        for adversary in (rec["asr"] or {}).values():
            for name, v in (adversary or {}).items():
                if v is not None and not 0.0 <= v <= 1.0:
                    raise ValueError(f"ASR {name}={v} outside [0, 1]")
        out.append(rec)
    return AuditReport(out)


def _write_rows(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _cell(v):
    return "" if v is None else v


def write_figure_csvs(report: AuditReport, out_dir) -> list[Path]:
    """Flat CSVs for external plotting; returns the paths written."""
    out_dir = Path(out_dir)
    hist, js, ratio, sweep = [], [], [], []
    for run in report.runs:
        rid = run["run_id"]
        h = run.get("loss_hist")
        if h:
            edges = h["edges"] + [None]
            for i, (m, n) in enumerate(zip(h["member"], h["nonmember"])):
                hist.append([rid, i, edges[i], _cell(edges[i + 1]), m, n])
        for e, v in enumerate(run.get("js_per_exit") or []):
            js.append([rid, e, _cell(v), (run.get("js_reliable") or [None] * (e + 1))[e]])
        counts = run.get("exit_counts") or []
        for e, v in enumerate(run.get("nonmember_ratio") or []):
            ratio.append([rid, e, _cell(v), counts[e] if e < len(counts) else ""])
        for row in run.get("sweep") or []:
            sweep.append([rid, row["sigma"], row["hybrid_asr"], row["original_asr"],
                          row["mean_time"], row["steal_accuracy"]])
    files = {
        "fig3_loss_hist.csv": (["run_id", "bin", "left", "right", "member", "nonmember"], hist),
        "fig6_js_per_exit.csv": (["run_id", "exit", "js", "reliable"], js),
        "fig8_ratio.csv": (["run_id", "exit", "nonmember_ratio", "n_samples"], ratio),
        "fig16_tradeoff.csv": (["run_id", "sigma", "hybrid_asr", "original_asr", "mean_time_ms",
                                "steal_accuracy"], sweep),
    }
    paths = []
    for name, (header, rows) in files.items():
        _write_rows(out_dir / name, header, rows)
        paths.append(out_dir / name)
    return paths
