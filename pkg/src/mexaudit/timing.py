"""Inference-time side channel.

Times are simulated from operation counts: a sample leaving exit e costs
``base_time + time_per_op * ops[e]`` milliseconds, plus channel noise drawn
from a Gaussian truncated to positive values.  The adversary averages
repeated queries, clusters the averages with a 1-D Gaussian KDE and reads the
exit depth off the cluster rank.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from statistics import NormalDist

import numpy as np
from scipy.special import ndtr, ndtri

from .nn import MultiExitModel

logger = logging.getLogger(__name__)

DEFAULT_TIME_PER_OP = 5e-5  # ms per op
DEFAULT_BASE_TIME = 1.0  # ms


class ClusteringFailedError(RuntimeError):
    pass


@dataclass
class TimingModel:
    clean_times: np.ndarray
    noise_mu: float = 0.0
    noise_sigma: float = 0.0
    base_time: float = DEFAULT_BASE_TIME
    time_per_op: float = DEFAULT_TIME_PER_OP

    def __post_init__(self):
        self.clean_times = np.asarray(self.clean_times, dtype=np.float64)
        if self.noise_sigma < 0:
            raise ValueError("noise sigma must be non-negative")
        if np.any(np.diff(self.clean_times) <= 0):
            raise ValueError("clean times must increase strictly with exit depth")

    @classmethod
    def from_model(cls, model: MultiExitModel, noise_mu=0.0, noise_sigma=0.0,
                   base_time=DEFAULT_BASE_TIME, time_per_op=DEFAULT_TIME_PER_OP) -> "TimingModel":
        times = base_time + time_per_op * model.ops_per_exit()
        return cls(times, noise_mu, noise_sigma, base_time, time_per_op)

    def with_noise(self, mu: float, sigma: float) -> "TimingModel":
        return TimingModel(self.clean_times, mu, sigma, self.base_time, self.time_per_op)

    @property
    def min_gap(self) -> float:
        """Smallest clean-time difference between adjacent exits."""
        return float(np.diff(self.clean_times).min()) if len(self.clean_times) > 1 else math.inf


def positive_noise(size, mu: float, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Draws from N(mu, sigma^2) conditioned on being > 0.

    Rejection sampling; after 64 rounds any leftovers (only possible when mu is
    far below zero) are drawn by inverting the truncated CDF.  A noiseless
    channel (sigma == 0) returns ``mu`` unchanged.
    """
    if sigma < 0:
        raise ValueError("noise sigma must be non-negative")
    if sigma == 0:
        return np.full(size, float(mu))
    z = rng.normal(mu, sigma, size)
    bad = z <= 0
    for _ in range(64):
        if not bad.any():
            return z
        z[bad] = rng.normal(mu, sigma, bad.sum())
        bad = z <= 0
    lo = ndtr(-mu / sigma)
    u = rng.uniform(lo, 1.0, bad.sum())
    z[bad] = np.maximum(mu + sigma * ndtri(u), np.nextafter(0.0, 1.0))
    return z


def mean_noise(timing: TimingModel, n: int, n_queries: int, rng: np.random.Generator) -> np.ndarray:
    """Channel noise averaged over ``n_queries`` queries, for ``n`` samples."""
    if n_queries < 1:
        raise ValueError("n_queries must be at least 1")
    return positive_noise((n, n_queries), timing.noise_mu, timing.noise_sigma, rng).mean(axis=1)


def measure_exits(timing: TimingModel, exits, n_queries: int, rng: np.random.Generator) -> np.ndarray:
    """Average of ``n_queries`` noisy times for samples leaving at ``exits``."""
    exits = np.asarray(exits)
    return timing.clean_times[exits] + mean_noise(timing, len(exits), n_queries, rng)


def measure(timing: TimingModel, model: MultiExitModel, x, n_queries: int, rng: np.random.Generator):
    """Query ``model`` and return (averaged times, true exits)."""
    x = np.asarray(x, dtype=np.float64)
    exits = model.predict_early(x[None, :] if x.ndim == 1 else x)[2]
    times = measure_exits(timing, exits, n_queries, rng)
    if x.ndim == 1:
        return float(times[0]), int(exits[0])
    return times, exits


def estimate_sigma(timing: TimingModel, model: MultiExitModel, x, n_probe: int = 100,
                   rng: np.random.Generator | None = None) -> float:
    """Sample standard deviation of ``n_probe`` single-query times of one input."""
    if n_probe < 2:
        raise ValueError("n_probe must be at least 2")
    rng = rng or np.random.default_rng(0)
    _, e = measure(timing, model, x, 1, rng)
    times = measure_exits(timing, np.full(n_probe, e), 1, rng)
    return float(np.std(times, ddof=1))


@dataclass
class QueryPlan:
    delta_t: float
    sigma: float
    z_star: float
    n_required: int


def critical_z(confidence: float) -> float:
    """Two-sided critical value at table precision (1.96 at 95%)."""
    return round(NormalDist().inv_cdf(1 - (1 - confidence) / 2), 2)


def plan_queries(delta_t: float, sigma: float, confidence: float = 0.95) -> QueryPlan:
    """Queries per sample needed so two adjacent exits' averaged times differ
    significantly under a two-sample Z-test with equal query counts:
    N = ceil(2 (z* sigma / delta_t)^2), at least 1."""
    if delta_t <= 0:
        raise ValueError("delta_t must be positive")
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    z = critical_z(confidence)
    n = max(1, math.ceil(2 * (z * sigma / delta_t) ** 2))
    return QueryPlan(float(delta_t), float(sigma), z, n)


# clustering -----------------------------------------------------------------


def silverman_bandwidth(x: np.ndarray) -> float:
    """0.9 * min(sd, IQR/1.34) * n^(-1/5), falling back to the sd when the
    IQR collapses."""
    n = len(x)
    sd = float(np.std(x, ddof=1))
    q75, q25 = np.percentile(x, [75, 25])
    spread = min(sd, (q75 - q25) / 1.34)
    if spread <= 0:
        spread = sd
    return 0.9 * spread * n ** (-0.2)


@dataclass
class KdeClustering:
    bandwidth: float
    grid: np.ndarray
    density: np.ndarray
    minima: np.ndarray
    clusters: np.ndarray

    @property
    def n_clusters(self) -> int:
        return len(self.minima) + 1


def _kde(grid, x, h):
    values, counts = np.unique(x, return_counts=True)
    dens = np.zeros_like(grid)
    for start in range(0, len(values), 2048):
        v = values[start : start + 2048]
        c = counts[start : start + 2048]
        u = (grid[:, None] - v[None, :]) / h
        dens += (np.exp(-0.5 * u * u) * c).sum(axis=1)
    return dens / (len(x) * h * math.sqrt(2 * math.pi))


def _interior_minima(grid, density):
    d = np.where(density < 1e-12 * density.max(), 0.0, density)
    starts = np.flatnonzero(np.r_[True, d[1:] != d[:-1]])
    ends = np.r_[starts[1:], len(d)] - 1
    v = d[starts]
    cuts = []
    for j in range(1, len(v) - 1):
        if v[j] < v[j - 1] and v[j] < v[j + 1]:
            cuts.append((grid[starts[j]] + grid[ends[j]]) / 2)
    return np.asarray(cuts)


def _prune(x, grid, density, cuts, min_size, max_dip):
    """Drop insignificant minima.

    A cut survives if the density there is at most ``max_dip`` times the
    lower of its two neighbouring peaks, and every resulting cluster holds at
    least ``min_size`` values or is a point mass of two or more equal values.  Offending cuts are removed one at a time,
    shallowest first, so neighbours are re-evaluated after each merge.
    """
    cuts = list(cuts)
    while cuts:
        starts = np.r_[0, np.searchsorted(grid, cuts, side="right")]
        peaks = np.maximum.reduceat(density, np.minimum(starts, len(grid) - 1))
        at_cut = np.interp(cuts, grid, density)
        ratio = at_cut / np.maximum(np.minimum(peaks[:-1], peaks[1:]), 1e-300)
        if ratio.max() > max_dip:
            cuts.pop(int(ratio.argmax()))
            continue
        label = np.searchsorted(cuts, x)
        sizes = np.bincount(label, minlength=len(cuts) + 1).astype(float)
        # two or more identical values are a point mass, not a ripple
        lo = np.full(len(sizes), np.inf)
        hi = np.full(len(sizes), -np.inf)
        np.minimum.at(lo, label, x)
        np.maximum.at(hi, label, x)
        sizes[(sizes >= 2) & (lo == hi)] = np.inf
        small = int(sizes.argmin())
        if sizes[small] >= min_size:
            break
        # merge the small cluster across its shallower side
        sides = [i for i in (small - 1, small) if 0 <= i < len(cuts)]
        cuts.pop(max(sides, key=lambda i: ratio[i]))
    return np.asarray(cuts)


def _single_pass(x, bandwidth, grid_size, min_size, max_dip):
    h = bandwidth or silverman_bandwidth(x)
    grid = np.linspace(x.min() - 3 * h, x.max() + 3 * h, grid_size)
    density = _kde(grid, x, h)
    cuts = _prune(x, grid, density, _interior_minima(grid, density), min_size, max_dip)
    return h, grid, density, cuts


def _refine(x, grid_size, min_size, max_dip, depth=0):
    """Extra cut points from re-running the KDE inside one cluster."""
    if depth > 8 or len(x) < 2 * min_size or np.ptp(x) == 0:
        return []
    _, _, _, cuts = _single_pass(x, None, grid_size, min_size, max_dip)
    out = list(cuts)
    for lo, hi in zip(np.r_[-np.inf, cuts], np.r_[cuts, np.inf]):
        if len(cuts):
            out += _refine(x[(x > lo) & (x <= hi)], grid_size, min_size, max_dip, depth + 1)
    return out


def kde_cluster(times, bandwidth: float | None = None, grid_size: int = 512,
                refine: bool = True, min_fraction: float = 0.01,
                max_dip: float = 0.75) -> KdeClustering:
    """Partition 1-D values at the minima of a Gaussian KDE.

    The density is evaluated on ``grid_size`` points spanning
    [min - 3h, max + 3h] with Silverman's bandwidth unless one is given;
    cluster 0 holds the smallest values.  Minima count only when the density
    dips to ``max_dip`` of the lower neighbouring peak and each side keeps
    ``min_fraction`` of the values; this discards ripples from tail
    outliers and from sampling noise near a mode.

    A global bandwidth is driven by the overall spread, so a small cluster
    sitting next to a large one can vanish into its shoulder.  With
    ``refine`` each cluster is re-clustered on its own bandwidth under the
    same significance rule.
    """
    x = np.asarray(times, dtype=np.float64)
    if len(x) < 2:
        raise ValueError("need at least two values to cluster")
    if np.ptp(x) == 0:
        return KdeClustering(0.0, x[:1].copy(), np.ones(1), np.empty(0), np.zeros(len(x), dtype=int))
    min_size = max(1, int(math.ceil(min_fraction * len(x))))
    h, grid, density, minima = _single_pass(x, bandwidth, grid_size, min_size, max_dip)
    if refine:
        extra = []
        for lo, hi in zip(np.r_[-np.inf, minima], np.r_[minima, np.inf]):
            extra += _refine(x[(x > lo) & (x <= hi)], grid_size, min_size, max_dip)
        minima = np.sort(np.r_[minima, extra])
    return KdeClustering(h, grid, density, minima, np.searchsorted(minima, x))


@dataclass
class TimingTrace:
    sample_id: np.ndarray
    mean_time: np.ndarray
    n_queries: int
    true_exit: np.ndarray
    predicted_exit: np.ndarray | None = None

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sample_id", "mean_time_ms", "n_queries", "predicted_exit", "true_exit"])
            pred = self.predicted_exit if self.predicted_exit is not None else [""] * len(self.sample_id)
            for row in zip(self.sample_id, self.mean_time, pred, self.true_exit):
                w.writerow([int(row[0]), repr(float(row[1])), self.n_queries,
                            row[2] if row[2] == "" else int(row[2]), int(row[3])])


@dataclass
class StealResult:
    n_exits: int
    predicted_exit: np.ndarray
    accuracy: float
    clustering: KdeClustering
    trace: TimingTrace
    all_exits_observed: bool = True


def steal_from_times(times, true_exits, n_queries: int = 1, max_clusters: int = 8,
                     sample_ids=None) -> StealResult:
    """Cluster observed times; cluster rank is the guessed exit depth."""
    times = np.asarray(times, dtype=np.float64)
    true_exits = np.asarray(true_exits)
    km = kde_cluster(times)
    if km.n_clusters > max_clusters:
        raise ClusteringFailedError(
            f"found {km.n_clusters} clusters (max {max_clusters}); "
            "the channel is too noisy, raise n_queries"
        )
    ids = np.arange(len(times)) if sample_ids is None else np.asarray(sample_ids)
    trace = TimingTrace(ids, times, n_queries, true_exits, km.clusters)
    return StealResult(km.n_clusters, km.clusters, float(np.mean(km.clusters == true_exits)), km, trace)


def steal_exit_depths(timing: TimingModel, model: MultiExitModel, probe_x, n_queries: int,
                      rng: np.random.Generator, max_clusters: int = 8) -> StealResult:
    """Time every probe, cluster, and score the guess against the true exits."""
    times, exits = measure(timing, model, probe_x, n_queries, rng)
    result = steal_from_times(times, exits, n_queries, max_clusters)
    seen = np.unique(exits)
    if len(seen) < model.n_exits:
        logger.warning("probe set only reached exits %s of %d", seen.tolist(), model.n_exits)
        result.all_exits_observed = False
    return result
