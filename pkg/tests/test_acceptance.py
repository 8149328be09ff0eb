"""Acceptance criteria, one test per criterion.

Each test records a PASS/FAIL line (printed at the end of the session by
conftest.py) and then asserts.  Criteria 4 to 10 share one grid of trained
targets and shadows: 5 seeds on the purchases preset, 1 to 6 exits.
"""

import time

import numpy as np
import pytest

from mexaudit import analysis
from mexaudit.attacks import (
    attack_success_rate,
    build_attack_dataset,
    train_attack_model,
)
from mexaudit.defense import TimeGuardConfig, secret_from_seed, timeguard_delays
from mexaudit.pipeline import (
    _attack_cfg,
    adaptive_exit_accuracy,
    adversary3,
    defense_sweep,
    derive_seed,
    label_only_attacks,
    label_only_magnitudes,
    load_config,
    load_dataset,
    make_splits,
    probe_set,
    score_attacks,
    split_four,
    steal,
    timing_model,
    train_model,
)
from mexaudit.timing import plan_queries, steal_from_times

from gradcheck import max_relative_error, random_small_model

SEEDS = range(5)
EXITS = range(1, 7)
SIGMAS = [0.0, 0.5, 1.0, 2.0, 3.0, 4.0, 6.0, 8.0, 12.0, 16.0, 24.0]
ADV3 = ["adversary.shadow_width=64", "adversary.shadow_shift_seed=1000"]


class Clock:
    def __init__(self):
        self.totals = {}

    def add(self, key, seconds):
        self.totals[key] = self.totals.get(key, 0.0) + seconds


@pytest.fixture(scope="session")
def grid():
    clock = Clock()
    runs, models = {}, {}
    for seed in SEEDS:
        cfg = load_config(seed=seed, overrides=["defense=null"] + ADV3)
        ds = load_dataset(cfg)
        splits = make_splits(ds, split_four(len(ds), derive_seed(seed, "split")))
        for ne in EXITS:
            t0 = time.perf_counter()
            target = train_model(cfg, splits.members, ds.n_classes, "target", n_exits=ne)
            shadow = train_model(cfg, splits.shadow_members, ds.n_classes, "shadow", n_exits=ne)
            r, _, _ = score_attacks(cfg, target, shadow, splits.shadow_members,
                                    splits.shadow_nonmembers, splits)
            if ne > 1:
                r.update(label_only_attacks(target, shadow, label_only_magnitudes(cfg, target, shadow, splits)))
            clock.add("attacks", time.perf_counter() - t0)
            pj = analysis.per_exit_js(target, splits.members, splits.nonmembers)
            r["js"] = pj.values
            r["ratios"] = analysis.nonmember_ratio_per_exit(target, splits.members, splits.nonmembers)
            if ne > 1:
                t0 = time.perf_counter()
                r["sweep"] = defense_sweep(cfg, target, shadow, splits, secret_from_seed(seed), SIGMAS)
                clock.add("sweep", time.perf_counter() - t0)
            runs[seed, ne] = r
            models[seed, ne] = (target, shadow)
        t0 = time.perf_counter()
        target = models[seed, 4][0]
        _, _, stolen = steal(cfg, target, splits)
        runs[seed, "adv3"] = adversary3(cfg, ds, splits, target, stolen)
        clock.add("adv3", time.perf_counter() - t0)
        runs[seed, "ctx"] = (cfg, splits)
    return {"runs": runs, "models": models, "clock": clock.totals}


MULTI = [(s, ne) for s in SEEDS for ne in EXITS if ne > 1]


class TestCriterion01Gradients:
    def test_finite_difference_on_random_models(self, record):
        t0 = time.perf_counter()
        errors = []
        for seed in range(20):
            model, x, y = random_small_model(seed)
            errors.append(max_relative_error(model, x, y))
        elapsed = time.perf_counter() - t0
        ok = max(errors) < 1e-4 and elapsed < 60
        record(1, ok, f"max rel err {max(errors):.2e} over 20 models, {elapsed:.1f}s")
        assert ok


class TestCriterion02Planner:
    def test_closed_form_and_monotone(self, record):
        a, b = plan_queries(3, 10).n_required, plan_queries(11, 10).n_required
        grid = np.array([[plan_queries(d, s).n_required for s in np.linspace(1, 20, 20)]
                         for d in np.linspace(1, 20, 20)])
        mono = bool(np.all(np.diff(grid, axis=0) <= 0) and np.all(np.diff(grid, axis=1) >= 0))
        ok = a == 86 and b == 7 and mono
        record(2, ok, f"N(3,10)={a}, N(11,10)={b}, monotone over 20x20 grid: {mono}")
        assert ok


class TestCriterion03CleanStealing:
    def test_exact_counts_on_three_tasks(self, record):
        t0 = time.perf_counter()
        worst_acc, mismatches = 1.0, []
        for preset in ("purchases", "locations", "texas"):
            cfg = load_config(seed=0, overrides=[f"dataset.preset={preset}", "adversary.n_probes=2000"])
            ds = load_dataset(cfg)
            splits = make_splits(ds, split_four(len(ds), derive_seed(0, "split")))
            for ne in range(2, 7):
                target = train_model(cfg, splits.members, ds.n_classes, "target", n_exits=ne)
                probe_res, eval_res, _ = steal(cfg, target, splits)
                worst_acc = min(worst_acc, probe_res.accuracy, eval_res.accuracy)
                if probe_res.n_exits != ne:
                    mismatches.append((preset, ne, probe_res.n_exits))
        elapsed = time.perf_counter() - t0
        ok = worst_acc >= 0.99 and not mismatches and elapsed < 300
        record(3, ok, f"worst accuracy {worst_acc:.4f}, count mismatches {mismatches}, {elapsed:.0f}s")
        assert ok


class TestCriterion04MultiExitLeaksLess:
    def test_mean_score_asr_below_vanilla(self, grid, record):
        runs = grid["runs"]
        vanilla = np.mean([runs[s, 1]["score"] for s in SEEDS])
        multi = np.mean([runs[k]["score"] for k in MULTI])
        elapsed = grid["clock"]["attacks"]
        ok = multi <= vanilla - 0.02 and elapsed < 1200
        record(4, ok, f"vanilla {vanilla:.4f}, multi-exit {multi:.4f} "
                      f"(gap {vanilla - multi:.4f}), {elapsed:.0f}s")
        assert ok


class TestCriterion05HybridGains:
    def test_hybrid_never_worse_and_better_on_average(self, grid, record):
        runs = grid["runs"]
        keys = MULTI
        diffs = {kind: np.array([runs[k][f"{kind}_hybrid"] - runs[k][kind] for k in keys])
                 for kind in ("score", "label_only")}
        ok = all(d.min() >= -0.01 and d.mean() > 0 for d in diffs.values())
        detail = ", ".join(f"{kind}: worst {d.min():+.4f}, mean {d.mean():+.4f}" for kind, d in diffs.items())
        record(5, ok, detail)
        assert ok


class TestCriterion06JensenShannon:
    def test_exact_cases_oracle_and_depth_trend(self, grid, record):
        from test_analysis import js_by_quadrature

        x = np.random.default_rng(0).exponential(size=500)
        same = analysis.js_divergence(x, x)
        disjoint = analysis.js_divergence(np.full(50, 0.1), np.full(60, 50.0))
        rng = np.random.default_rng(7)
        gauss = analysis.js_divergence(rng.normal(0, 1, 200_000), rng.normal(2, 1, 200_000))
        gauss_err = abs(gauss - js_by_quadrature(0, 1, 2, 1))
        rhos = []
        for ne in range(2, 7):
            mean_js = np.nanmean([grid["runs"][s, ne]["js"] for s in SEEDS], axis=0)
            rhos.append(analysis.spearman(np.arange(ne), mean_js))
        ok = same == 0.0 and abs(disjoint - 1) <= 1e-9 and gauss_err < 0.01 and min(rhos) > 0
        record(6, ok, f"JS(P,P)={same}, disjoint={disjoint:.12f}, gaussian err {gauss_err:.4f}, "
                      f"depth Spearman (2..6 exits) {np.round(rhos, 2).tolist()}")
        assert ok


class TestCriterion07Ratios:
    def test_last_exit_holds_more_nonmembers(self, grid, record):
        runs = grid["runs"]
        wins, worst_mean = {}, 0.0
        for ne in range(2, 7):
            wins[ne] = 0
            for s in SEEDS:
                r = runs[s, ne]["ratios"].ratios
                wins[ne] += int(r[-1] > r[0])
        for k in MULTI:
            worst_mean = max(worst_mean, abs(runs[k]["ratios"].weighted_mean() - 0.5))
        ok = min(wins.values()) >= 4 and worst_mean <= 1e-9
        record(7, ok, f"seeds with last > first per exit count {wins}, "
                      f"max |weighted mean - 0.5| {worst_mean:.1e}")
        assert ok


class TestCriterion08TimeGuard:
    def test_determinism_sweep_and_crossing(self, grid, record):
        target = grid["models"][0, 4][0]
        cfg, splits = grid["runs"][0, "ctx"]
        tm = timing_model(cfg, target)
        x = splits.nonmembers[0][:100]
        guard = TimeGuardConfig(5.0, secret_from_seed(0))
        first = timeguard_delays(x, target, tm, guard)[2]
        deterministic = all(np.array_equal(timeguard_delays(x, target, tm, guard)[2], first)
                            for _ in range(3))
        _, exits, t0 = timeguard_delays(x, target, tm, guard.with_sigma(0.0))
        identity = bool(np.array_equal(t0, tm.clean_times[exits]))

        sweeps = [grid["runs"][k]["sweep"] for k in MULTI]
        hyb = np.mean([[r.hybrid_asr for r in s.rows] for s in sweeps], axis=0)
        times = np.mean([[r.mean_time for r in s.rows] for s in sweeps], axis=0)
        asr_rise = float(np.max(np.diff(hyb)))
        time_drop = float(np.max(-np.diff(times)))
        worst_run_rise = max(float(np.max(np.diff([r.hybrid_asr for r in s.rows]))) for s in sweeps)
        crossings = [s.crossing_row() for s in sweeps]
        crossed = all(c is not None and c.mean_time < s.max_delay_time for c, s in zip(crossings, sweeps))
        elapsed = grid["clock"]["sweep"]
        ok = (deterministic and identity and asr_rise <= 0.02 and time_drop <= 0.02
              and crossed and elapsed < 900)
        record(8, ok, f"deterministic {deterministic}, sigma=0 identity {identity}, "
                      f"mean-curve max ASR rise {asr_rise:+.4f} (single-run worst {worst_run_rise:+.4f}), "
                      f"max time drop {time_drop:+.4f}, every run crosses below max delay {crossed} "
                      f"(sigmas {[c.sigma if c else None for c in crossings]}), {elapsed:.0f}s")
        assert ok


class TestCriterion09MaxTimeGuard:
    def test_timing_sees_one_exit_and_scores_decay(self, grid, record):
        counts = []
        for s, ne in MULTI:
            target = grid["models"][s, ne][0]
            cfg, splits = grid["runs"][s, "ctx"]
            x = np.vstack([splits.members[0], splits.nonmembers[0]])
            _, exits, t = timeguard_delays(x, target, timing_model(cfg, target), TimeGuardConfig(mode="max_delay"))
            counts.append(steal_from_times(t, exits).n_exits)
        acc, chance = {}, {}
        for ne in (2, 6):
            a, c = [], []
            for s in SEEDS:
                cfg, splits = grid["runs"][s, "ctx"]
                shadow = grid["models"][s, ne][1]
                a.append(adaptive_exit_accuracy(cfg, shadow, splits))
                probes = np.vstack([splits.shadow_members[0], splits.shadow_nonmembers[0]])
                c.append(np.bincount(shadow.predict_early(probes)[2]).max() / len(probes))
            acc[ne], chance[ne] = float(np.mean(a)), float(np.mean(c))
        ok = set(counts) == {1} and acc[2] > chance[2] and acc[6] < acc[2]
        record(9, ok, f"timing exit counts {sorted(set(counts))}, adaptive accuracy 2 exits {acc[2]:.3f} "
                      f"(majority {chance[2]:.3f}), 6 exits {acc[6]:.3f} (majority {chance[6]:.3f})")
        assert ok


class TestCriterion10Adversary3:
    def test_hybrid_survives_mismatched_shadows(self, grid, record):
        runs = grid["runs"]
        parts, ok = [], True
        for key in ("adversary3_width", "adversary3_shift"):
            res = [runs[s, "adv3"][key] for s in SEEDS]
            wins = sum(r["score_hybrid"] > r["score"] for r in res)
            lo_wins = sum(r["label_only_hybrid"] > r["label_only"] for r in res)
            ok &= wins >= 4
            gaps = [round(r["score_hybrid"] - r["score"], 3) for r in res]
            parts.append(f"{key}: score hybrid wins {wins}/5 {gaps}, label-only hybrid wins {lo_wins}/5")
        record(10, ok, "; ".join(parts) + f", {grid['clock']['adv3']:.0f}s")
        assert ok


class TestCriterion11NullSignal:
    def test_permuted_labels_and_coin_flip(self, grid, record):
        # Train on shadow records with shuffled membership, test on held-out
        # target records shuffled independently: no classifier can beat chance.
        # Scores against true target membership are printed for reference; a
        # non-constant function of informative scores need not sit at 0.5.
        asrs, true_membership = [], []
        for s in SEEDS:
            cfg, splits = grid["runs"][s, "ctx"]
            target, shadow = grid["models"][s, 4]
            ds = build_attack_dataset(shadow, splits.shadow_members, splits.shadow_nonmembers)
            attack = train_attack_model(ds.permuted(derive_seed(s, "permute")), _attack_cfg(cfg, "null"))
            test = build_attack_dataset(target, splits.members, splits.nonmembers)
            asrs.append(attack_success_rate(attack, test.permuted(derive_seed(s, "permute-test"))))
            true_membership.append(attack_success_rate(attack, test))
        rng = np.random.default_rng(0)
        truth = np.repeat([1, 0], 1000)
        coin = float(np.mean(rng.integers(0, 2, 2000) == truth))
        ok = all(abs(a - 0.5) <= 0.05 for a in asrs) and abs(coin - 0.5) <= 0.02
        record(11, ok, f"permuted-label test ASR {np.round(asrs, 3).tolist()}, coin flip {coin:.4f} "
                       f"(same attacks on true membership {np.round(true_membership, 3).tolist()})")
        assert ok


class TestInvariants:
    def test_gradient_attack_at_least_score_attack(self):
        cfg = load_config(seed=0, overrides=["defense=null", "adversary.modes=[score, gradient]"])
        ds = load_dataset(cfg)
        splits = make_splits(ds, split_four(len(ds), derive_seed(0, "split")))
        for ne in (1, 4):
            target = train_model(cfg, splits.members, ds.n_classes, "target", n_exits=ne)
            shadow = train_model(cfg, splits.shadow_members, ds.n_classes, "shadow", n_exits=ne)
            score = score_attacks(cfg, target, shadow, splits.shadow_members, splits.shadow_nonmembers,
                                  splits, "score")[0]["score"]
            grad = score_attacks(cfg, target, shadow, splits.shadow_members, splits.shadow_nonmembers,
                                 splits, "gradient")[0]["gradient"]
            assert grad >= score - 0.03 and score >= 0.5 - 0.02

    def test_mean_hybrid_at_least_mean_original(self, grid):
        keys = MULTI
        runs = grid["runs"]
        assert np.mean([runs[k]["score_hybrid"] for k in keys]) >= np.mean([runs[k]["score"] for k in keys])

    def test_probe_set_covers_locations(self):
        cfg = load_config(seed=0, overrides=["dataset.preset=locations"])
        ds = load_dataset(cfg)
        splits = make_splits(ds, split_four(len(ds), derive_seed(0, "split")))
        assert len(probe_set(splits, 2000, np.random.default_rng(0))) == 2000
