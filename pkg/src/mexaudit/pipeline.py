"""Experiment configuration and the end-to-end audit of one target model.

Every random stream derives from the master seed via ``derive_seed``, so an
experiment is reproducible from its config alone.
"""

from __future__ import annotations

import logging
import zlib
from dataclasses import MISSING, asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import yaml

from . import analysis
from .attacks import (
    AttackTrainConfig,
    PerturbationConfig,
    adaptive_exit_classifier,
    build_attack_dataset,
    feature_spread,
    perturbation_magnitude,
    run_inference_attack,
    run_label_only_attack,
    train_attack_model,
)
from .datasets import PRESETS, FourWaySplit, SynthConfig, TabularDataset, load_csv, shifted_variant, split_four, synth_generate
from .defense import AttackSuite, TimeGuardConfig, tradeoff_sweep
from .nn import MultiExitModel, TrainConfig, accuracy, select_threshold, train_joint
from .timing import TimingModel, steal_exit_depths

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


def derive_seed(master: int, name: str) -> int:
    """Independent 63-bit seed for the named stream under ``master``."""
    ss = np.random.SeedSequence(master, spawn_key=(zlib.crc32(name.encode()),))
    return int(ss.generate_state(2, dtype=np.uint32).view(np.uint64)[0] >> 1)


# config ----------------------------------------------------------------------


@dataclass
class DatasetSection:
    preset: str | None = "purchases"
    csv: str | None = None
    label_column: str = "label"
    n_classes: int | None = None
    n_features: int | None = None
    samples_per_class: int | None = None
    prototype_flip_prob: float | None = None


@dataclass
class ModelSection:
    width: int = 128
    n_blocks: int = 5
    head_width: int = 64
    n_exits: int = 4
    tau: float | str = 0.9  # a number or "auto"


@dataclass
class TrainingSection:
    epochs: int = 8
    batch_size: int = 64
    learning_rate: float = 1e-3


@dataclass
class AdversarySection:
    modes: list = field(default_factory=lambda: ["score"])
    label_only: bool = True
    label_only_samples: int = 500
    attack_epochs: int = 40
    n_queries: int = 1
    noise_mu: float = 0.0
    noise_sigma: float = 0.0
    base_time: float = 1.0
    time_per_op: float = 5e-5
    n_probes: int = 2000
    shadow_width: int | None = None
    shadow_shift_seed: int | None = None


@dataclass
class DefenseSection:
    mode: str = "gaussian_delay"
    sigma: float = 5.0
    sigmas: list = field(default_factory=lambda: [0.0, 5.0, 10.0, 20.0, 40.0])
    secret_env: str = "MEXAUDIT_TIMEGUARD_SECRET"


@dataclass
class ExperimentConfig:
    seed: int = 0
    out: str = "runs/default"
    dataset: DatasetSection = field(default_factory=DatasetSection)
    model: ModelSection = field(default_factory=ModelSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    adversary: AdversarySection = field(default_factory=AdversarySection)
    defense: DefenseSection | None = field(default_factory=DefenseSection)

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self) -> "ExperimentConfig":
        d, m = self.dataset, self.model
        if (d.preset is None) == (d.csv is None):
            raise ConfigError("dataset: give exactly one of preset or csv")
        if d.preset is not None and d.preset not in PRESETS:
            raise ConfigError(f"dataset.preset: unknown preset {d.preset!r}")
        if d.csv is not None and not Path(d.csv).is_file():
            raise ConfigError(f"dataset.csv: no such file {d.csv}")
        if not 1 <= m.n_exits <= 6:
            raise ConfigError("model.n_exits: must lie in 1..6")
        if m.tau != "auto" and not (isinstance(m.tau, (int, float)) and 0 <= m.tau <= 1):
            raise ConfigError("model.tau: a number in [0, 1] or 'auto'")
        for mode in self.adversary.modes:
            if mode not in ("score", "gradient"):
                raise ConfigError(f"adversary.modes: unknown mode {mode!r}")
        if self.adversary.n_queries < 1:
            raise ConfigError("adversary.n_queries: must be at least 1")
        if self.adversary.noise_sigma < 0:
            raise ConfigError("adversary.noise_sigma: must be non-negative")
        if self.defense is not None:
            if self.defense.mode not in ("gaussian_delay", "max_delay"):
                raise ConfigError(f"defense.mode: unknown mode {self.defense.mode!r}")
            if self.defense.sigma < 0 or any(s < 0 for s in self.defense.sigmas):
                raise ConfigError("defense.sigma: must be non-negative")
        return self


SECTIONS = {"dataset": DatasetSection, "model": ModelSection, "training": TrainingSection,
            "adversary": AdversarySection, "defense": DefenseSection}


def _from_dict(cls, data, path=""):
    if data is None:
        return None
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping")
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in known:
            raise ConfigError(f"{path}{key}: unknown key")
        f = known[key]
        default = f.default_factory() if f.default_factory is not MISSING else f.default
        if key in SECTIONS and cls is ExperimentConfig:
            kwargs[key] = _from_dict(SECTIONS[key], value, f"{path}{key}.")
        else:
            kwargs[key] = _coerce(value, default, f"{path}{key}")
    return cls(**kwargs)


def _coerce(value, default, path):
    if value is None or default is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, str) and value == "auto":
            return value
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, list) and not isinstance(value, list):
        raise ConfigError(f"{path}: expected a list, got {value!r}")
    return value


def _set_path(d: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    node = d
    for k in keys[:-1]:
        if node.get(k) is None:
            node[k] = {}
        node = node[k]
        if not isinstance(node, dict):
            raise ConfigError(f"{dotted}: {k} is not a section")
    node[keys[-1]] = value


def load_config(path=None, overrides=(), seed=None, out=None) -> ExperimentConfig:
    """YAML file, then KEY=VALUE overrides (values parsed as YAML), then flags."""
    raw = {}
    if path is not None:
        try:
            raw = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"config {path} is not valid YAML: {exc}") from None
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not KEY=VALUE")
        key, value = item.split("=", 1)
        _set_path(raw, key.strip(), yaml.safe_load(value))
    if seed is not None:
        raw["seed"] = seed
    if out is not None:
        raw["out"] = str(out)
    return _from_dict(ExperimentConfig, raw).validate()


# data and models ---------------------------------------------------------------


def synth_config(cfg: ExperimentConfig) -> SynthConfig:
    d = cfg.dataset
    base = PRESETS[d.preset]
    updates = {k: getattr(d, k) for k in ("n_classes", "n_features", "samples_per_class",
                                          "prototype_flip_prob") if getattr(d, k) is not None}
    return replace(base, seed=derive_seed(cfg.seed, "data"), **updates)


def load_dataset(cfg: ExperimentConfig) -> TabularDataset:
    if cfg.dataset.csv is not None:
        return load_csv(cfg.dataset.csv, cfg.dataset.label_column)
    return synth_generate(synth_config(cfg))


@dataclass
class Splits:
    members: tuple
    nonmembers: tuple
    shadow_members: tuple
    shadow_nonmembers: tuple


def make_splits(ds: TabularDataset, split: FourWaySplit) -> Splits:
    return Splits(*(ds.subset(p) for p in split.parts()))


def train_model(cfg: ExperimentConfig, data: tuple, n_classes: int, name: str,
                n_exits: int | None = None, width: int | None = None) -> MultiExitModel:
    m = cfg.model
    tau = 0.9 if m.tau == "auto" else m.tau
    model = MultiExitModel.build(data[0].shape[1], n_classes, n_exits or m.n_exits,
                                 width=width or m.width, n_blocks=m.n_blocks,
                                 head_width=m.head_width, tau=tau,
                                 seed=derive_seed(cfg.seed, name + "-init"))
    t = cfg.training
    train_joint(model, *data, TrainConfig(epochs=t.epochs, batch_size=t.batch_size,
                                          learning_rate=t.learning_rate,
                                          seed=derive_seed(cfg.seed, name + "-train")))
    return model


def auto_tau(cfg: ExperimentConfig, model: MultiExitModel, splits: Splits, n_classes: int) -> float:
    """Pick tau on the owner's held-out data against a vanilla reference."""
    vanilla = train_model(cfg, splits.members, n_classes, "vanilla", n_exits=1)
    ref = accuracy(vanilla, *splits.nonmembers)
    choice = select_threshold(model, *splits.nonmembers, reference_accuracy=ref)
    model.tau = choice.tau
    return choice.tau


# attacks -------------------------------------------------------------------------


def _attack_cfg(cfg: ExperimentConfig, name: str) -> AttackTrainConfig:
    return AttackTrainConfig(epochs=cfg.adversary.attack_epochs, seed=derive_seed(cfg.seed, name))


def score_attacks(cfg, target, shadow, shadow_members, shadow_nonmembers, splits, mode="score",
                  target_exits=None, tag="adv1"):
    """Original and hybrid attacks of one mode; the hybrid reads exits from
    the target directly unless ``target_exits`` (a stolen pair) is given."""
    grad_exit = "taken"
    orig = train_attack_model(build_attack_dataset(shadow, shadow_members, shadow_nonmembers, mode, "none",
                                                   gradient_exit=grad_exit),
                              _attack_cfg(cfg, f"{tag}-{mode}"))
    out = {mode: run_inference_attack(orig, target, splits.members, splits.nonmembers,
                                      gradient_exit=grad_exit)}
    hyb = None
    if target.n_exits > 1:
        hyb = train_attack_model(build_attack_dataset(shadow, shadow_members, shadow_nonmembers, mode,
                                                      "direct", n_exits=target.n_exits,
                                                      gradient_exit=grad_exit),
                                 _attack_cfg(cfg, f"{tag}-{mode}-hybrid"))
        source = "direct" if target_exits is None else "timing"
        out[f"{mode}_hybrid"] = run_inference_attack(hyb, target, splits.members, splits.nonmembers,
                                                     source, target_exits, gradient_exit=grad_exit)
    else:
        out[f"{mode}_hybrid"] = None
    return out, orig, hyb


def _subsample(pair, n, rng):
    if len(pair[1]) <= n:
        return pair
    idx = np.sort(rng.choice(len(pair[1]), n, replace=False))
    return pair[0][idx], pair[1][idx]


@dataclass
class LabelOnlyMags:
    shadow_members: tuple
    shadow_nonmembers: tuple
    members: tuple
    nonmembers: tuple
    shadow_mags: np.ndarray
    target_mags: np.ndarray
    member_index: np.ndarray
    nonmember_index: np.ndarray


def label_only_magnitudes(cfg, target, shadow, splits) -> LabelOnlyMags:
    """Perturbation magnitudes on per-side subsamples, shared by variants."""
    n = cfg.adversary.label_only_samples
    rng = np.random.default_rng(derive_seed(cfg.seed, "label-only-subsample"))
    sm = _subsample(splits.shadow_members, n, rng)
    sn = _subsample(splits.shadow_nonmembers, n, rng)
    k = min(n, len(splits.members[1]), len(splits.nonmembers[1]))
    mi = np.sort(rng.choice(len(splits.members[1]), k, replace=False))
    ni = np.sort(rng.choice(len(splits.nonmembers[1]), k, replace=False))
    tm = (splits.members[0][mi], splits.members[1][mi])
    tn = (splits.nonmembers[0][ni], splits.nonmembers[1][ni])
    pc = PerturbationConfig(seed=derive_seed(cfg.seed, "label-only"))
    k_s = min(len(sm[1]), len(sn[1]))
    sx = np.vstack([sm[0][:k_s], sn[0][:k_s]])
    tx = np.vstack([tm[0], tn[0]])
    s_mags = perturbation_magnitude(shadow, sx, pc.scale * feature_spread(sx), pc)
    t_mags = perturbation_magnitude(target, tx, pc.scale * feature_spread(tx), pc)
    return LabelOnlyMags(sm, sn, tm, tn, s_mags, t_mags, mi, ni)


def label_only_attacks(target, shadow, lm: LabelOnlyMags, target_exits=None) -> dict:
    kw = dict(shadow_mags=lm.shadow_mags, target_mags=lm.target_mags)
    args = (target, shadow, lm.shadow_members, lm.shadow_nonmembers, lm.members, lm.nonmembers)
    out = {"label_only": run_label_only_attack(*args, per_exit=False, **kw).asr}
    if target.n_exits > 1:
        exits = None
        if target_exits is not None:
            exits = (target_exits[0][lm.member_index], target_exits[1][lm.nonmember_index])
        out["label_only_hybrid"] = run_label_only_attack(*args, per_exit=True, target_exits=exits, **kw).asr
    else:
        out["label_only_hybrid"] = None
    return out


def timing_model(cfg: ExperimentConfig, model: MultiExitModel) -> TimingModel:
    a = cfg.adversary
    return TimingModel.from_model(model, a.noise_mu, a.noise_sigma, a.base_time, a.time_per_op)


def probe_set(splits: Splits, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` probe inputs: the adversary's shadow data first, topped up with
    random rows whose features are drawn independently from the shadow
    data's per-feature values."""
    shadow = np.vstack([splits.shadow_members[0], splits.shadow_nonmembers[0]])
    if len(shadow) >= n:
        return shadow[:n]
    extra = shadow[rng.integers(0, len(shadow), (n - len(shadow), shadow.shape[1])),
                   np.arange(shadow.shape[1])]
    return np.vstack([shadow, extra])


def steal(cfg: ExperimentConfig, target: MultiExitModel, splits: Splits):
    """Adversary 2: count exits on shadow-side probes, then time the target's
    evaluation samples to guess the exit each one took."""
    tm = timing_model(cfg, target)
    rng = np.random.default_rng(derive_seed(cfg.seed, "timing"))
    probes = probe_set(splits, cfg.adversary.n_probes, np.random.default_rng(derive_seed(cfg.seed, "probes")))
    probe_result = steal_exit_depths(tm, target, probes, cfg.adversary.n_queries, rng)
    x = np.vstack([splits.members[0], splits.nonmembers[0]])
    eval_result = steal_exit_depths(tm, target, x, cfg.adversary.n_queries, rng)
    pred = eval_result.predicted_exit
    n_mem = len(splits.members[1])
    return probe_result, eval_result, (pred[:n_mem], pred[n_mem:])


# one full audit ------------------------------------------------------------------


def audit(cfg: ExperimentConfig, ds: TabularDataset, splits: Splits, target: MultiExitModel,
          shadow: MultiExitModel, run_id: str = "run") -> dict:
    """All attacks and diagnostics for one target; returns a report run."""
    a = cfg.adversary
    asr: dict = {"adversary1": {}}
    for mode in a.modes:
        res, _, _ = score_attacks(cfg, target, shadow, splits.shadow_members, splits.shadow_nonmembers,
                                  splits, mode)
        asr["adversary1"].update(res)
    lm = None
    if a.label_only:
        lm = label_only_magnitudes(cfg, target, shadow, splits)
        asr["adversary1"].update(label_only_attacks(target, shadow, lm))

    steal_acc = stolen_n = None
    if target.n_exits > 1:
        probe_res, eval_res, stolen = steal(cfg, target, splits)
        steal_acc = eval_res.accuracy
        stolen_n = probe_res.n_exits
        asr["adversary2"] = {}
        stolen_shadow = shadow
        if probe_res.n_exits != shadow.n_exits:
            logger.info("timing suggests %d exits; retraining the shadow", probe_res.n_exits)
            stolen_shadow = train_model(cfg, splits.shadow_members, ds.n_classes, "shadow-stolen",
                                        n_exits=min(max(probe_res.n_exits, 1), 6))
        for mode in a.modes:
            res, _, _ = score_attacks(cfg, target, stolen_shadow, splits.shadow_members,
                                      splits.shadow_nonmembers, splits, mode, stolen, tag="adv2")
            asr["adversary2"][f"{mode}_hybrid"] = res[f"{mode}_hybrid"]
        if lm is not None:
            asr["adversary2"]["label_only_hybrid"] = label_only_attacks(target, shadow, lm, stolen)["label_only_hybrid"]

        asr.update(adversary3(cfg, ds, splits, target, stolen))

    ml, me = analysis.taken_losses(target, *splits.members)
    nl, ne = analysis.taken_losses(target, *splits.nonmembers)
    hist = analysis.loss_histograms(ml, nl)
    pj = analysis.per_exit_js_from(ml, me, nl, ne, target.n_exits)
    ratios = analysis.exit_ratios(target.predict_early(splits.members[0])[2],
                                  target.predict_early(splits.nonmembers[0])[2], target.n_exits)
    return {
        "run_id": run_id,
        "task": ds.name,
        "architecture": target.descriptor(),
        "n_exits": target.n_exits,
        "tau": target.tau,
        "accuracy": {"train": accuracy(target, *splits.members), "test": accuracy(target, *splits.nonmembers)},
        "ops_per_exit": target.ops_per_exit(),
        "asr": asr,
        "overfitting_gap": analysis.overfitting_gap(target, splits.members, splits.nonmembers),
        "js_overall": analysis.js_divergence(ml, nl),
        "js_per_exit": pj.values,
        "js_reliable": pj.reliable,
        "nonmember_ratio": ratios.ratios,
        "exit_counts": ratios.counts,
        "steal_accuracy": steal_acc,
        "stolen_n_exits": stolen_n,
        "loss_hist": {"edges": hist.edges, "member": hist.member_hist, "nonmember": hist.nonmember_hist},
    }


def adversary3(cfg: ExperimentConfig, ds: TabularDataset, splits: Splits, target: MultiExitModel,
               stolen=None) -> dict:
    """Hybrid vs. original attacks with a shadow that differs from the target.

    ``adversary3_width`` trains the shadow at ``adversary.shadow_width``;
    ``adversary3_shift`` trains it on a shifted variant of the synthetic
    task.  Exits come from the timing channel (``stolen``) as for
    Adversary 2, or from the target when no stolen pair is given.
    """
    a = cfg.adversary
    shadows = {}
    if a.shadow_width:
        shadows["adversary3_width"] = (
            train_model(cfg, splits.shadow_members, ds.n_classes, "shadow-width", width=a.shadow_width), splits)
    if a.shadow_shift_seed is not None and cfg.dataset.preset is not None:
        sds = shifted_variant(synth_config(cfg), a.shadow_shift_seed)
        ssplit = make_splits(sds, split_four(len(sds), derive_seed(cfg.seed, "shift-split")))
        mixed = Splits(splits.members, splits.nonmembers, ssplit.shadow_members, ssplit.shadow_nonmembers)
        shadows["adversary3_shift"] = (
            train_model(cfg, ssplit.shadow_members, sds.n_classes, "shadow-shift"), mixed)
    out = {}
    for key, (shadow, sp) in shadows.items():
        res, _, _ = score_attacks(cfg, target, shadow, sp.shadow_members, sp.shadow_nonmembers,
                                  sp, "score", stolen, tag=key)
        if a.label_only:
            res.update(label_only_attacks(target, shadow, label_only_magnitudes(cfg, target, shadow, sp), stolen))
        out[key] = res
    return out


def defense_sweep(cfg: ExperimentConfig, target, shadow, splits, secret: bytes, sigmas=None):
    """TimeGuard trade-off table against the timing-based hybrid attack."""
    orig = train_attack_model(build_attack_dataset(shadow, splits.shadow_members, splits.shadow_nonmembers,
                                                   "score", "none"), _attack_cfg(cfg, "sweep-score"))
    hyb = train_attack_model(build_attack_dataset(shadow, splits.shadow_members, splits.shadow_nonmembers,
                                                  "score", "direct", n_exits=target.n_exits),
                             _attack_cfg(cfg, "sweep-score-hybrid"))
    suite = AttackSuite(orig, hyb, splits.members, splits.nonmembers)
    guard = TimeGuardConfig(0.0, secret, "gaussian_delay")
    return tradeoff_sweep(target, suite, sigmas if sigmas is not None else cfg.defense.sigmas,
                          timing_model(cfg, target), guard, cfg.adversary.n_queries,
                          derive_seed(cfg.seed, "sweep"))


def adaptive_exit_accuracy(cfg, shadow, splits) -> float:
    """Score-only exit classifier, the fallback adversary under max-delay."""
    probes = np.vstack([splits.shadow_members[0], splits.shadow_nonmembers[0]])
    _, acc = adaptive_exit_classifier(shadow, probes, _attack_cfg(cfg, "adaptive-exit"))
    return acc
