"""Membership-inference attacks on multi-exit models.

Covers the gradient-based (white-box), score-based (black-box) and
label-only attacks, their hybrid variants that also see the exit a sample
left through, exit-count stealing and the score-only exit classifier.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .nn import MLP, Adam, MultiExitModel, last_layer_gradient, one_hot, softmax

logger = logging.getLogger(__name__)

MODES = ("score", "gradient")
EXIT_SOURCES = ("none", "direct", "timing")
MIN_BUCKET = 10


class AttackError(ValueError):
    pass


@dataclass
class AttackFeatureRecord:
    score: np.ndarray
    penult_feature: np.ndarray | None
    loss: float
    last_grad: np.ndarray | None
    label_onehot: np.ndarray
    exit_onehot: np.ndarray | None
    is_member: int


@dataclass
class AttackDataset:
    """Column-wise store of attack records (one row per sample)."""

    mode: str
    score: np.ndarray
    loss: np.ndarray
    label_onehot: np.ndarray
    is_member: np.ndarray
    penult: np.ndarray | None = None
    grad: np.ndarray | None = None
    exit_onehot: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.is_member)

    def __getitem__(self, i: int) -> AttackFeatureRecord:
        return AttackFeatureRecord(
            self.score[i],
            None if self.penult is None else self.penult[i],
            float(self.loss[i]),
            None if self.grad is None else self.grad[i],
            self.label_onehot[i],
            None if self.exit_onehot is None else self.exit_onehot[i],
            int(self.is_member[i]),
        )

    @property
    def n_exits(self) -> int | None:
        return None if self.exit_onehot is None else self.exit_onehot.shape[1]

    def inputs(self) -> list[np.ndarray]:
        """Attack-model input branches in a fixed order."""
        if self.mode == "score":
            # descending sort makes the input class-agnostic
            branches = [-np.sort(-self.score, axis=1)]
        else:
            branches = [self.score, self.penult, self.loss[:, None], self.grad, self.label_onehot]
        if self.exit_onehot is not None:
            branches.append(self.exit_onehot)
        return branches

    def permuted(self, seed: int) -> "AttackDataset":
        """Copy with membership labels shuffled (a no-signal control)."""
        perm = np.random.default_rng(seed).permutation(len(self))
        return AttackDataset(self.mode, self.score, self.loss, self.label_onehot,
                             self.is_member[perm], self.penult, self.grad, self.exit_onehot)

    def to_csv(self, path) -> None:
        """One row per record: is_member, loss, score_*, exit_*, then (gradient
        mode) penult_*, grad_*, label_*."""
        cols = [("score", self.score)]
        if self.exit_onehot is not None:
            cols.append(("exit", self.exit_onehot))
        if self.mode == "gradient":
            cols += [("penult", self.penult), ("grad", self.grad), ("label", self.label_onehot)]
        header = ["is_member", "loss"] + [f"{name}_{j}" for name, a in cols for j in range(a.shape[1])]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for i in range(len(self)):
                row = [int(self.is_member[i]), repr(float(self.loss[i]))]
                for _, a in cols:
                    row.extend(repr(float(v)) for v in a[i])
                w.writerow(row)


def _balance(member, nonmember):
    n = min(len(member[0]), len(nonmember[0]))
    if n == 0:
        raise AttackError("empty member or non-member set")
    x = np.concatenate([member[0][:n], nonmember[0][:n]])
    y = np.concatenate([member[1][:n], nonmember[1][:n]])
    return x, np.asarray(y, dtype=np.int64), np.repeat([1, 0], n), n


def _balanced_exits(exits, n):
    member_exits, nonmember_exits = exits
    return np.concatenate([np.asarray(member_exits)[:n], np.asarray(nonmember_exits)[:n]])


def build_attack_dataset(
    model: MultiExitModel,
    members,
    nonmembers,
    mode: str = "score",
    exit_source: str = "none",
    exits: np.ndarray | None = None,
    n_exits: int | None = None,
    gradient_exit: str = "taken",
) -> AttackDataset:
    """Query ``model`` on a balanced member/non-member set.

    ``members`` and ``nonmembers`` are (features, labels) pairs; the larger
    side is truncated.  Features come from the exit that fired.  With
    ``exit_source="direct"`` the exit index is read off the model; with
    ``"timing"`` it must be supplied in ``exits`` as a pair of arrays aligned
    with ``members`` and ``nonmembers``.
    """
    if mode not in MODES:
        raise AttackError(f"unknown attack mode {mode!r}")
    if exit_source not in EXIT_SOURCES:
        raise AttackError(f"unknown exit source {exit_source!r}")
    x, y, is_member, n = _balance(members, nonmembers)
    out = model.forward_all(x, y)
    rows = np.arange(len(y))
    taken = out.taken_exit
    ds = AttackDataset(
        mode=mode,
        score=out.taken_probs,
        loss=out.taken(out.loss),
        label_onehot=one_hot(y, model.n_classes),
        is_member=is_member,
    )
    if mode == "gradient":
        grad_exit = taken if gradient_exit == "taken" else np.full(len(y), model.n_exits - 1)
        ds.penult = out.penult[grad_exit, rows]
        ds.grad = last_layer_gradient(model, x, y, grad_exit)
    if exit_source == "direct":
        ds.exit_onehot = one_hot(taken, n_exits or model.n_exits)
    elif exit_source == "timing":
        if exits is None:
            raise AttackError("exit_source='timing' needs predicted exits from a timing trace")
        exits = _balanced_exits(exits, n)
        width = n_exits or int(exits.max()) + 1
        ds.exit_onehot = one_hot(np.clip(exits, 0, width - 1), width)
    return ds


def fit_exit_width(ds: AttackDataset, width: int | None) -> AttackDataset:
    """Pad or clip the exit one-hot to ``width`` columns (stolen exit counts may
    differ from the shadow model's)."""
    if ds.exit_onehot is None or width is None or ds.exit_onehot.shape[1] == width:
        return ds
    idx = np.clip(ds.exit_onehot.argmax(axis=1), 0, width - 1)
    return AttackDataset(ds.mode, ds.score, ds.loss, ds.label_onehot, ds.is_member,
                         ds.penult, ds.grad, one_hot(idx, width))


@dataclass
class AttackTrainConfig:
    epochs: int = 40
    batch_size: int = 128
    learning_rate: float = 1e-3
    seed: int = 0
    encoder_dims: tuple[int, ...] = (128, 64)
    head_dims: tuple[int, ...] = (256, 128, 64)
    val_fraction: float = 0.2  # held out for early stopping; 0 trains all epochs on everything


class BranchNet:
    """Per-input encoders (or identity), concatenated into a dense head.

    Inputs are standardised with statistics frozen at fit time.
    """

    def __init__(self, encoders: list[MLP | None], head: MLP, means, stds):
        self.encoders = encoders
        self.head = head
        self.means = means
        self.stds = stds
        self._enc_masks = []

    def _standardize(self, branches):
        return [(b - m) / s for b, m, s in zip(branches, self.means, self.stds)]

    def forward(self, branches, cache=False):
        parts, masks = [], []
        for enc, b in zip(self.encoders, self._standardize(branches)):
            if enc is None:
                parts.append(b)
                masks.append(None)
            else:
                h = enc.forward(b, cache)[0]
                mask = h > 0
                parts.append(h * mask)
                masks.append(mask)
        if cache:
            self._enc_masks = masks
            self._widths = [p.shape[1] for p in parts]
        return self.head.forward(np.concatenate(parts, axis=1), cache)[0]

    def backward(self, grad):
        g = self.head.backward(grad)
        offsets = np.cumsum([0, *self._widths])
        for i, (enc, mask) in enumerate(zip(self.encoders, self._enc_masks)):
            if enc is not None:
                enc.backward(g[:, offsets[i] : offsets[i + 1]] * mask)

    def layers(self):
        out = [l for e in self.encoders if e is not None for l in e.layers]
        return out + self.head.layers

    def predict_proba(self, branches) -> np.ndarray:
        return softmax(self.forward(branches))


def _build_branchnet(branches, n_out, use_encoders, config, rng) -> BranchNet:
    means = [b.mean(axis=0) for b in branches]
    stds = [np.where(b.std(axis=0) > 1e-8, b.std(axis=0), 1.0) for b in branches]
    encoders = []
    width = 0
    for b in branches:
        if use_encoders:
            enc = MLP.init([b.shape[1], *config.encoder_dims], rng)
            encoders.append(enc)
            width += enc.out_dim
        else:
            encoders.append(None)
            width += b.shape[1]
    head = MLP.init([width, *config.head_dims, n_out], rng)
    return BranchNet(encoders, head, means, stds)


def _fit(net: BranchNet, branches, targets, config: AttackTrainConfig, rng) -> None:
    """Adam on cross-entropy.  With ``val_fraction`` > 0 a random slice is held
    out and the parameters of the epoch with the lowest held-out loss are
    kept."""
    params = [p for l in net.layers() for p in l.params()]
    grads = [g for l in net.layers() for g in l.grads()]
    opt = Adam(params, config.learning_rate)
    order = rng.permutation(len(targets))
    n_val = int(round(config.val_fraction * len(targets)))
    val, train = order[:n_val], order[n_val:]
    best, best_loss = None, np.inf
    for _ in range(config.epochs):
        shuffled = train[rng.permutation(len(train))]
        for start in range(0, len(train), config.batch_size):
            batch = shuffled[start : start + config.batch_size]
            for g in grads:
                g.fill(0.0)
            p = softmax(net.forward([b[batch] for b in branches], cache=True))
            p[np.arange(len(batch)), targets[batch]] -= 1.0
            net.backward(p / len(batch))
            opt.step(grads)
        if n_val:
            p = net.predict_proba([b[val] for b in branches])
            loss = -np.mean(np.log(np.maximum(p[np.arange(n_val), targets[val]], 1e-300)))
            if loss < best_loss:
                best, best_loss = [q.copy() for q in params], loss
    if best is not None:
        for q, b in zip(params, best):
            q[...] = b


@dataclass
class AttackModel:
    mode: str
    net: BranchNet
    n_exits: int | None = None

    @property
    def n_inputs(self) -> int:
        return len(self.net.encoders)

    @property
    def head_depth(self) -> int:
        return len(self.net.head.layers)

    def predict(self, ds: AttackDataset) -> np.ndarray:
        ds = fit_exit_width(ds, self.n_exits)
        if (ds.exit_onehot is None) != (self.n_exits is None):
            raise AttackError("attack model and dataset disagree on exit information")
        return self.net.predict_proba(ds.inputs()).argmax(axis=1)


def train_attack_model(ds: AttackDataset, config: AttackTrainConfig | None = None) -> AttackModel:
    """Binary member/non-member classifier trained by cross-entropy.

    Score mode feeds the sorted score (and exit one-hot) straight into a
    4-layer head; gradient mode gives every input its own encoder first.
    """
    config = config or AttackTrainConfig()
    if len(np.unique(ds.is_member)) < 2:
        raise AttackError("attack training records contain a single class")
    rng = np.random.default_rng(config.seed)
    branches = ds.inputs()
    net = _build_branchnet(branches, 2, ds.mode == "gradient", config, rng)
    _fit(net, branches, ds.is_member.astype(np.int64), config, rng)
    return AttackModel(ds.mode, net, ds.n_exits)


def attack_success_rate(attack: AttackModel, ds: AttackDataset) -> float:
    return float(np.mean(attack.predict(ds) == ds.is_member))


def run_inference_attack(
    attack: AttackModel,
    target: MultiExitModel,
    members,
    nonmembers,
    exit_source: str = "none",
    exits=None,
    gradient_exit: str = "taken",
) -> float:
    """ASR of ``attack`` on the target's balanced member/non-member set."""
    ds = build_attack_dataset(target, members, nonmembers, attack.mode, exit_source, exits,
                              attack.n_exits, gradient_exit)
    return attack_success_rate(attack, ds)


# label-only -----------------------------------------------------------------


@dataclass
class PerturbationConfig:
    n_directions: int = 10
    steps: int = 20
    scale: float = 5.0
    seed: int = 0


def feature_spread(x: np.ndarray) -> float:
    """Root of the total feature variance: the typical L2 spread of the data."""
    return float(np.sqrt(np.var(x, axis=0).sum()))


def perturbation_magnitude(model: MultiExitModel, x, s_max: float,
                           config: PerturbationConfig | None = None) -> np.ndarray:
    """Mean over random unit directions of the smallest L2 step that changes
    the early-exit prediction, found by bisection on [0, s_max].

    Directions that never flip the label contribute ``s_max``.
    """
    config = config or PerturbationConfig()
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    rng = np.random.default_rng(config.seed)
    first = model.blocks[0].dense
    # the first dense layer is affine, so its output along x + s*d is zx + s*zd
    zx = first.forward(model._check_input(x))
    base = model.predict_early(None, preact=zx)[1]
    total = np.zeros(len(x))
    for _ in range(config.n_directions):
        d = rng.standard_normal(x.shape)
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        zd = d @ first.weights.T
        flips = model.predict_early(None, preact=zx + s_max * zd)[1] != base
        lo = np.zeros(len(x))
        hi = np.full(len(x), s_max)
        idx = np.flatnonzero(flips)
        for _ in range(config.steps):
            if not len(idx):
                break
            mid = (lo[idx] + hi[idx]) / 2
            changed = model.predict_early(None, preact=zx[idx] + mid[:, None] * zd[idx])[1] != base[idx]
            hi[idx] = np.where(changed, mid, hi[idx])
            lo[idx] = np.where(changed, lo[idx], mid)
        total += hi
    mags = total / config.n_directions
    return mags[0] if single else mags


def fit_threshold(mags: np.ndarray, is_member: np.ndarray) -> tuple[float, float]:
    """Threshold t maximising the accuracy of "member iff magnitude > t".

    Returns (t, number of correct decisions / len).  Candidates are 0, the
    midpoints between distinct magnitudes, and the maximum magnitude.
    """
    order = np.argsort(mags, kind="stable")
    m = mags[order]
    lab = is_member[order].astype(np.int64)
    # predicting member for indices >= k: correct = nonmembers below + members above
    nonmem_below = np.concatenate([[0], np.cumsum(1 - lab)])
    mem_above = lab.sum() - np.concatenate([[0], np.cumsum(lab)])
    correct = nonmem_below + mem_above
    # a cut is only realisable between distinct values
    valid = np.ones(len(m) + 1, dtype=bool)
    valid[1:-1] = m[1:] > m[:-1]
    k = int(np.flatnonzero(valid)[np.argmax(correct[valid])])
    if k == 0:
        t = 0.0 if m[0] > 0 else float(np.nextafter(m[0], -np.inf))
    elif k == len(m):
        t = float(m[-1])
    else:
        t = float((m[k - 1] + m[k]) / 2)
    return t, float(correct[k] / len(m))


@dataclass
class LabelOnlyResult:
    asr: float
    global_threshold: float
    thresholds: dict = field(default_factory=dict)
    fallback_exits: list = field(default_factory=list)
    asr_per_exit: dict = field(default_factory=dict)


def label_only_thresholds(mags, is_member, exits=None, n_exits=None):
    """Global threshold plus (when ``exits`` given) one per exit bucket.

    Buckets with fewer than 10 shadow samples use the global threshold.
    """
    global_t, _ = fit_threshold(mags, is_member)
    thresholds, fallback = {}, []
    if exits is not None:
        for e in range(n_exits or int(exits.max()) + 1):
            sel = exits == e
            if sel.sum() < MIN_BUCKET:
                thresholds[e] = global_t
                fallback.append(e)
            else:
                thresholds[e] = fit_threshold(mags[sel], is_member[sel])[0]
    return global_t, thresholds, fallback


def run_label_only_attack(
    target: MultiExitModel,
    shadow: MultiExitModel,
    shadow_members,
    shadow_nonmembers,
    target_members,
    target_nonmembers,
    per_exit: bool = False,
    target_exits=None,
    config: PerturbationConfig | None = None,
    shadow_mags=None,
    target_mags=None,
) -> LabelOnlyResult:
    """Threshold the perturbation magnitude, calibrated on the shadow model.

    With ``per_exit`` each sample is judged against the threshold of the exit
    it left through (read from the shadow model for calibration, and from
    ``target_exits``, a (members, non-members) pair, or the target model
    itself for the attack).  The
    reported ASR is the accuracy on the pooled balanced target set, i.e. the
    population-weighted mean of the per-exit accuracies.
    Precomputed magnitudes can be passed to share work between variants.
    """
    config = config or PerturbationConfig()
    sx, sy, s_mem, _ = _balance(shadow_members, shadow_nonmembers)
    tx, ty, t_mem, n = _balance(target_members, target_nonmembers)
    if shadow_mags is None:
        shadow_mags = perturbation_magnitude(shadow, sx, config.scale * feature_spread(sx), config)
    if target_mags is None:
        target_mags = perturbation_magnitude(target, tx, config.scale * feature_spread(tx), config)
    if not per_exit:
        t, _, _ = label_only_thresholds(shadow_mags, s_mem)
        pred = target_mags > t
        return LabelOnlyResult(float(np.mean(pred == t_mem)), t)
    s_exits = shadow.predict_early(sx)[2]
    if target_exits is None:
        t_exits = target.predict_early(tx)[2]
    else:
        t_exits = _balanced_exits(target_exits, n)
    n_ex = max(shadow.n_exits, int(t_exits.max()) + 1)
    global_t, thresholds, fallback = label_only_thresholds(shadow_mags, s_mem, s_exits, n_ex)
    if fallback:
        logger.info("label-only: exits %s use the global threshold", fallback)
    thr = np.array([thresholds.get(int(e), global_t) for e in t_exits])
    pred = target_mags > thr
    correct = pred == t_mem
    per = {int(e): float(correct[t_exits == e].mean()) for e in np.unique(t_exits)}
    return LabelOnlyResult(float(correct.mean()), global_t, thresholds, fallback, per)


# exit stealing ----------------------------------------------------------------


def count_exits(oracle, probe_x) -> int:
    """Number of exits as (largest exit index observed) + 1.

    ``oracle`` maps a batch of inputs to the exit indices the target reports.
    """
    exits = np.asarray(oracle(probe_x))
    if not len(exits):
        raise AttackError("empty probe set")
    return int(exits.max()) + 1


@dataclass
class ExitClassifier:
    net: BranchNet
    n_exits: int

    def predict(self, scores: np.ndarray) -> np.ndarray:
        return self.net.predict_proba([-np.sort(-scores, axis=1)]).argmax(axis=1)


def adaptive_exit_classifier(
    shadow: MultiExitModel, probe_x, config: AttackTrainConfig | None = None,
    holdout_frac: float = 0.3,
) -> tuple[ExitClassifier, float]:
    """Learn to guess the exit a prediction came from using the score alone.

    Trains a 4-layer MLP on (sorted score, exit) pairs from the shadow model
    and returns it with its accuracy on a held-out slice of ``probe_x``.
    """
    config = config or AttackTrainConfig()
    rng = np.random.default_rng(config.seed)
    probs, _, exits = shadow.predict_early(probe_x)
    order = rng.permutation(len(exits))
    n_hold = int(round(holdout_frac * len(exits)))
    hold, fit = order[:n_hold], order[n_hold:]
    branches = [-np.sort(-probs[fit], axis=1)]
    cfg = AttackTrainConfig(config.epochs, config.batch_size, config.learning_rate, config.seed,
                            head_dims=(128, 64, 32))
    net = _build_branchnet(branches, shadow.n_exits, False, cfg, rng)
    _fit(net, branches, exits[fit], cfg, rng)
    clf = ExitClassifier(net, shadow.n_exits)
    acc = float(np.mean(clf.predict(probs[hold]) == exits[hold])) if n_hold else float("nan")
    return clf, acc
