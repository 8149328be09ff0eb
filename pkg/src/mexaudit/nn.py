"""Dense multi-exit network engine.

Everything runs in float64 on numpy arrays with the batch on axis 0.  A model
is a backbone of ``Block``s (Linear -> BatchNorm -> ReLU), a list of two-layer
exit heads attached after selected blocks, and a three-layer final classifier
that acts as the last exit.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

TAU_GRID = np.round(np.arange(21) * 0.05, 2)
MAX_EXITS = 6


class InputShapeError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int):
        super().__init__(f"training diverged at epoch {epoch}: loss is not finite")
        self.epoch = epoch


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(probs: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Per-sample cross-entropy of ``probs`` (n, C) against integer labels."""
    p = probs[np.arange(len(y)), y]
    return -np.log(np.clip(p, 1e-300, None))


def one_hot(idx: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros((len(idx), n))
    out[np.arange(len(idx)), idx] = 1.0
    return out


class DenseLayer:
    def __init__(self, weights: np.ndarray, bias: np.ndarray):
        self.weights = np.asarray(weights, dtype=np.float64)
        self.bias = np.asarray(bias, dtype=np.float64)
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise InputShapeError("dense layer expects (out, in) weights and (out,) bias")
        self.grad_weights = np.zeros_like(self.weights)
        self.grad_bias = np.zeros_like(self.bias)
        self._x = None

    @classmethod
    def init(cls, in_dim: int, out_dim: int, rng: np.random.Generator) -> "DenseLayer":
        limit = np.sqrt(6.0 / (in_dim + out_dim))
        return cls(rng.uniform(-limit, limit, size=(out_dim, in_dim)), np.zeros(out_dim))

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]

    def forward(self, x: np.ndarray, cache: bool = False) -> np.ndarray:
        if cache:
            self._x = x
        return x @ self.weights.T + self.bias

    def backward(self, grad: np.ndarray) -> np.ndarray:
        self.grad_weights += grad.T @ self._x
        self.grad_bias += grad.sum(axis=0)
        return grad @ self.weights

    def params(self) -> list[np.ndarray]:
        return [self.weights, self.bias]

    def grads(self) -> list[np.ndarray]:
        return [self.grad_weights, self.grad_bias]

    def n_ops(self) -> int:
        return 2 * self.in_dim * self.out_dim + self.out_dim


class NormLayer:
    """1-D batch normalisation.

    In train mode the output uses batch statistics (and, when asked, folds
    them into the running estimates); in eval mode only the running
    statistics are used.
    """

    def __init__(self, dim: int, epsilon: float = 1e-5, momentum: float = 0.1):
        self.gamma = np.ones(dim)
        self.beta = np.zeros(dim)
        self.running_mean = np.zeros(dim)
        self.running_var = np.ones(dim)
        self.epsilon = epsilon
        self.momentum = momentum
        self.grad_gamma = np.zeros(dim)
        self.grad_beta = np.zeros(dim)
        self._cache = None

    @property
    def dim(self) -> int:
        return self.gamma.shape[0]

    def forward(self, x, training=False, cache=False, update_stats=True):
        if training:
            mean = x.mean(axis=0)
            var = x.var(axis=0)
            if update_stats:
                n = x.shape[0]
                unbiased = var * n / (n - 1) if n > 1 else var
                m = self.momentum
                self.running_mean = (1 - m) * self.running_mean + m * mean
                self.running_var = (1 - m) * self.running_var + m * unbiased
        else:
            mean, var = self.running_mean, self.running_var
            if not cache:
                scale = self.gamma / np.sqrt(var + self.epsilon)
                return x * scale + (self.beta - mean * scale)
        inv_std = 1.0 / np.sqrt(var + self.epsilon)
        xhat = (x - mean) * inv_std
        if cache:
            self._cache = (xhat, inv_std, training)
        return self.gamma * xhat + self.beta

    def backward(self, grad: np.ndarray) -> np.ndarray:
        xhat, inv_std, training = self._cache
        self.grad_gamma += (grad * xhat).sum(axis=0)
        self.grad_beta += grad.sum(axis=0)
        dxhat = grad * self.gamma
        if not training:
            return dxhat * inv_std
        n = grad.shape[0]
        return (inv_std / n) * (
            n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0)
        )

    def params(self) -> list[np.ndarray]:
        return [self.gamma, self.beta]

    def grads(self) -> list[np.ndarray]:
        return [self.grad_gamma, self.grad_beta]

    def n_ops(self) -> int:
        return 4 * self.dim


class Block:
    """Linear -> BatchNorm -> ReLU."""

    def __init__(self, dense: DenseLayer, norm: NormLayer):
        if dense.out_dim != norm.dim:
            raise InputShapeError("block dense output must match norm dimension")
        self.dense = dense
        self.norm = norm
        self._mask = None

    def forward(self, x, training=False, cache=False, update_stats=True, preact=None):
        z = self.dense.forward(x, cache) if preact is None else preact
        h = self.norm.forward(z, training, cache, update_stats)
        mask = h > 0
        if cache:
            self._mask = mask
        return h * mask

    def backward(self, grad):
        return self.dense.backward(self.norm.backward(grad * self._mask))

    def layers(self):
        return [self.dense, self.norm]

    def n_ops(self) -> int:
        return self.dense.n_ops() + self.norm.n_ops() + self.norm.dim


class MLP:
    """Stack of dense layers with ReLU between them (none after the last).

    ``forward`` returns the output and the input of the last dense layer, which
    is the "penultimate feature" the attacks consume.
    """

    def __init__(self, layers: list[DenseLayer]):
        self.layers = layers
        self._masks: list[np.ndarray] = []

    @classmethod
    def init(cls, dims: list[int], rng: np.random.Generator) -> "MLP":
        return cls([DenseLayer.init(a, b, rng) for a, b in zip(dims[:-1], dims[1:])])

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    def forward(self, x, cache=False):
        masks = []
        for layer in self.layers[:-1]:
            x = layer.forward(x, cache)
            mask = x > 0
            masks.append(mask)
            x = x * mask
        if cache:
            self._masks = masks
        return self.layers[-1].forward(x, cache), x

    def backward(self, grad):
        grad = self.layers[-1].backward(grad)
        for layer, mask in zip(reversed(self.layers[:-1]), reversed(self._masks)):
            grad = layer.backward(grad * mask)
        return grad

    def n_ops(self) -> int:
        return sum(l.n_ops() for l in self.layers) + sum(l.out_dim for l in self.layers[:-1])


def exit_positions(n_exits: int, n_blocks: int) -> list[int]:
    """Block indices after which the ``n_exits - 1`` internal heads sit.

    Linear spacing over the backbone starting at the first block, floored to
    whole blocks; the final classifier is always the last exit.
    """
    n_heads = n_exits - 1
    if not 0 <= n_heads <= n_blocks:
        raise ValueError(f"cannot place {n_heads} heads on {n_blocks} blocks")
    return [int(i * n_blocks // n_heads) for i in range(n_heads)] if n_heads else []


@dataclass
class ForwardRecord:
    per_exit_probs: list[np.ndarray]
    per_exit_loss: list[float] | None
    penultimate_feature: np.ndarray
    taken_exit: int
    predicted_label: int


@dataclass
class BatchForward:
    """Outputs of every exit for a batch; arrays are indexed [exit, sample, ...]."""

    probs: np.ndarray
    penult: np.ndarray
    taken_exit: np.ndarray
    loss: np.ndarray | None = None

    @property
    def n_exits(self) -> int:
        return self.probs.shape[0]

    def taken(self, what: np.ndarray) -> np.ndarray:
        """Select ``what[exit, sample]`` at each sample's taken exit."""
        return what[self.taken_exit, np.arange(what.shape[1])]

    @property
    def taken_probs(self) -> np.ndarray:
        return self.taken(self.probs)

    @property
    def predicted(self) -> np.ndarray:
        return self.taken_probs.argmax(axis=1)


def taken_exits(probs: np.ndarray, tau: float) -> np.ndarray:
    """First exit whose top-class probability reaches ``tau``; else the last."""
    hit = probs.max(axis=-1) >= tau
    hit[-1] = True
    return hit.argmax(axis=0)


class MultiExitModel:
    def __init__(
        self,
        blocks: list[Block],
        exit_heads: list[MLP],
        exit_attach_indices: list[int],
        final_classifier: MLP,
        tau: float = 0.7,
    ):
        if len(exit_heads) != len(exit_attach_indices):
            raise ValueError("one attach index per exit head")
        if any(b <= a for a, b in zip(exit_attach_indices, exit_attach_indices[1:])):
            raise ValueError("exit attach indices must be strictly increasing")
        if exit_attach_indices and not 0 <= exit_attach_indices[-1] < len(blocks):
            raise ValueError("exit attach index outside the backbone")
        if len(exit_heads) + 1 > MAX_EXITS:
            raise ValueError(f"at most {MAX_EXITS} exits supported")
        self.blocks = blocks
        self.exit_heads = exit_heads
        self.exit_attach_indices = list(exit_attach_indices)
        self.final_classifier = final_classifier
        self.tau = float(tau)
        self.training = False

    @classmethod
    def build(
        cls,
        n_features: int,
        n_classes: int,
        n_exits: int = 1,
        width: int = 256,
        n_blocks: int = 5,
        head_width: int = 64,
        tau: float = 0.7,
        seed: int = 0,
    ) -> "MultiExitModel":
        rng = np.random.default_rng(seed)
        blocks = []
        in_dim = n_features
        for _ in range(n_blocks):
            blocks.append(Block(DenseLayer.init(in_dim, width, rng), NormLayer(width)))
            in_dim = width
        positions = exit_positions(n_exits, n_blocks)
        heads = [MLP.init([width, head_width, n_classes], rng) for _ in positions]
        final = MLP.init([width, width, head_width, n_classes], rng)
        return cls(blocks, heads, positions, final, tau)

    @property
    def n_exits(self) -> int:
        return len(self.exit_heads) + 1

    @property
    def n_features(self) -> int:
        return self.blocks[0].dense.in_dim

    @property
    def n_classes(self) -> int:
        return self.final_classifier.out_dim

    @property
    def penult_dim(self) -> int:
        return self.final_classifier.layers[-1].in_dim

    def exit_networks(self) -> list[MLP]:
        return [*self.exit_heads, self.final_classifier]

    def train(self) -> "MultiExitModel":
        self.training = True
        return self

    def eval(self) -> "MultiExitModel":
        self.training = False
        return self

    def _check_input(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.n_features:
            raise InputShapeError(
                f"expected input of shape (n, {self.n_features}), got {x.shape}"
            )
        return x

    def logits(self, x, cache=False, update_stats=True):
        """Logits and penultimate features for every exit, in depth order."""
        x = self._check_input(x)
        heads = dict(zip(self.exit_attach_indices, self.exit_heads))
        logits, penult = [], []
        h = x
        for i, block in enumerate(self.blocks):
            h = block.forward(h, self.training, cache, update_stats)
            if i in heads:
                out, feat = heads[i].forward(h, cache)
                logits.append(out)
                penult.append(feat)
        out, feat = self.final_classifier.forward(h, cache)
        logits.append(out)
        penult.append(feat)
        return logits, penult

    def backward(self, grad_logits: list[np.ndarray]) -> np.ndarray:
        heads = dict(zip(self.exit_attach_indices, zip(self.exit_heads, grad_logits)))
        grad = self.final_classifier.backward(grad_logits[-1])
        for i in reversed(range(len(self.blocks))):
            if i in heads:
                head, g = heads[i]
                grad = grad + head.backward(g)
            grad = self.blocks[i].backward(grad)
        return grad

    def layers(self) -> list:
        out = []
        for block in self.blocks:
            out.extend(block.layers())
        for net in self.exit_networks():
            out.extend(net.layers)
        return out

    def params(self) -> list[np.ndarray]:
        return [p for layer in self.layers() for p in layer.params()]

    def grads(self) -> list[np.ndarray]:
        return [g for layer in self.layers() for g in layer.grads()]

    def zero_grad(self) -> None:
        for g in self.grads():
            g.fill(0.0)

    def loss_and_grads(self, x, y, update_stats=True) -> float:
        """Mean over the batch of the summed per-exit cross-entropy.

        Gradients are left in each layer's ``grad_*`` buffers.
        """
        self.zero_grad()
        logits, _ = self.logits(x, cache=True, update_stats=update_stats)
        n = len(y)
        loss = 0.0
        grads = []
        for out in logits:
            p = softmax(out)
            loss += cross_entropy(p, y).mean()
            g = p.copy()
            g[np.arange(n), y] -= 1.0
            grads.append(g / n)
        self.backward(grads)
        return float(loss)

    def forward_all(self, x, y=None) -> BatchForward:
        logits, penult = self.logits(x, update_stats=False)
        probs = np.stack([softmax(l) for l in logits])
        loss = None
        if y is not None:
            y = np.asarray(y)
            loss = np.stack([cross_entropy(p, y) for p in probs])
        return BatchForward(probs, np.stack(penult), taken_exits(probs, self.tau), loss)

    def predict_early(self, x, preact=None):
        """Early-exit inference over a batch.

        Samples stop at the first exit whose top-class probability reaches
        ``tau``; deeper layers are evaluated only for the samples still
        running.  Returns (probs, labels, exit indices).  ``preact`` may carry
        the first dense layer's output for ``x`` when the caller has it.
        """
        if preact is None:
            x = self._check_input(x)
            n = x.shape[0]
        else:
            n = preact.shape[0]
        probs = np.zeros((n, self.n_classes))
        exits = np.full(n, self.n_exits - 1)
        active = np.arange(n)
        heads = dict(zip(self.exit_attach_indices, range(len(self.exit_heads))))
        h = x
        for i, block in enumerate(self.blocks):
            if not len(active):
                break
            if i == 0 and preact is not None:
                h = block.forward(None, self.training, update_stats=False, preact=preact)
            else:
                h = block.forward(h, self.training, update_stats=False)
            if i in heads:
                e = heads[i]
                p = softmax(self.exit_heads[e].forward(h)[0])
                stop = p.max(axis=1) >= self.tau
                probs[active[stop]] = p[stop]
                exits[active[stop]] = e
                active, h = active[~stop], h[~stop]
        if len(active):
            probs[active] = softmax(self.final_classifier.forward(h)[0])
        return probs, probs.argmax(axis=1), exits

    def ops_per_exit(self) -> np.ndarray:
        return np.array([count_ops(self, e) for e in range(self.n_exits)])

    def descriptor(self) -> dict:
        return {
            "n_features": self.n_features,
            "n_classes": self.n_classes,
            "n_exits": self.n_exits,
            "n_blocks": len(self.blocks),
            "width": self.blocks[0].dense.out_dim,
            "head_width": self.penult_dim,
            "exit_attach_indices": self.exit_attach_indices,
        }


def forward_full(model: MultiExitModel, x, y=None) -> ForwardRecord:
    """All-exit forward pass for a single sample."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise InputShapeError("forward_full takes a single feature vector")
    out = model.forward_all(x[None, :], None if y is None else [int(y)])
    e = int(out.taken_exit[0])
    return ForwardRecord(
        per_exit_probs=[p[0] for p in out.probs],
        per_exit_loss=None if out.loss is None else [float(l[0]) for l in out.loss],
        penultimate_feature=out.penult[e, 0],
        taken_exit=e,
        predicted_label=int(out.probs[e, 0].argmax()),
    )


def predict_early(model: MultiExitModel, x):
    """Single-sample early-exit prediction: (probs, label, exit index)."""
    x = np.asarray(x, dtype=np.float64)
    probs, labels, exits = model.predict_early(x[None, :] if x.ndim == 1 else x)
    if x.ndim == 1:
        return probs[0], int(labels[0]), int(exits[0])
    return probs, labels, exits


def last_layer_gradient(model: MultiExitModel, x, y, exit_index) -> np.ndarray:
    """Gradient of the cross-entropy at an exit w.r.t. that exit's last dense layer.

    Flattened as [weights (row-major, n_classes x penult_dim), bias].  ``x`` may
    be one sample or a batch; ``exit_index`` may be an int or one index per
    sample.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    y = np.atleast_1d(np.asarray(y))
    idx = np.broadcast_to(np.asarray(exit_index), (len(x),))
    if np.any(idx < 0) or np.any(idx >= model.n_exits):
        raise IndexError(f"exit index out of range [0, {model.n_exits})")
    out = model.forward_all(x)
    rows = np.arange(len(x))
    err = out.probs[idx, rows].copy()
    err[rows, y] -= 1.0
    feat = out.penult[idx, rows]
    grad = np.concatenate([(err[:, :, None] * feat[:, None, :]).reshape(len(x), -1), err], axis=1)
    return grad[0] if single else grad


def count_ops(model: MultiExitModel, exit_index: int) -> int:
    """Operations executed by a sample leaving at ``exit_index``.

    Dense: 2*in*out + out; norm: 4 per element; ReLU: 1 per element; softmax
    is not counted.  Earlier heads are included because they run before the
    sample is allowed to continue.
    """
    if not 0 <= exit_index < model.n_exits:
        raise IndexError(f"exit index out of range [0, {model.n_exits})")
    last_block = (
        model.exit_attach_indices[exit_index]
        if exit_index < len(model.exit_heads)
        else len(model.blocks) - 1
    )
    ops = sum(b.n_ops() for b in model.blocks[: last_block + 1])
    ops += sum(h.n_ops() for h in model.exit_heads[: exit_index + 1])
    if exit_index == model.n_exits - 1:
        ops += model.final_classifier.n_ops()
    return int(ops)


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 64
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ValueError("epochs, batch_size and learning_rate must be positive")


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1**self.t
        c2 = 1 - b2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def train_joint(model: MultiExitModel, x, y, config: TrainConfig) -> tuple[MultiExitModel, list[float]]:
    """Train all exits jointly on the unweighted sum of their losses.

    Returns the model (trained in place, left in eval mode) and the mean
    training loss per epoch.
    """
    x = model._check_input(x)
    y = np.asarray(y, dtype=np.int64)
    if y.min() < 0 or y.max() >= model.n_classes:
        raise ValueError("labels outside [0, n_classes)")
    rng = np.random.default_rng(config.seed)
    opt = Adam(model.params(), config.learning_rate, config.beta1, config.beta2, config.eps)
    model.train()
    log = []
    n = len(y)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            loss = model.loss_and_grads(x[idx], y[idx])
            if not np.isfinite(loss):
                model.eval()
                raise TrainingDivergedError(epoch)
            opt.step(model.grads())
            total += loss * len(idx)
        log.append(total / n)
        logger.debug("epoch %d loss %.4f", epoch, log[-1])
    model.eval()
    return model, log


def accuracy(model: MultiExitModel, x, y) -> float:
    return float(np.mean(model.predict_early(x)[1] == np.asarray(y)))


@dataclass
class ThresholdChoice:
    tau: float
    accuracy: float
    flagged: bool = False
    accuracies: dict = field(default_factory=dict)


def select_threshold(model, x, y, reference_accuracy, slack=0.005) -> ThresholdChoice:
    """Smallest tau on the 0.05 grid keeping holdout accuracy within ``slack``
    of the vanilla reference.  Falls back to 1.0 (flagged) if none does."""
    y = np.asarray(y)
    if len(y) == 0:
        raise ValueError("empty holdout set")
    out = model.forward_all(x)
    accs = {}
    for tau in TAU_GRID:
        exits = taken_exits(out.probs, tau)
        pred = out.probs[exits, np.arange(len(y))].argmax(axis=1)
        accs[float(tau)] = float(np.mean(pred == y))
    for tau, acc in accs.items():
        if acc >= reference_accuracy - slack:
            return ThresholdChoice(tau, acc, False, accs)
    return ThresholdChoice(1.0, accs[1.0], True, accs)


def save_model(model: MultiExitModel, path) -> None:
    arrays = {}
    for i, layer in enumerate(model.layers()):
        if isinstance(layer, DenseLayer):
            arrays[f"l{i}_weights"] = layer.weights
            arrays[f"l{i}_bias"] = layer.bias
        else:
            arrays[f"l{i}_gamma"] = layer.gamma
            arrays[f"l{i}_beta"] = layer.beta
            arrays[f"l{i}_running_mean"] = layer.running_mean
            arrays[f"l{i}_running_var"] = layer.running_var
    meta = dict(model.descriptor(), tau=model.tau, ops_per_exit=model.ops_per_exit().tolist())
    meta["final_dims"] = [l.out_dim for l in model.final_classifier.layers]
    meta["norm"] = [model.blocks[0].norm.epsilon, model.blocks[0].norm.momentum]
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_model(path) -> MultiExitModel:
    with np.load(Path(path)) as data:
        meta = json.loads(data["meta"].tobytes().decode())
        arrays = {k: data[k] for k in data.files}
    rng = np.random.default_rng(0)
    model = MultiExitModel.build(
        meta["n_features"], meta["n_classes"], meta["n_exits"], meta["width"],
        meta["n_blocks"], meta["head_width"], meta["tau"],
    )
    if model.exit_attach_indices != meta["exit_attach_indices"]:
        heads = [MLP.init([meta["width"], meta["head_width"], meta["n_classes"]], rng)
                 for _ in meta["exit_attach_indices"]]
        model = MultiExitModel(model.blocks, heads, meta["exit_attach_indices"],
                               model.final_classifier, meta["tau"])
    eps, momentum = meta["norm"]
    for i, layer in enumerate(model.layers()):
        if isinstance(layer, DenseLayer):
            layer.weights[...] = arrays[f"l{i}_weights"]
            layer.bias[...] = arrays[f"l{i}_bias"]
        else:
            layer.epsilon, layer.momentum = eps, momentum
            for name in ("gamma", "beta", "running_mean", "running_var"):
                getattr(layer, name)[...] = arrays[f"l{i}_{name}"]
    return model
