"""Branched multilayer perceptron predicting refinement decisions.

A shared ReLU trunk feeds five branches: branch 0 emits the 4 h-class logits,
branches 1..4 emit 20 logits each, read as two 10-way groups (son orders in x
and y).  Everything, including backpropagation and Adam, is plain numpy.
"""
import csv
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .dataset import ACTIVE_SONS, as_arrays, decode_output, element_features, normalize
from .mesh import MAX_ORDER

MAGIC = "hp-oracle-mlp v1"
N_FEATURES = 8
N_H = 4
N_ORDERS = MAX_ORDER + 1
N_GROUPS = 1 + 4 * 2
HISTORY_HEADER = ["epoch", "train_loss", "val_loss", "acc_h", "acc_p1", "acc_p2", "acc_p3", "acc_p4"]


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class Architecture:
    n_in: int = N_FEATURES
    trunk: tuple = (64, 64)
    branch: tuple = (64, 32, 16)
    dropout: float = 0.2

    def __post_init__(self):
        if self.n_in != N_FEATURES:
            raise ModelError(f"input width must be {N_FEATURES}, got {self.n_in}")
        if not 0 <= self.dropout < 1:
            raise ModelError("dropout must lie in [0, 1)")
        if any(w < 1 for w in self.trunk + self.branch):
            raise ModelError("layer widths must be positive")

    def layer_shapes(self):
        """``(name, fan_in, fan_out)`` for every dense layer, in file order."""
        out, prev = [], self.n_in
        for i, w in enumerate(self.trunk):
            out.append((f"trunk.{i}", prev, w))
            prev = w
        for b in range(5):
            p = prev
            for i, w in enumerate(self.branch):
                out.append((f"branch{b}.{i}", p, w))
                p = w
            out.append((f"branch{b}.head", p, N_H if b == 0 else 2 * N_ORDERS))
        return out


@dataclass
class Model:
    arch: Architecture
    params: dict  # name -> array; "<layer>.W" (fan_in, fan_out) and "<layer>.b"
    seed: int = 0
    mean: np.ndarray = field(default_factory=lambda: np.zeros(N_FEATURES))
    scale: np.ndarray = field(default_factory=lambda: np.ones(N_FEATURES))

    def copy(self):
        return Model(self.arch, {k: v.copy() for k, v in self.params.items()}, self.seed,
                     self.mean.copy(), self.scale.copy())


def init_model(arch=None, seed=0, zero=False):
    """He-uniform weights keyed to fan-in, zero biases; ``zero`` gives all-zero weights."""
    arch = arch or Architecture()
    rng = np.random.default_rng(seed)
    params = {}
    for name, fi, fo in arch.layer_shapes():
        lim = math.sqrt(6.0 / fi)
        params[name + ".W"] = np.zeros((fi, fo)) if zero else rng.uniform(-lim, lim, size=(fi, fo))
        params[name + ".b"] = np.zeros(fo)
    return Model(arch, params, seed)


def set_input_scaling(model, X):
    """Standardize inputs with training statistics (kept in the model file)."""
    model.mean = X.mean(axis=0)
    s = X.std(axis=0)
    model.scale = np.where(s > 1e-12, s, 1.0)
    return model


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _dense_stack(model, prefix, names, h, training, rng, cache):
    p = model.params
    for i in names:
        z = h @ p[f"{prefix}.{i}.W"] + p[f"{prefix}.{i}.b"]
        a = np.maximum(z, 0.0)
        mask = None
        if training and model.arch.dropout > 0:
            keep = 1.0 - model.arch.dropout
            mask = (rng.random(a.shape) < keep) / keep
            a = a * mask
        cache.append((f"{prefix}.{i}", h, z, mask))
        h = a
    return h


def _forward(model, X, training=False, rng=None):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[1] != model.arch.n_in:
        raise ModelError(f"expected {model.arch.n_in} features, got {X.shape[1]}")
    if not np.all(np.isfinite(X)):
        raise ValueError("non-finite input features")
    if training and rng is None:
        rng = np.random.default_rng(model.seed)
    cache = []
    h = (X - model.mean) / model.scale
    t = _dense_stack(model, "trunk", range(len(model.arch.trunk)), h, training, rng, cache)
    groups, heads = [], []
    for b in range(5):
        hb = _dense_stack(model, f"branch{b}", range(len(model.arch.branch)), t, training, rng, cache)
        z = hb @ model.params[f"branch{b}.head.W"] + model.params[f"branch{b}.head.b"]
        heads.append((hb, z))
        if b == 0:
            groups.append(_softmax(z))
        else:
            groups += [_softmax(z[:, :N_ORDERS]), _softmax(z[:, N_ORDERS:])]
    return groups, (cache, heads, t)


def forward(model, features, training=False, rng=None):
    """List of 9 probability arrays: h-class (n, 4), then x/y groups (n, 10) for sons 1..4."""
    return _forward(model, features, training, rng)[0]


# -- loss -------------------------------------------------------------------

def _check_labels(h, sons):
    h = np.asarray(h, dtype=int)
    sons = np.asarray(sons, dtype=int)
    if np.any((h < 0) | (h >= N_H)):
        raise ValueError("h-class label outside 0..3")
    if np.any((sons < 0) | (sons >= N_ORDERS)):
        raise ValueError(f"son order label outside 0..{N_ORDERS - 1}")
    return h, sons


def son_mask(h):
    """``(n, 4)`` boolean: son i is active for the labelled h-class."""
    counts = np.array([ACTIVE_SONS[c] for c in range(N_H)])[h]
    return np.arange(4)[None, :] < counts[:, None]


def class_weights(h, power=1.0):
    """Weights ``count_c ** -power`` scaled to mean one over ``h`` (power 1 is "balanced")."""
    counts = np.bincount(h, minlength=N_H).astype(float)
    present = counts > 0
    w = np.zeros(N_H)
    w[present] = counts[present] ** -power
    return w * len(h) / np.sum(w[h])


def loss_and_gradient(model, batch, weights=None, training=False, rng=None):
    """Mean over samples of the summed group cross-entropies, and its gradient.

    ``batch`` is ``(X, h, sons)``; inactive sons contribute nothing and
    ``weights`` (per h-class) scale the h-class term.
    """
    X, h, sons = batch
    h, sons = _check_labels(h, sons)
    n = len(h)
    groups, (cache, heads, t) = _forward(model, X, training, rng)
    active = son_mask(h)
    wh = np.ones(n) if weights is None else np.asarray(weights)[h]
    tiny = 1e-300
    rows = np.arange(n)
    loss = float(np.sum(wh * -np.log(groups[0][rows, h] + tiny)))
    dz = [(groups[0] - np.eye(N_H)[h]) * wh[:, None]]
    for s in range(4):
        m = active[:, s].astype(float)
        dzs = []
        for d in range(2):
            P = groups[1 + 2 * s + d]
            y = sons[:, s, d]
            loss += float(np.sum(m * -np.log(P[rows, y] + tiny)))
            dzs.append((P - np.eye(N_ORDERS)[y]) * m[:, None])
        dz.append(np.hstack(dzs))
    loss /= n
    grads = {}
    p = model.params
    dt = np.zeros_like(t)
    nb = len(model.arch.branch)
    nt = len(model.arch.trunk)
    for b in range(5):
        hb, _ = heads[b]
        g = dz[b] / n
        grads[f"branch{b}.head.W"] = hb.T @ g
        grads[f"branch{b}.head.b"] = g.sum(axis=0)
        da = g @ p[f"branch{b}.head.W"].T
        layers = cache[nt + b * nb: nt + (b + 1) * nb]
        dt += _backprop(layers, da, p, grads)
    _backprop(cache[:nt], dt, p, grads)
    return loss, grads


def _backprop(layers, da, p, grads):
    for name, h_in, z, mask in reversed(layers):
        if mask is not None:
            da = da * mask
        dzl = da * (z > 0)
        grads[name + ".W"] = h_in.T @ dzl
        grads[name + ".b"] = dzl.sum(axis=0)
        da = dzl @ p[name + ".W"].T
    return da


# -- Adam -------------------------------------------------------------------

BETA1, BETA2, EPS = 0.9, 0.999, 1e-8


def adam_init(model):
    return {"t": 0, "m": {k: np.zeros_like(v) for k, v in model.params.items()},
            "v": {k: np.zeros_like(v) for k, v in model.params.items()}}


def adam_step(model, grads, state, lr):
    """One bias-corrected Adam update in place; returns ``(model, state)``."""
    state["t"] += 1
    t = state["t"]
    c1, c2 = 1 - BETA1 ** t, 1 - BETA2 ** t
    for k, g in grads.items():
        if g.shape != model.params[k].shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {k}")
        m = state["m"][k] = BETA1 * state["m"][k] + (1 - BETA1) * g
        v = state["v"][k] = BETA2 * state["v"][k] + (1 - BETA2) * g * g
        model.params[k] -= lr * (m / c1) / (np.sqrt(v / c2) + EPS)
    return model, state


# -- training ---------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 200
    lr: float = 1e-3
    batch_size: int = 32
    val_fraction: float = 0.2
    lr_factor: float = 0.5
    lr_patience: int = 10
    stop_patience: int = 25
    class_weighting: bool = False
    seed: int = 0
    restore_best: bool = True

    def __post_init__(self):
        if not 0 < self.val_fraction < 1:
            raise ValueError("validation fraction must lie in (0, 1)")
        if self.lr_patience < 1 or self.stop_patience < 1:
            raise ValueError("patience values must be positive")
        if self.epochs < 0 or self.batch_size < 1 or not self.lr > 0:
            raise ValueError("epochs, batch size and learning rate must be positive")


def predict_labels(model, X):
    """Argmax h-class ``(n,)`` and raw argmax son orders ``(n, 4, 2)``."""
    g = forward(model, X)
    h = np.argmax(g[0], axis=1)
    sons = np.stack([np.stack([np.argmax(g[1 + 2 * s + d], axis=1) for d in range(2)], axis=1)
                     for s in range(4)], axis=1)
    return h, sons


def accuracies(model, X, h, sons):
    """h-class accuracy and, per son slot, agreement of the decoded decision.

    Slots the predicted h-class leaves inactive are read as ``(0, 0)``, so a
    son slot is right only if both its activity and its orders are.
    """
    if len(h) == 0:
        return [float("nan")] * 5
    ph, ps = predict_labels(model, X)
    ps = np.where(son_mask(ph)[:, :, None], ps, 0)
    return [float(np.mean(ph == h))] + [float(np.mean(np.all(ps[:, s] == sons[:, s], axis=1))) for s in range(4)]


def split_indices(n, val_fraction, rng):
    perm = rng.permutation(n)
    n_val = min(max(1, int(round(val_fraction * n))), n - 1)
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def train(model, records, config=None):
    """Mini-batch Adam with LR reduction on plateau and early stopping.

    Returns ``(model, history)``; the model carries the weights with the best
    validation loss.  ``history`` holds one dict per epoch run.
    """
    config = config or TrainConfig()
    X, h, sons = records if isinstance(records, tuple) else as_arrays(records)
    n = len(h)
    if n == 0:
        raise ValueError("empty dataset")
    if n < 2:
        raise ValueError("need at least two rows to split off a validation set")
    if n < 10:
        warnings.warn(f"training on only {n} rows", stacklevel=2)
    model = model.copy()
    if config.epochs == 0:
        return model, []
    rng = np.random.default_rng(config.seed)
    tr, va = split_indices(n, config.val_fraction, rng)
    set_input_scaling(model, X[tr])
    weights = class_weights(h[tr]) if config.class_weighting else None
    state = adam_init(model)
    lr = config.lr
    best, best_loss = model.copy(), math.inf
    since_best = since_cut = 0
    history = []
    for epoch in range(1, config.epochs + 1):
        order = tr[rng.permutation(len(tr))]
        for i in range(0, len(order), config.batch_size):
            b = order[i:i + config.batch_size]
            _, g = loss_and_gradient(model, (X[b], h[b], sons[b]), weights, training=True, rng=rng)
            adam_step(model, g, state, lr)
        train_loss, _ = loss_and_gradient(model, (X[tr], h[tr], sons[tr]), weights)
        # class weights shape the optimisation only; validation sees the data as it is
        val_loss, _ = loss_and_gradient(model, (X[va], h[va], sons[va]))
        acc = accuracies(model, X[va], h[va], sons[va])
        history.append(dict(zip(HISTORY_HEADER, [epoch, train_loss, val_loss] + acc)))
        if val_loss < best_loss:
            best, best_loss = model.copy(), val_loss
            since_best = since_cut = 0
        else:
            since_best += 1
            since_cut += 1
            if since_best >= config.stop_patience:
                break
            if since_cut >= config.lr_patience:
                lr *= config.lr_factor
                since_cut = 0
    return (best if config.restore_best else model), history


def write_history(history, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(HISTORY_HEADER)
        for row in history:
            w.writerow([row["epoch"]] + [f"{row[k]:.17g}" for k in HISTORY_HEADER[1:]])


# -- prediction -------------------------------------------------------------

def _to_refinement(h, sons, orders):
    k = ACTIVE_SONS[int(h)]
    fixed = []
    for a, b in sons[:k]:
        # a predicted 0 means "keep"; orders never drop below the parent's
        fixed.append((max(int(a), orders[0]), max(int(b), orders[1])))
    fixed += [(0, 0)] * (4 - k)
    return decode_output(int(h), tuple(fixed), tuple(orders))


def predict_refinements(model, elements):
    if not elements:
        return []
    X = normalize([element_features(K) for K in elements])
    ph, ps = predict_labels(model, X)
    return [_to_refinement(ph[i], ps[i], K.orders) for i, K in enumerate(elements)]


def predict_refinement(model, element):
    """Refinement for one active element, or None."""
    return predict_refinements(model, [element])[0]


# -- model file -------------------------------------------------------------

def _fmt(a):
    return " ".join(f"{v:.17g}" for v in np.asarray(a, dtype=float).ravel())


def save_model(model, path):
    a = model.arch
    with open(path, "w", newline="\n") as f:
        f.write(MAGIC + "\n")
        f.write(f"arch in={a.n_in} trunk={','.join(map(str, a.trunk))} branch={','.join(map(str, a.branch))} "
                f"heads={N_H},{2 * N_ORDERS} dropout={a.dropout!r} seed={model.seed}\n")
        f.write(f"input.mean 1 {a.n_in} {_fmt(model.mean)}\n")
        f.write(f"input.scale 1 {a.n_in} {_fmt(model.scale)}\n")
        for name, fi, fo in a.layer_shapes():
            f.write(f"{name}.W {fi} {fo} {_fmt(model.params[name + '.W'])}\n")
            f.write(f"{name}.b 1 {fo} {_fmt(model.params[name + '.b'])}\n")


def load_model(path):
    with open(path) as f:
        lines = f.read().splitlines()
    if not lines or lines[0] != MAGIC:
        raise ModelError(f"{path}: not a model file (expected header {MAGIC!r})")
    try:
        kv = dict(tok.split("=", 1) for tok in lines[1].split()[1:])
        widths = lambda s: tuple(int(v) for v in s.split(",") if v)  # noqa: E731
        if kv["heads"] != f"{N_H},{2 * N_ORDERS}":
            raise ModelError(f"{path}: head layout {kv['heads']} does not match the dataset schema")
        arch = Architecture(int(kv["in"]), widths(kv["trunk"]), widths(kv["branch"]), float(kv["dropout"]))
        seed = int(kv["seed"])
    except (IndexError, KeyError, ValueError) as exc:
        if isinstance(exc, ModelError):
            raise
        raise ModelError(f"{path}:2: bad architecture line ({exc})") from None
    tensors = {}
    for lineno, line in enumerate(lines[2:], 3):
        parts = line.split()
        if not parts:
            continue
        try:
            r, c = int(parts[1]), int(parts[2])
            vals = np.array([float(v) for v in parts[3:]])
        except (IndexError, ValueError) as exc:
            raise ModelError(f"{path}:{lineno}: {exc}") from None
        if vals.size != r * c or not np.all(np.isfinite(vals)):
            raise ModelError(f"{path}:{lineno}: tensor {parts[0]} has bad size or values")
        tensors[parts[0]] = vals.reshape(r, c)
    model = init_model(arch, seed, zero=True)
    for k in list(model.params) + ["input.mean", "input.scale"]:
        if k not in tensors:
            raise ModelError(f"{path}: missing tensor {k}")
    for k, v in model.params.items():
        t = tensors[k]
        model.params[k] = t if v.ndim == 2 else t.ravel()
        if model.params[k].shape != v.shape:
            raise ModelError(f"{path}: tensor {k} has shape {model.params[k].shape}, expected {v.shape}")
    model.mean = tensors["input.mean"].ravel()
    model.scale = tensors["input.scale"].ravel()
    if model.mean.size != arch.n_in or model.scale.size != arch.n_in:
        raise ModelError(f"{path}: input scaling does not match {arch.n_in} features")
    return model
