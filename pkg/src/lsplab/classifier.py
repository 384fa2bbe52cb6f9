"""Small NHWC convolutional classifier with hand-written backprop.

Gradients are available with respect to the parameters (training) and to the
input image (trigger reconstruction). Activations can be read, and overridden,
at every post-nonlinearity "tap" so the defenses can probe single neurons.
"""
from __future__ import annotations

import copy
import json
import logging
import math
import os
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import kernels
from .core import LabeledDataset, check_seed, make_rng

log = logging.getLogger(__name__)

DEFAULT_ARCH = (
    {"type": "conv", "filters": 8, "kernel": 3},
    {"type": "relu"},
    {"type": "maxpool"},
    {"type": "conv", "filters": 16, "kernel": 3},
    {"type": "relu"},
    {"type": "maxpool"},
    {"type": "flatten"},
    {"type": "dense", "units": 64},
    {"type": "relu"},
    {"type": "dense"},  # units default to num_classes
)

_PARAM_OPS = ("conv", "dense")


class LayerIndexError(IndexError, ValueError):
    pass


class TrainingError(RuntimeError):
    pass


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def soft_cross_entropy(predicted_logits, label):
    """``-sum_i label_i * log softmax(logits)_i``; per-row for 2-D input."""
    logits = np.asarray(predicted_logits, dtype=np.float64)
    label = np.asarray(label, dtype=np.float64)
    if logits.shape != label.shape:
        raise ValueError(f"logits {logits.shape} and label {label.shape} differ in shape")
    lsm = log_softmax(logits)
    # 0 * -inf would be nan; zero-weight classes contribute nothing
    ce = -np.sum(np.where(label > 0, label * lsm, 0.0), axis=-1)
    return float(ce) if ce.ndim == 0 else ce


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 8
    batch_size: int = 64
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    seed: int = 0
    momentum: float = 0.9

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.optimizer not in ("adam", "sgd_momentum"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        check_seed(self.seed)


class Classifier:
    """Sequential network over (N, H, W, C) float inputs producing K logits."""

    def __init__(self, input_shape, num_classes: int, arch=DEFAULT_ARCH, params=None, seed=0):
        self.input_shape = tuple(int(s) for s in input_shape)
        self.num_classes = int(num_classes)
        self.arch = [dict(op) for op in arch]
        if self.arch[-1]["type"] == "dense" and self.arch[-1].get("units") is None:
            self.arch[-1]["units"] = self.num_classes
        self._shapes = self._infer_shapes()
        if self._shapes[-1] != (self.num_classes,):
            raise ValueError(f"architecture ends in shape {self._shapes[-1]}, expected ({self.num_classes},)")
        self.taps = [i for i, op in enumerate(self.arch) if op["type"] == "relu"]
        if self.arch[-1]["type"] != "relu":
            self.taps.append(len(self.arch) - 1)
        self.params = params if params is not None else self._init_params(seed)
        self.history: list[float] = []

    # -- construction -----------------------------------------------------
    def _infer_shapes(self):
        shapes = []
        shape = self.input_shape
        for op in self.arch:
            t = op["type"]
            if t == "conv":
                shape = (shape[0], shape[1], op["filters"])
            elif t == "maxpool":
                shape = (shape[0] // 2, shape[1] // 2, shape[2])
            elif t == "flatten":
                shape = (int(np.prod(shape)),)
            elif t == "dense":
                shape = (op["units"],)
            elif t != "relu":
                raise ValueError(f"unknown layer type {t!r}")
            shapes.append(shape)
        return shapes

    def _init_params(self, seed):
        rng = make_rng(seed, 3)
        params = []
        shape = self.input_shape
        for op, out_shape in zip(self.arch, self._shapes):
            if op["type"] == "conv":
                k = op["kernel"]
                fan_in = k * k * shape[-1]
                w = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(k, k, shape[-1], op["filters"]))
                params.append([w, np.zeros(op["filters"])])
            elif op["type"] == "dense":
                w = rng.normal(0.0, math.sqrt(2.0 / shape[0]), size=(shape[0], op["units"]))
                params.append([w, np.zeros(op["units"])])
            else:
                params.append(None)
            shape = out_shape
        return params

    def copy(self) -> "Classifier":
        return copy.deepcopy(self)

    @property
    def param_count(self) -> int:
        return sum(w.size + b.size for p in self.params if p is not None for w, b in [p])

    def layer_sizes(self):
        return [int(np.prod(self._shapes[t])) for t in self.taps]

    # -- forward / backward -------------------------------------------------
    def _batch(self, x):
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 3
        if single:
            x = x[None]
        if x.shape[1:] != self.input_shape:
            raise ValueError(f"input shape {x.shape[1:]} does not match model input {self.input_shape}")
        return x, single

    def _run(self, x, start, stop, cache):
        for i in range(start, stop):
            op, p = self.arch[i], self.params[i]
            t = op["type"]
            if cache is not None:
                cache.append(x)
            if t == "conv":
                x = kernels.conv2d_forward(x, p[0], p[1], op["kernel"] // 2)
            elif t == "relu":
                x = np.maximum(x, 0.0)
            elif t == "maxpool":
                x, idx = kernels.maxpool2_forward(x)
                if cache is not None:
                    cache[-1] = (cache[-1], idx)
            elif t == "flatten":
                x = x.reshape(x.shape[0], -1)
            else:
                x = x @ p[0] + p[1]
        return x

    def forward(self, x, cache=None):
        """Logits for an image (K,) or a batch (N, K)."""
        xb, single = self._batch(x)
        out = self._run(xb, 0, len(self.arch), cache)
        return out[0] if single and cache is None else out

    def forward_taps(self, x):
        """Logits plus the activation at every tap, for a batch."""
        xb, _ = self._batch(x)
        acts, start = [], 0
        for t in self.taps:
            xb = self._run(xb, start, t + 1, None)
            acts.append(xb)
            start = t + 1
        return self._run(xb, start, len(self.arch), None), acts

    def forward_from(self, layer_index: int, activation: np.ndarray) -> np.ndarray:
        """Continue the forward pass from a (possibly edited) tap activation."""
        t = self._tap(layer_index)
        a = np.asarray(activation, dtype=np.float64).reshape((-1,) + self._shapes[t])
        return self._run(a, t + 1, len(self.arch), None)

    def _tap(self, layer_index):
        if not -len(self.taps) <= layer_index < len(self.taps):
            raise LayerIndexError(f"layer_index {layer_index} out of range (model has {len(self.taps)} layers)")
        return self.taps[layer_index]

    def backward(self, cache, tap_grads: dict, need_params=True, need_input=True):
        """Backpropagate gradients injected at taps (``{layer_index: dL/d activation}``).

        ``cache`` comes from ``forward(x, cache=[])``. Returns (dx, param_grads).
        """
        inject = {self._tap(k): v for k, v in tap_grads.items()}
        g = None
        grads = [None] * len(self.arch)
        for i in range(len(self.arch) - 1, -1, -1):
            if i in inject:
                extra = np.asarray(inject[i], dtype=np.float64).reshape((-1,) + self._shapes[i])
                g = extra if g is None else g + extra
            if g is None:
                continue
            op, p, inp = self.arch[i], self.params[i], cache[i]
            t = op["type"]
            want_dx = need_input or i > 0
            if t == "conv":
                dx, dw, db = kernels.conv2d_backward(inp, p[0], g, op["kernel"] // 2,
                                                     need_dx=want_dx, need_dw=need_params)
                grads[i] = [dw, db] if need_params else None
                g = dx
            elif t == "relu":
                g = g * (inp > 0)
            elif t == "maxpool":
                src, idx = inp
                g = kernels.maxpool2_backward(g, idx, src.shape)
            elif t == "flatten":
                g = g.reshape(inp.shape)
            else:
                if need_params:
                    grads[i] = [inp.T @ g, g.sum(axis=0)]
                g = g @ p[0].T if want_dx else None
        return g, grads

    def loss_and_grads(self, x, labels, need_input=False):
        """Mean soft cross-entropy over a batch, with parameter (and optionally input) gradients."""
        cache = []
        logits = self.forward(x, cache)
        labels = np.asarray(labels, dtype=np.float64)
        n = logits.shape[0]
        loss = float(np.mean(soft_cross_entropy(logits, labels)))
        dlogits = (softmax(logits) * labels.sum(axis=1, keepdims=True) - labels) / n
        dx, grads = self.backward(cache, {-1: dlogits}, need_params=True, need_input=need_input)
        return loss, grads, dx

    def predict(self, images, batch_size=512) -> np.ndarray:
        images = np.asarray(images)
        out = [self.forward(images[i:i + batch_size].astype(np.float64))
               for i in range(0, images.shape[0], batch_size)]
        return np.concatenate(out) if out else np.zeros((0, self.num_classes))


# ---------------------------------------------------------------------------
# Training

def _round_f32(params):
    return [None if p is None else [w.astype(np.float32).astype(np.float64) for w in p] for p in params]


def train(model: Classifier, train_set: LabeledDataset, config: TrainConfig) -> Classifier:
    """Minibatch training on (soft) labels; returns a new model with float32-exact weights."""
    if len(train_set) == 0:
        raise ValueError("empty training set")
    if train_set.image_shape != model.input_shape:
        raise ValueError(f"dataset images {train_set.image_shape} do not match model input {model.input_shape}")
    if train_set.num_classes != model.num_classes:
        raise ValueError("dataset and model disagree on the number of classes")
    model = model.copy()
    rng = make_rng(config.seed, 4)
    flat = [a for p in model.params if p is not None for a in p]
    m1 = [np.zeros_like(a) for a in flat]
    m2 = [np.zeros_like(a) for a in flat]
    b1, b2, eps = 0.9, 0.999, 1e-8
    step = 0
    n = len(train_set)
    images, labels = train_set.images, train_set.labels
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for s in range(0, n, config.batch_size):
            idx = order[s:s + config.batch_size]
            loss, grads, _ = model.loss_and_grads(images[idx].astype(np.float64), labels[idx])
            if not math.isfinite(loss):
                raise TrainingError(f"loss became non-finite in epoch {epoch}")
            total += loss * len(idx)
            step += 1
            gflat = [a for g in grads if g is not None for a in g]
            for j, (p, g) in enumerate(zip(flat, gflat)):
                if config.optimizer == "adam":
                    m1[j] = b1 * m1[j] + (1 - b1) * g
                    m2[j] = b2 * m2[j] + (1 - b2) * g * g
                    mhat = m1[j] / (1 - b1 ** step)
                    vhat = m2[j] / (1 - b2 ** step)
                    p -= config.learning_rate * mhat / (np.sqrt(vhat) + eps)
                else:
                    m1[j] = config.momentum * m1[j] + g
                    p -= config.learning_rate * m1[j]
        model.history.append(total / n)
        log.debug("epoch %d loss %.4f", epoch, total / n)
    model.params = _round_f32(model.params)
    return model


# ---------------------------------------------------------------------------
# Input-space gradients and activations

def input_gradient(model: Classifier, loss_fn: str, x, aux) -> np.ndarray:
    """Gradient of a scalar loss (summed over a batch) with respect to the input.

    ``loss_fn`` is one of
      ``"ce"``         soft cross-entropy, ``aux`` a label vector or class index;
      ``"logit"``      the logit of class ``aux``;
      ``"margin"``     ``-logit[aux] + sum of the other logits``;
      ``"activation"`` activation of neuron ``aux = (layer_index, neuron)``.
    """
    xb, single = model._batch(x)
    cache = []
    logits = model.forward(xb, cache)
    n, k = logits.shape
    if loss_fn == "ce":
        label = np.asarray(aux, dtype=np.float64)
        if label.ndim == 0:
            label = np.eye(k)[int(label)]
        label = np.broadcast_to(label, (n, k))
        grads = {-1: softmax(logits) - label}
    elif loss_fn == "logit":
        g = np.zeros((n, k))
        g[:, int(aux)] = 1.0
        grads = {-1: g}
    elif loss_fn == "margin":
        g = np.ones((n, k))
        g[:, int(aux)] = -1.0
        grads = {-1: g}
    elif loss_fn == "activation":
        layer, neuron = aux
        size = model.layer_sizes()[layer]
        g = np.zeros((n, size))
        g[:, int(neuron)] = 1.0
        grads = {layer: g}
    else:
        raise ValueError(f"unknown loss_fn {loss_fn!r}")
    dx, _ = model.backward(cache, grads, need_params=False, need_input=True)
    return dx[0] if single else dx


def activations(model: Classifier, x, layer_index: int) -> np.ndarray:
    """Post-nonlinearity activations of a tap, flattened (the last tap is the logits)."""
    t = model._tap(layer_index)
    xb, single = model._batch(x)
    a = model._run(xb, 0, t + 1, None).reshape(xb.shape[0], -1)
    return a[0] if single else a


# ---------------------------------------------------------------------------
# Checkpoints: JSON descriptor + raw little-endian float32 arrays

def save_model(model: Classifier, directory, metadata: dict | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = []
    for i, p in enumerate(model.params):
        if p is None:
            continue
        for name, a in zip(("W", "b"), p):
            fname = f"layer{i}_{name}.f32"
            a.astype("<f4").tofile(directory / fname)
            files.append({"layer": i, "name": name, "file": fname, "shape": list(a.shape), "dtype": "<f4"})
    (directory / "architecture.json").write_text(json.dumps({
        "input_shape": list(model.input_shape), "num_classes": model.num_classes,
        "arch": model.arch, "arrays": files}, indent=2))
    manifest = dict(metadata or {})
    manifest["history"] = model.history
    tmp = directory / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=2, default=_json_default))
    os.replace(tmp, directory / "manifest.json")
    return directory


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if hasattr(o, "__dataclass_fields__"):
        return asdict(o)
    raise TypeError(f"cannot serialize {type(o).__name__}")


def load_model(directory) -> Classifier:
    directory = Path(directory)
    desc = json.loads((directory / "architecture.json").read_text())
    model = Classifier(desc["input_shape"], desc["num_classes"], desc["arch"], seed=0)
    params = [None] * len(model.arch)
    for entry in desc["arrays"]:
        a = np.fromfile(directory / entry["file"], dtype=entry["dtype"]).astype(np.float64)
        a = a.reshape(entry["shape"])
        if params[entry["layer"]] is None:
            params[entry["layer"]] = [None, None]
        params[entry["layer"]][0 if entry["name"] == "W" else 1] = a
    model.params = params
    manifest_path = directory / "manifest.json"
    if manifest_path.exists():
        model.history = json.loads(manifest_path.read_text()).get("history", [])
    return model


def load_model_manifest(directory) -> dict:
    return json.loads((Path(directory) / "manifest.json").read_text())
