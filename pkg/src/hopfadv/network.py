"""3D convolutional phase classifier written directly in numpy.

Architecture (valid convolutions, channels-last, float64)::

    input   10x10x10x3
    conv    2x2x2, 3 -> 8,  stride 1, ReLU   -> 9x9x9x8
    conv    4x4x4, 8 -> 16, stride 1, ReLU   -> 6x6x6x16
    maxpool 2x2x2, stride 1                  -> 5x5x5x16
    flatten                                  -> 2000
    dense   2000 -> 512, ReLU
    dense   512 -> 3, softmax

Class index ``c`` corresponds to ``PhaseLabel(c)``: 0 <-> chi=0,
1 <-> chi=1, 2 <-> chi=-2.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeMismatch
from .hopf import BlochField, LabeledSample, stack_fields

log = logging.getLogger(__name__)

INPUT_SHAPE = (10, 10, 10, 3)
ARCH = "hopf-cnn-v1"
PARAM_SHAPES = {
    "conv1_w": (2, 2, 2, 3, 8),
    "conv1_b": (8,),
    "conv2_w": (4, 4, 4, 8, 16),
    "conv2_b": (16,),
    "dense1_w": (2000, 512),
    "dense1_b": (512,),
    "dense2_w": (512, 3),
    "dense2_b": (3,),
}
PARAM_NAMES = tuple(PARAM_SHAPES)


@dataclass
class CnnModel:
    """Weights of the fixed architecture. ``params`` maps names to arrays."""

    params: dict[str, np.ndarray]

    def __post_init__(self):
        for name, shape in PARAM_SHAPES.items():
            if name not in self.params:
                raise ValueError(f"missing parameter {name}")
            arr = np.asarray(self.params[name], dtype=np.float64)
            if arr.shape != shape:
                raise ShapeMismatch(f"{name} has shape {arr.shape}, expected {shape}")
            self.params[name] = arr
        extra = set(self.params) - set(PARAM_SHAPES)
        if extra:
            raise ValueError(f"unknown parameters {sorted(extra)}")

    @classmethod
    def zeros(cls) -> "CnnModel":
        return cls({k: np.zeros(s) for k, s in PARAM_SHAPES.items()})

    @classmethod
    def initialize(cls, seed: int = 0) -> "CnnModel":
        """Glorot-uniform weights, zero biases."""
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in PARAM_SHAPES.items():
            if name.endswith("_b"):
                params[name] = np.zeros(shape)
                continue
            receptive = int(np.prod(shape[:-2])) if len(shape) > 2 else 1
            fan_in, fan_out = receptive * shape[-2], receptive * shape[-1]
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            params[name] = rng.uniform(-limit, limit, size=shape)
        return cls(params)

    def copy(self) -> "CnnModel":
        return CnnModel({k: v.copy() for k, v in self.params.items()})

    def num_parameters(self) -> int:
        return sum(v.size for v in self.params.values())

    def predict(self, x) -> np.ndarray:
        return forward_batch(self, _as_batch(x))[0]


def _as_batch(x) -> np.ndarray:
    if isinstance(x, BlochField):
        x = x.data
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 4:
        x = x[None]
    if x.shape[1:] != INPUT_SHAPE:
        raise ShapeMismatch(f"classifier expects fields of shape {INPUT_SHAPE}, got {x.shape[1:]}")
    return x


def _patches(x: np.ndarray, k: int) -> np.ndarray:
    """im2col: ``(B, D, D, D, C)`` -> ``(B, D-k+1, ..., k, k, k, C)`` contiguous."""
    win = sliding_window_view(x, (k, k, k), axis=(1, 2, 3))
    # window axes land after the channel axis; move channels last
    return np.ascontiguousarray(win.transpose(0, 1, 2, 3, 5, 6, 7, 4))


def _conv(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    k = w.shape[0]
    cols = _patches(x, k)
    out_shape = cols.shape[:4]
    out = cols.reshape(-1, w[..., 0].size) @ w.reshape(-1, w.shape[-1])
    return out.reshape(out_shape + (w.shape[-1],)) + b, cols


def _conv_backward(dout, cols, w, in_shape, need_input: bool = True):
    k = w.shape[0]
    cout = w.shape[-1]
    d2 = dout.reshape(-1, cout)
    dw = (cols.reshape(-1, w[..., 0].size).T @ d2).reshape(w.shape)
    db = d2.sum(axis=0)
    if not need_input:
        return dw, db, None
    dcols = (d2 @ w.reshape(-1, cout).T).reshape(cols.shape)
    dx = np.zeros(in_shape)
    o = dout.shape[1]
    for i in range(k):
        for j in range(k):
            for l in range(k):
                dx[:, i : i + o, j : j + o, l : l + o, :] += dcols[:, :, :, :, i, j, l, :]
    return dw, db, dx


def _maxpool(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """2x2x2 max pool, stride 1. Returns values and the winning window offset (0..7)."""
    o = x.shape[1] - 1
    views = [x[:, i : i + o, j : j + o, l : l + o, :] for i in (0, 1) for j in (0, 1) for l in (0, 1)]
    stacked = np.stack(views, axis=0)
    # argmax returns the first maximum, i.e. the lowest flat offset on ties
    arg = np.argmax(stacked, axis=0)
    out = np.take_along_axis(stacked, arg[None], axis=0)[0]
    return out, arg


def _maxpool_backward(dout: np.ndarray, arg: np.ndarray, in_shape) -> np.ndarray:
    dx = np.zeros(in_shape)
    o = dout.shape[1]
    offset = 0
    for i in (0, 1):
        for j in (0, 1):
            for l in (0, 1):
                dx[:, i : i + o, j : j + o, l : l + o, :] += np.where(arg == offset, dout, 0.0)
                offset += 1
    return dx


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    # the shifted maximum contributes exactly 1; log1p of the remainder keeps full relative
    # precision of the loss when the prediction is confident
    e = np.exp(z)
    np.put_along_axis(e, np.argmax(z, axis=-1)[..., None], 0.0, axis=-1)
    return z - np.log1p(e.sum(axis=-1, keepdims=True))


def forward_batch(model: CnnModel, x: np.ndarray, keep: bool = False):
    """Probabilities for a batch; with ``keep`` also the activations for backprop."""
    p = model.params
    z1, cols1 = _conv(x, p["conv1_w"], p["conv1_b"])
    a1 = np.maximum(z1, 0.0)
    z2, cols2 = _conv(a1, p["conv2_w"], p["conv2_b"])
    a2 = np.maximum(z2, 0.0)
    pooled, arg = _maxpool(a2)
    flat = pooled.reshape(len(x), -1)
    z3 = flat @ p["dense1_w"] + p["dense1_b"]
    a3 = np.maximum(z3, 0.0)
    logits = a3 @ p["dense2_w"] + p["dense2_b"]
    probs = _softmax(logits)
    if not keep:
        return probs, logits
    cache = dict(x=x, z1=z1, cols1=cols1, a1=a1, z2=z2, cols2=cols2, a2=a2, arg=arg,
                 pooled=pooled, flat=flat, z3=z3, a3=a3, logits=logits)
    return probs, logits, cache


def _backward(model: CnnModel, cache: dict, probs: np.ndarray, y: np.ndarray, need_input=False):
    p = model.params
    B = len(y)
    dlogits = probs.copy()
    dlogits[np.arange(B), y] -= 1.0
    dlogits /= B
    grads = {}
    grads["dense2_w"] = cache["a3"].T @ dlogits
    grads["dense2_b"] = dlogits.sum(axis=0)
    da3 = dlogits @ p["dense2_w"].T
    dz3 = da3 * (cache["z3"] > 0)
    grads["dense1_w"] = cache["flat"].T @ dz3
    grads["dense1_b"] = dz3.sum(axis=0)
    dflat = dz3 @ p["dense1_w"].T
    dpool = dflat.reshape(cache["pooled"].shape)
    da2 = _maxpool_backward(dpool, cache["arg"], cache["a2"].shape)
    dz2 = da2 * (cache["z2"] > 0)
    grads["conv2_w"], grads["conv2_b"], da1 = _conv_backward(dz2, cache["cols2"], p["conv2_w"], cache["a1"].shape)
    dz1 = da1 * (cache["z1"] > 0)
    grads["conv1_w"], grads["conv1_b"], dx = _conv_backward(
        dz1, cache["cols1"], p["conv1_w"], cache["x"].shape, need_input=need_input
    )
    return grads, dx


def forward(model: CnnModel, field) -> np.ndarray:
    """Class probabilities ``P(chi=0), P(chi=1), P(chi=-2)`` for one field, shape ``(3,)``."""
    x = _as_batch(field)
    if len(x) != 1:
        raise ShapeMismatch(f"forward takes one field, got a batch of {len(x)}")
    return forward_batch(model, x)[0][0]


def batch_loss(model: CnnModel, x, y) -> float:
    x = _as_batch(x)
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    _, logits = forward_batch(model, x)
    return float(-_log_softmax(logits)[np.arange(len(y)), y].mean())


def loss(model: CnnModel, field, label) -> float:
    """Cross-entropy ``-ln p_label`` of a single field."""
    return batch_loss(model, field, [int(label)])


def per_sample_loss(model: CnnModel, x, y) -> np.ndarray:
    x = _as_batch(x)
    y = np.broadcast_to(np.asarray(y, dtype=np.int64), (len(x),))
    _, logits = forward_batch(model, x)
    return -_log_softmax(logits)[np.arange(len(x)), y]


def grad_weights(model: CnnModel, x, y) -> dict[str, np.ndarray]:
    """Gradient of the mean cross-entropy over the batch w.r.t. every parameter."""
    x = _as_batch(x)
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    if len(y) == 0:
        raise ValueError("empty batch")
    probs, _, cache = forward_batch(model, x, keep=True)
    grads, _ = _backward(model, cache, probs, y)
    return grads


def grad_input(model: CnnModel, field, label) -> np.ndarray:
    """Gradient of ``loss(model, field, label)`` w.r.t. the input, shape ``(10, 10, 10, 3)``."""
    x = _as_batch(field)
    y = np.array([int(label)])
    probs, _, cache = forward_batch(model, x, keep=True)
    _, dx = _backward(model, cache, probs, y, need_input=True)
    return dx[0]


def loss_and_grad_input(model: CnnModel, field, label) -> tuple[float, np.ndarray, np.ndarray]:
    """Loss, input gradient and probabilities from one forward/backward pass."""
    x = _as_batch(field)
    y = np.array([int(label)])
    probs, logits, cache = forward_batch(model, x, keep=True)
    _, dx = _backward(model, cache, probs, y, need_input=True)
    return float(-_log_softmax(logits)[0, y[0]]), dx[0], probs[0]


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 128
    learning_rate: float = 1e-3
    rho: float = 0.9
    rms_epsilon: float = 1e-7
    seed: int = 0
    optimizer: str = "rmsprop"

    def __post_init__(self):
        if self.optimizer != "rmsprop":
            raise ValueError(f"unsupported optimizer {self.optimizer!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.learning_rate < 0 or self.rms_epsilon <= 0:
            raise ValueError("learning_rate must be >= 0 and rms_epsilon > 0")
        if not 0.0 < self.rho < 1.0:
            raise ValueError("rho must lie in (0, 1)")


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    train_accuracy: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_accuracy: list[float] = field(default_factory=list)
    best_epoch: int = -1

    def to_dict(self) -> dict:
        return dict(self.__dict__)


class RMSprop:
    def __init__(self, params: dict[str, np.ndarray], lr: float, rho: float, eps: float):
        self.lr, self.rho, self.eps = lr, rho, eps
        self.s = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]):
        for k, g in grads.items():
            s = self.s[k]
            s *= self.rho
            s += (1.0 - self.rho) * g * g
            params[k] -= self.lr * g / (np.sqrt(s) + self.eps)


def _as_xy(data) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(data, tuple):
        x, y = data
        return np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.int64)
    return stack_fields(list(data))


def predict_batches(model: CnnModel, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    out = [forward_batch(model, x[i : i + batch_size])[0] for i in range(0, len(x), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, 3))


def _loss_acc(model, x, y, batch_size=256):
    probs = predict_batches(model, x, batch_size)
    ll = -np.log(np.clip(probs[np.arange(len(y)), y], 1e-300, None))
    return float(ll.mean()), float((probs.argmax(axis=1) == y).mean())


def train(train_data, val_data, config: TrainConfig = TrainConfig(), model: CnnModel | None = None,
          progress=None) -> tuple[CnnModel, TrainHistory]:
    """RMSprop training; returns the snapshot with the best validation accuracy.

    ``train_data``/``val_data`` are lists of :class:`LabeledSample` or
    ``(x, y)`` array pairs. ``progress`` is called as ``progress(epoch, history)``.
    """
    x_tr, y_tr = _as_xy(train_data)
    x_va, y_va = _as_xy(val_data)
    if len(x_tr) == 0:
        raise ValueError("empty training set")
    _as_batch(x_tr[:1])
    model = (model or CnnModel.initialize(config.seed)).copy()
    opt = RMSprop(model.params, config.learning_rate, config.rho, config.rms_epsilon)
    rng = np.random.default_rng([config.seed, 2])
    history = TrainHistory()
    best = (-1.0, model.copy())
    for epoch in range(config.epochs):
        order = rng.permutation(len(x_tr))
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            grads = grad_weights(model, x_tr[idx], y_tr[idx])
            opt.step(model.params, grads)
        tl, ta = _loss_acc(model, x_tr, y_tr)
        history.train_loss.append(tl)
        history.train_accuracy.append(ta)
        if len(x_va):
            vl, va = _loss_acc(model, x_va, y_va)
        else:
            vl, va = tl, ta
        history.val_loss.append(vl)
        history.val_accuracy.append(va)
        if va > best[0]:
            best = (va, model.copy())
            history.best_epoch = epoch
        log.info("epoch %d: train loss %.4f acc %.4f | val loss %.4f acc %.4f", epoch + 1, tl, ta, vl, va)
        if progress is not None:
            progress(epoch, history)
    return best[1], history


@dataclass
class Evaluation:
    accuracy: float
    confusion: np.ndarray
    probabilities: np.ndarray
    h: np.ndarray | None = None

    def to_dict(self) -> dict:
        out = {"accuracy": self.accuracy, "confusion": self.confusion.tolist(),
               "probabilities": self.probabilities.tolist()}
        if self.h is not None:
            out["h"] = self.h.tolist()
        return out


def evaluate(model: CnnModel, dataset) -> Evaluation:
    """Accuracy, 3x3 confusion counts (rows = true class) and per-sample confidences."""
    h = None
    if not isinstance(dataset, tuple):
        dataset = list(dataset)
        if dataset and isinstance(dataset[0], LabeledSample):
            h = np.array([s.h for s in dataset])
    x, y = _as_xy(dataset)
    if len(y) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    probs = predict_batches(model, x)
    pred = probs.argmax(axis=1)
    confusion = np.zeros((3, 3), dtype=np.int64)
    np.add.at(confusion, (y, pred), 1)
    return Evaluation(float((pred == y).mean()), confusion, probs, h)
