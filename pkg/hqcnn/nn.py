"""Dense-tensor CNN engine for quanvolved feature maps.

Activations are NHWC float64 arrays; a single image may be passed as HWC to
the functional ops. Parameters live in one flat list in declaration order:
kernel then bias for each conv layer, weights then bias for each dense layer.
Convolution is cross-correlation with SAME padding (for a 2x2 kernel the extra
row/column of zeros goes at the bottom/right).
"""
import struct
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from hqcnn import CheckpointFormatError, ConfigurationError, ShapeError, print_info
from hqcnn.cache import atomic_write
from hqcnn.rng import STAGE_DROPOUT, STAGE_INIT, STAGE_SHUFFLE, get_rng

FEATURE_SHAPE = (14, 14, 4)


class LayerKind(Enum):
    QUANV_INPUT = "quanv_input"
    CONV2D = "conv2d"
    MAXPOOL = "maxpool"
    FLATTEN = "flatten"
    DENSE = "dense"
    DROPOUT = "dropout"
    SOFTMAX = "softmax"


@dataclass(frozen=True)
class LayerSpec:
    kind: LayerKind
    units: int = 0
    kernel: int = 0
    activation: Optional[str] = None
    dropout_rate: float = 0.0

    def __post_init__(self):
        if self.activation not in (None, "relu"):
            raise ConfigurationError(f"unsupported activation {self.activation!r}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigurationError(f"dropout rate must be in [0, 1), got {self.dropout_rate}")


def default_layer_specs(n_classes: int = 2, dropout_rate: float = 0.2) -> List[LayerSpec]:
    """The nine-layer stack: quantum input, three 2x2 convs, two pools, FC 300/100, output.

    Dropout follows each max-pool and each hidden fully-connected layer.
    """
    if n_classes < 2:
        raise ConfigurationError(f"need at least 2 classes, got {n_classes}")
    return [
        LayerSpec(LayerKind.QUANV_INPUT, units=4, kernel=2),
        LayerSpec(LayerKind.CONV2D, units=16, kernel=2, activation="relu"),
        LayerSpec(LayerKind.MAXPOOL, kernel=2),
        LayerSpec(LayerKind.DROPOUT, dropout_rate=dropout_rate),
        LayerSpec(LayerKind.CONV2D, units=16, kernel=2, activation="relu"),
        LayerSpec(LayerKind.CONV2D, units=32, kernel=2, activation="relu"),
        LayerSpec(LayerKind.MAXPOOL, kernel=2),
        LayerSpec(LayerKind.DROPOUT, dropout_rate=dropout_rate),
        LayerSpec(LayerKind.FLATTEN),
        LayerSpec(LayerKind.DENSE, units=300, activation="relu"),
        LayerSpec(LayerKind.DROPOUT, dropout_rate=dropout_rate),
        LayerSpec(LayerKind.DENSE, units=100, activation="relu"),
        LayerSpec(LayerKind.DROPOUT, dropout_rate=dropout_rate),
        LayerSpec(LayerKind.DENSE, units=n_classes),
        LayerSpec(LayerKind.SOFTMAX),
    ]


def _batched(x: np.ndarray, ndim: int) -> Tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == ndim - 1:
        return x[None], True
    if x.ndim != ndim:
        raise ShapeError(f"expected a {ndim - 1}-D sample or {ndim}-D batch, got shape {x.shape}")
    return x, False


def _same_pad(x: np.ndarray, kh: int, kw: int) -> Tuple[np.ndarray, int, int]:
    top, left = (kh - 1) // 2, (kw - 1) // 2
    padded = np.pad(x, ((0, 0), (top, kh - 1 - top), (left, kw - 1 - left), (0, 0)))
    return padded, top, left


def conv2d_forward(x, kernels: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """SAME cross-correlation, stride 1; ``kernels`` is (kh, kw, Cin, Cout)."""
    x, single = _batched(x, 4)
    n, h, w, cin = x.shape
    kh, kw, kcin, cout = kernels.shape
    if kcin != cin:
        raise ShapeError(f"input has {cin} channels, kernel expects {kcin}")
    xp, _, _ = _same_pad(x, kh, kw)
    out = np.empty((n, h, w, cout))
    out[...] = bias
    for i in range(kh):
        for j in range(kw):
            out += xp[:, i:i + h, j:j + w, :] @ kernels[i, j]
    return out[0] if single else out


def conv2d_backward(x, kernels: np.ndarray, grad_out) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    x, single = _batched(x, 4)
    grad_out, _ = _batched(grad_out, 4)
    n, h, w, _ = x.shape
    kh, kw = kernels.shape[:2]
    xp, top, left = _same_pad(x, kh, kw)
    dxp = np.zeros_like(xp)
    dk = np.empty_like(kernels)
    for i in range(kh):
        for j in range(kw):
            window = xp[:, i:i + h, j:j + w, :]
            dk[i, j] = np.tensordot(window, grad_out, axes=([0, 1, 2], [0, 1, 2]))
            dxp[:, i:i + h, j:j + w, :] += grad_out @ kernels[i, j].T
    dx = dxp[:, top:top + h, left:left + w, :]
    db = grad_out.sum(axis=(0, 1, 2))
    return (dx[0] if single else dx), dk, db


def relu(x) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(x, grad) -> np.ndarray:
    return grad * (np.asarray(x) > 0)


def maxpool2x2_forward(x) -> Tuple[np.ndarray, np.ndarray]:
    """2x2 max-pool, stride 2; a trailing odd row/column is dropped.

    Returns the pooled tensor and the argmax (0..3, row-major within each
    window) kept for the backward pass.
    """
    x, single = _batched(x, 4)
    n, h, w, c = x.shape
    if h < 2 or w < 2:
        raise ShapeError(f"max-pool needs H, W >= 2, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    windows = x[:, :2 * h2, :2 * w2, :].reshape(n, h2, 2, w2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h2, w2, c, 4)
    argmax = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, argmax[..., None], axis=-1)[..., 0]
    if single:
        return out[0], argmax[0]
    return out, argmax


def maxpool2x2_backward(grad_out, argmax: np.ndarray, input_shape: Sequence[int]) -> np.ndarray:
    grad_out, single = _batched(grad_out, 4)
    argmax = argmax[None] if single else argmax
    shape = (1,) + tuple(input_shape) if single else tuple(input_shape)
    n, h, w, c = shape
    h2, w2 = h // 2, w // 2
    windows = np.zeros((n, h2, w2, c, 4))
    np.put_along_axis(windows, argmax[..., None], grad_out[..., None], axis=-1)
    dx = np.zeros(shape)
    dx[:, :2 * h2, :2 * w2, :] = windows.reshape(n, h2, w2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, 2 * h2, 2 * w2, c)
    return dx[0] if single else dx


def dense_forward(x, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != weights.shape[0] or bias.shape != (weights.shape[1],):
        raise ShapeError(f"dense layer {weights.shape} / bias {bias.shape} cannot take input {x.shape}")
    return x @ weights + bias


def dense_backward(x, weights: np.ndarray, grad_out) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    x2, single = _batched(x, 2)
    g2, _ = _batched(grad_out, 2)
    dx = g2 @ weights.T
    return (dx[0] if single else dx), x2.T @ g2, g2.sum(axis=0)


def dropout_mask(shape, rate: float, rng: np.random.Generator) -> np.ndarray:
    """Inverted-dropout mask: 0 with probability ``rate``, else 1/(1-rate)."""
    return (rng.random(shape) >= rate) / (1.0 - rate)


def dropout(x, rate: float, training: bool, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    if not 0.0 <= rate < 1.0:
        raise ConfigurationError(f"dropout rate must be in [0, 1), got {rate}")
    x = np.asarray(x, dtype=np.float64)
    if not training or rate == 0.0:
        return x
    return x * dropout_mask(x.shape, rate, rng)


def softmax(logits) -> np.ndarray:
    shifted = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, labels) -> Tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and the softmax probabilities.

    ``logits`` is (C,) with an integer label or (N, C) with N labels.
    """
    logits, single = _batched(logits, 2)
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if logits.shape[1] < 2:
        raise ShapeError(f"need at least 2 classes, got {logits.shape[1]}")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = float(-log_probs[np.arange(len(labels)), labels].mean())
    probs = np.exp(log_probs)
    return loss, (probs[0] if single else probs)


def softmax_cross_entropy_grad(probs: np.ndarray, labels) -> np.ndarray:
    probs, single = _batched(probs, 2)
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    grad = probs.copy()
    grad[np.arange(len(labels)), labels] -= 1.0
    grad /= len(labels)
    return grad[0] if single else grad


def _glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class HqcnnModel:
    """A layer stack built from ``LayerSpec`` records and its parameter list.

    Attributes
    ----------
    specs: List[LayerSpec]
        Layer stack in order

    input_shape: Tuple[int, int, int]
        H, W, C of one feature map

    params: List[np.ndarray]
        Parameter tensors in declaration order

    shapes: List[tuple]
        Per-sample input shape of each layer, plus the final output shape
    """

    def __init__(self, specs: Sequence[LayerSpec], input_shape=FEATURE_SHAPE, seed: int = 0,
                 params: Optional[List[np.ndarray]] = None):
        self.specs = list(specs)
        self.input_shape = tuple(input_shape)
        self.shapes = [self.input_shape]
        param_shapes = []
        for spec in self.specs:
            shape = self.shapes[-1]
            if spec.kind is LayerKind.QUANV_INPUT:
                if spec.units and shape[-1] != spec.units:
                    raise ShapeError(f"quanvolved input has {shape[-1]} channels, stack expects {spec.units}")
            elif spec.kind is LayerKind.CONV2D:
                if len(shape) != 3:
                    raise ShapeError(f"conv layer needs an HxWxC input, got {shape}")
                param_shapes += [(spec.kernel, spec.kernel, shape[2], spec.units), (spec.units,)]
                shape = shape[:2] + (spec.units,)
            elif spec.kind is LayerKind.MAXPOOL:
                if len(shape) != 3 or shape[0] < 2 or shape[1] < 2:
                    raise ShapeError(f"max-pool cannot take input {shape}")
                shape = (shape[0] // 2, shape[1] // 2, shape[2])
            elif spec.kind is LayerKind.FLATTEN:
                shape = (int(np.prod(shape)),)
            elif spec.kind is LayerKind.DENSE:
                if len(shape) != 1:
                    raise ShapeError(f"dense layer needs a flat input, got {shape}")
                param_shapes += [(shape[0], spec.units), (spec.units,)]
                shape = (spec.units,)
            self.shapes.append(shape)
        if len(self.shapes[-1]) != 1 or self.shapes[-1][0] < 2:
            raise ShapeError(f"the stack must end in at least 2 logits, got {self.shapes[-1]}")
        self.param_shapes = param_shapes
        if params is None:
            params = self._init_params(seed)
        if [p.shape for p in params] != param_shapes:
            raise ShapeError(f"parameter shapes {[p.shape for p in params]} do not match the stack {param_shapes}")
        self.params = [np.asarray(p, dtype=np.float64) for p in params]

    def _init_params(self, seed: int) -> List[np.ndarray]:
        rng = get_rng(seed, STAGE_INIT)
        params = []
        for shape in self.param_shapes:
            if len(shape) == 1:
                params.append(np.zeros(shape))
            elif len(shape) == 4:
                kh, kw, cin, cout = shape
                params.append(_glorot(rng, shape, kh * kw * cin, kh * kw * cout))
            else:
                params.append(_glorot(rng, shape, shape[0], shape[1]))
        return params

    def with_params(self, params: List[np.ndarray]) -> "HqcnnModel":
        return HqcnnModel(self.specs, self.input_shape, params=[p.copy() for p in params])

    @property
    def n_classes(self) -> int:
        return self.shapes[-1][0]

    def parameter_counts(self) -> List[int]:
        """Parameter count of each conv/dense layer, in order."""
        return [int(np.prod(w)) + int(np.prod(b)) for w, b in zip(self.param_shapes[::2], self.param_shapes[1::2])]

    @property
    def total_parameter_count(self) -> int:
        return sum(self.parameter_counts())


def _forward(model: HqcnnModel, x: np.ndarray, params: List[np.ndarray], training: bool,
             rng: Optional[np.random.Generator]) -> Tuple[np.ndarray, list]:
    caches = []
    slot = 0
    for spec in model.specs:
        cache = None
        if spec.kind is LayerKind.CONV2D:
            pre = conv2d_forward(x, params[slot], params[slot + 1])
            cache = (x, pre)
            x = relu(pre) if spec.activation == "relu" else pre
            slot += 2
        elif spec.kind is LayerKind.DENSE:
            pre = dense_forward(x, params[slot], params[slot + 1])
            cache = (x, pre)
            x = relu(pre) if spec.activation == "relu" else pre
            slot += 2
        elif spec.kind is LayerKind.MAXPOOL:
            cache = x.shape
            x, argmax = maxpool2x2_forward(x)
            cache = (cache, argmax)
        elif spec.kind is LayerKind.FLATTEN:
            cache = x.shape
            x = x.reshape(len(x), -1)
        elif spec.kind is LayerKind.DROPOUT and training and spec.dropout_rate > 0.0:
            cache = dropout_mask(x.shape, spec.dropout_rate, rng)
            x = x * cache
        caches.append(cache)
    return x, caches


def _backward(model: HqcnnModel, grad: np.ndarray, params: List[np.ndarray], caches: list) -> List[np.ndarray]:
    grads = [None] * len(params)
    slot = len(params)
    for spec, cache in zip(reversed(model.specs), reversed(caches)):
        if spec.kind in (LayerKind.CONV2D, LayerKind.DENSE):
            slot -= 2
            x, pre = cache
            if spec.activation == "relu":
                grad = relu_backward(pre, grad)
            step = conv2d_backward if spec.kind is LayerKind.CONV2D else dense_backward
            grad, grads[slot], grads[slot + 1] = step(x, params[slot], grad)
        elif spec.kind is LayerKind.MAXPOOL:
            shape, argmax = cache
            grad = maxpool2x2_backward(grad, argmax, shape)
        elif spec.kind is LayerKind.FLATTEN:
            grad = grad.reshape(cache)
        elif spec.kind is LayerKind.DROPOUT and cache is not None:
            grad = grad * cache
    return grads


def _check_features(model: HqcnnModel, features) -> np.ndarray:
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != len(model.input_shape) + 1 or features.shape[1:] != model.input_shape:
        raise ShapeError(f"model takes batches of {model.input_shape}, got {features.shape}")
    return features


def forward(model: HqcnnModel, features, training: bool = False,
            rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Logits for a batch of feature maps."""
    logits, _ = _forward(model, _check_features(model, features), model.params, training, rng)
    return logits


def backward(model: HqcnnModel, features, labels, training: bool = False,
             rng: Optional[np.random.Generator] = None) -> Tuple[float, List[np.ndarray]]:
    """Mean cross-entropy of the batch and its gradient for every parameter tensor."""
    features = _check_features(model, features)
    logits, caches = _forward(model, features, model.params, training, rng)
    loss, probs = softmax_cross_entropy(logits, labels)
    grads = _backward(model, softmax_cross_entropy_grad(probs, labels), model.params, caches)
    return loss, grads


@dataclass
class AdamState:
    step: int
    m: List[np.ndarray]
    v: List[np.ndarray]
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


def adam_init(params: List[np.ndarray], learning_rate: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999,
              epsilon: float = 1e-8) -> AdamState:
    return AdamState(0, [np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params],
                     learning_rate, beta1, beta2, epsilon)


def adam_step(params: List[np.ndarray], grads: List[np.ndarray], state: AdamState) -> Tuple[List[np.ndarray], AdamState]:
    if len(params) != len(grads) or any(p.shape != g.shape for p, g in zip(params, grads)):
        raise ShapeError("gradients do not match parameter shapes")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    m = [b1 * m + (1 - b1) * g for m, g in zip(state.m, grads)]
    v = [b2 * v + (1 - b2) * g * g for v, g in zip(state.v, grads)]
    new_params = []
    for p, mt, vt in zip(params, m, v):
        m_hat = mt / (1 - b1 ** t)
        v_hat = vt / (1 - b2 ** t)
        new_params.append(p - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon))
    return new_params, replace(state, step=t, m=m, v=v)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    learning_rate: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ConfigurationError(f"invalid training settings {self}")

    def to_dict(self) -> dict:
        return {"epochs": self.epochs, "batch_size": self.batch_size, "learning_rate": self.learning_rate,
                "seed": self.seed, "optimizer": "adam", "beta1": 0.9, "beta2": 0.999, "epsilon": 1e-8,
                "init": "glorot_uniform"}


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    test_loss: float = float("nan")
    test_acc: float = float("nan")


EPOCH_LOG_COLUMNS = ("epoch", "train_loss", "train_acc", "test_loss", "test_acc")


def epoch_log_csv(log: Sequence[EpochRecord]) -> str:
    lines = [",".join(EPOCH_LOG_COLUMNS)]
    for r in log:
        lines.append(f"{r.epoch},{r.train_loss!r},{r.train_acc!r},{r.test_loss!r},{r.test_acc!r}")
    return "\n".join(lines) + "\n"


def train(model: HqcnnModel, features, labels, config: TrainConfig = TrainConfig(),
          test: Optional[Tuple[np.ndarray, np.ndarray]] = None,
          verbose: bool = False) -> Tuple[HqcnnModel, List[EpochRecord]]:
    """Mini-batch Adam training.

    The batch order of epoch e comes from ``(seed, STAGE_SHUFFLE, e)`` and the
    dropout masks of batch b from ``(seed, STAGE_DROPOUT, e, b)``. Train
    loss/accuracy are running averages over the epoch's batches in training
    mode; test figures are computed in evaluation mode after the epoch.
    """
    features = _check_features(model, features)
    labels = np.asarray(labels, dtype=np.int64)
    if len(features) == 0:
        raise ConfigurationError("cannot train on an empty dataset")
    if len(labels) != len(features):
        raise ShapeError(f"{len(features)} feature maps but {len(labels)} labels")
    if labels.min() < 0 or labels.max() >= model.n_classes:
        raise ShapeError(f"labels must lie in [0, {model.n_classes}), got [{labels.min()}, {labels.max()}]")
    params = [p.copy() for p in model.params]
    state = adam_init(params, config.learning_rate)
    log = []
    for epoch in range(1, config.epochs + 1):
        order = get_rng(config.seed, STAGE_SHUFFLE, epoch).permutation(len(features))
        loss_sum, correct = 0.0, 0
        for batch, start in enumerate(range(0, len(order), config.batch_size)):
            idx = order[start:start + config.batch_size]
            x, y = features[idx], labels[idx]
            logits, caches = _forward(model, x, params, True, get_rng(config.seed, STAGE_DROPOUT, epoch, batch))
            loss, probs = softmax_cross_entropy(logits, y)
            grads = _backward(model, softmax_cross_entropy_grad(probs, y), params, caches)
            params, state = adam_step(params, grads, state)
            loss_sum += loss * len(idx)
            correct += int((probs.argmax(axis=1) == y).sum())
        record = EpochRecord(epoch, loss_sum / len(features), correct / len(features))
        if test is not None and len(test[0]):
            test_loss, test_acc = evaluate(model.with_params(params), *test)
            record = replace(record, test_loss=test_loss, test_acc=test_acc)
        log.append(record)
        if verbose:
            print_info(f"epoch {epoch}/{config.epochs} loss={record.train_loss:.4f} acc={record.train_acc:.4f} "
                       f"test_loss={record.test_loss:.4f} test_acc={record.test_acc:.4f}")
    return model.with_params(params), log


def predict_proba(model: HqcnnModel, features, batch_size: int = 256) -> np.ndarray:
    features = _check_features(model, features)
    out = [softmax(forward(model, features[i:i + batch_size])) for i in range(0, len(features), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, model.n_classes))


def evaluate(model: HqcnnModel, features, labels, batch_size: int = 256) -> Tuple[float, float]:
    """Mean cross-entropy and top-1 accuracy in evaluation mode."""
    labels = np.asarray(labels, dtype=np.int64)
    probs = predict_proba(model, features, batch_size)
    loss = float(-np.log(np.clip(probs[np.arange(len(labels)), labels], 1e-300, None)).mean())
    return loss, float((probs.argmax(axis=1) == labels).mean())


def parameter_summary(model: HqcnnModel) -> List[dict]:
    rows = []
    counts = iter(model.parameter_counts())
    for index, spec in enumerate(model.specs, start=1):
        has_params = spec.kind in (LayerKind.CONV2D, LayerKind.DENSE)
        rows.append({
            "layer": index,
            "kind": spec.kind.value,
            "units": spec.units,
            "kernel": f"{spec.kernel}x{spec.kernel}" if spec.kernel else "-",
            "input_shape": model.shapes[index - 1],
            "output_shape": model.shapes[index],
            "params": next(counts) if has_params else 0,
        })
    return rows


CHECKPOINT_MAGIC = b"QVM1"
CHECKPOINT_VERSION = 1
_CKPT_HEAD = struct.Struct("<4sIIIII")
_CKPT_LAYER = struct.Struct("<BIIBd")
_KIND_CODES = list(LayerKind)


def encode_checkpoint(model: HqcnnModel) -> bytes:
    """QVM1: magic, version, input H/W/C, layer count, layer table, then binary64 tensors."""
    chunks = [_CKPT_HEAD.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, *model.input_shape, len(model.specs))]
    for spec in model.specs:
        chunks.append(_CKPT_LAYER.pack(_KIND_CODES.index(spec.kind), spec.units, spec.kernel,
                                       1 if spec.activation == "relu" else 0, spec.dropout_rate))
    chunks.append(struct.pack("<I", len(model.params)))
    for p in model.params:
        chunks.append(struct.pack(f"<I{p.ndim}I", p.ndim, *p.shape))
        chunks.append(p.astype("<f8").tobytes(order="C"))
    return b"".join(chunks)


def decode_checkpoint(blob: bytes) -> HqcnnModel:
    try:
        magic, version, h, w, c, n_layers = _CKPT_HEAD.unpack_from(blob, 0)
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointFormatError(f"bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
        if version != CHECKPOINT_VERSION:
            raise CheckpointFormatError(f"unsupported checkpoint version {version}")
        offset = _CKPT_HEAD.size
        specs = []
        for _ in range(n_layers):
            kind, units, kernel, act, rate = _CKPT_LAYER.unpack_from(blob, offset)
            offset += _CKPT_LAYER.size
            specs.append(LayerSpec(_KIND_CODES[kind], units, kernel, "relu" if act else None, rate))
        (n_params,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        params = []
        for _ in range(n_params):
            (ndim,) = struct.unpack_from("<I", blob, offset)
            shape = struct.unpack_from(f"<{ndim}I", blob, offset + 4)
            offset += 4 + 4 * ndim
            size = int(np.prod(shape))
            if offset + 8 * size > len(blob):
                raise CheckpointFormatError("checkpoint truncated inside a parameter tensor")
            params.append(np.frombuffer(blob, dtype="<f8", count=size, offset=offset).reshape(shape).astype(np.float64))
            offset += 8 * size
    except (struct.error, IndexError) as e:
        raise CheckpointFormatError(f"corrupt checkpoint ({e})")
    if offset != len(blob):
        raise CheckpointFormatError(f"{len(blob) - offset} trailing bytes in checkpoint")
    return HqcnnModel(specs, (h, w, c), params=params)


def save_checkpoint(model: HqcnnModel, path):
    atomic_write(path, encode_checkpoint(model))


def load_checkpoint(path) -> HqcnnModel:
    return decode_checkpoint(Path(path).read_bytes())
