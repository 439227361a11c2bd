"""Convolutional reconstruction networks trained from scratch.

A model is an ordered list of :class:`ConvLayer`; each layer is a valid
multi-channel convolution plus a per-channel bias and an optional ReLU.
The 3-layer network maps a 32x32 degraded window to the 14x14 clean pixels
at its center (32 -> 23 -> 18 -> 14). The linear 1-layer baseline uses a
single 19x19 filter so that it produces the same 14x14 output.
"""
from __future__ import annotations

import logging
import math
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from .conv import conv_backward, conv_forward
from .image import DTYPE

log = logging.getLogger(__name__)

ARCH_3CNN = ((1, 64, 10), (64, 16, 6), (16, 1, 5))


class ModelFormatError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class ConvLayer:
    weights: np.ndarray  # (out, in, kh, kw)
    biases: np.ndarray  # (out,)
    relu: bool = True

    def __post_init__(self):
        if self.weights.ndim != 4:
            raise ValueError(f"weights must be 4-D, got shape {self.weights.shape}")
        if self.biases.shape != (self.weights.shape[0],):
            raise ValueError(
                f"bias shape {self.biases.shape} does not match {self.weights.shape[0]} outputs"
            )

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def kernel_size(self) -> tuple[int, int]:
        return self.weights.shape[2], self.weights.shape[3]

    def copy(self) -> "ConvLayer":
        return ConvLayer(self.weights.copy(), self.biases.copy(), self.relu)


@dataclass
class CnnModel:
    layers: list[ConvLayer]

    def __post_init__(self):
        if not self.layers:
            raise ValueError("a model needs at least one layer")
        if self.layers[0].in_channels != 1:
            raise ValueError("the first layer must take a single input channel")
        if self.layers[-1].out_channels != 1:
            raise ValueError("the last layer must produce a single channel")
        for k in range(1, len(self.layers)):
            if self.layers[k].in_channels != self.layers[k - 1].out_channels:
                raise ValueError(
                    f"layer {k} expects {self.layers[k].in_channels} channels, "
                    f"layer {k - 1} produces {self.layers[k - 1].out_channels}"
                )

    @property
    def receptive_field(self) -> tuple[int, int]:
        """Input window that determines one output pixel."""
        rh = 1 + sum(layer.kernel_size[0] - 1 for layer in self.layers)
        rw = 1 + sum(layer.kernel_size[1] - 1 for layer in self.layers)
        return rh, rw

    @property
    def margin(self) -> int:
        """Pixels lost on each side (assumes square, centered receptive field)."""
        return (self.receptive_field[0] - 1) // 2

    def output_shape(self, h: int, w: int) -> tuple[int, int]:
        rh, rw = self.receptive_field
        return h - rh + 1, w - rw + 1

    @property
    def n_params(self) -> int:
        return sum(layer.weights.size + layer.biases.size for layer in self.layers)

    @property
    def dtype(self):
        return self.layers[0].weights.dtype

    def copy(self) -> "CnnModel":
        return CnnModel([layer.copy() for layer in self.layers])

    def astype(self, dtype) -> "CnnModel":
        return CnnModel(
            [
                ConvLayer(l.weights.astype(dtype), l.biases.astype(dtype), l.relu)
                for l in self.layers
            ]
        )

    def parameters(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out += [layer.weights, layer.biases]
        return out


def init_layer(rng: np.random.Generator, c_in: int, c_out: int, k: int, relu: bool) -> ConvLayer:
    # Glorot-uniform over the whole filter tensor, zero biases
    fan_in = c_in * k * k
    fan_out = c_out * k * k
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    w = rng.uniform(-bound, bound, size=(c_out, c_in, k, k)).astype(DTYPE)
    return ConvLayer(w, np.zeros(c_out, dtype=DTYPE), relu)


def build_model(arch, seed: int = 0, relu: bool = True) -> CnnModel:
    """Build a model from ``(in, out, kernel)`` triples."""
    rng = np.random.default_rng(seed)
    return CnnModel([init_layer(rng, ci, co, k, relu) for ci, co, k in arch])


def build_3cnn(seed: int = 0) -> CnnModel:
    """Three ReLU layers: 1->64 (10x10), 64->16 (6x6), 16->1 (5x5)."""
    return build_model(ARCH_3CNN, seed, relu=True)


def build_1cnn(seed: int = 0, init: str = "zeros") -> CnnModel:
    """One linear 19x19 filter; same 32x32 -> 14x14 geometry as the 3-layer net.

    The model is a linear least-squares problem, so starting from zero
    leaves no random component in the poorly conditioned directions that
    SGD barely moves. ``init="glorot"`` gives the random start instead.
    """
    if init == "glorot":
        return build_model(((1, 1, 19),), seed, relu=False)
    if init != "zeros":
        raise ValueError(f"unknown init {init!r}")
    w = np.zeros((1, 1, 19, 19), dtype=DTYPE)
    return CnnModel([ConvLayer(w, np.zeros(1, dtype=DTYPE), False)])


# ------------------------------------------------------------ forward

def _as_batch(x) -> tuple[np.ndarray, int]:
    x = np.asarray(x)
    ndim = x.ndim
    if ndim == 2:
        x = x[None, None]
    elif ndim == 3:
        x = x[:, None]
    elif ndim != 4:
        raise ValueError(f"expected a 2-D image, a (B, H, W) stack or (B, 1, H, W), got {x.shape}")
    return x, ndim


def _forward_batch(model: CnnModel, x: np.ndarray, keep_cache: bool):
    caches = []
    acts = []
    a = x
    for layer in model.layers:
        z, cache = conv_forward(a, layer.weights)
        z += layer.biases[None, :, None, None]
        a = np.maximum(z, 0) if layer.relu else z
        acts.append(a)
        if keep_cache:
            caches.append(cache)
    return acts, caches


def forward(model: CnnModel, x, keep_intermediates: bool = False):
    """Run the network on a single image or a stack of images.

    Returns the output with the input's rank (2-D in, 2-D out). With
    ``keep_intermediates`` the per-layer post-activation feature maps are
    returned as well, each shaped (B, C, h, w).
    """
    batch, ndim = _as_batch(x)
    rh, rw = model.receptive_field
    if batch.shape[2] < rh or batch.shape[3] < rw:
        raise ValueError(
            f"input {batch.shape[2]}x{batch.shape[3]} is smaller than the "
            f"{rh}x{rw} receptive field"
        )
    batch = batch.astype(model.dtype, copy=False)
    acts, _ = _forward_batch(model, batch, keep_cache=False)
    out = acts[-1]
    if ndim == 2:
        out = out[0, 0]
    elif ndim == 3:
        out = out[:, 0]
    if keep_intermediates:
        return out, acts
    return out


# ------------------------------------------------------------ training

def loss_and_gradients(model: CnnModel, inputs, targets):
    """Mean squared error over batch and output pixels, and its gradients.

    ``inputs`` is (B, H, W), ``targets`` the matching (B, h, w) output
    windows. Returns ``(loss, grads)`` where ``grads`` lists ``(dW, db)``
    per layer. The ReLU derivative at exactly 0 is taken as 0.
    """
    x = np.asarray(inputs, dtype=model.dtype)
    t = np.asarray(targets, dtype=model.dtype)
    if x.ndim == 2:
        x, t = x[None], t[None]
    if x.ndim != 3 or t.ndim != 3 or x.shape[0] != t.shape[0]:
        raise ValueError(f"inputs {x.shape} and targets {t.shape} are not matching stacks")
    expected = model.output_shape(*x.shape[1:])
    if t.shape[1:] != expected:
        raise ValueError(f"targets are {t.shape[1:]}, the model outputs {expected}")

    acts, caches = _forward_batch(model, x[:, None], keep_cache=True)
    diff = acts[-1][:, 0] - t
    loss = float(np.mean(diff.astype(np.float64) ** 2))

    g = (2.0 / diff.size) * diff[:, None]
    grads = [None] * len(model.layers)
    for k in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[k]
        if layer.relu:
            g = g * (acts[k] > 0)
        db = g.sum(axis=(0, 2, 3))
        dw, g = conv_backward(g, caches[k], need_input_grad=k > 0)
        grads[k] = (dw.astype(model.dtype), db.astype(model.dtype))
    return loss, grads


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    nesterov: bool = True
    batch_size: int = 50
    max_epochs: int = 30
    early_stop: bool = True
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_epochs < 1:
            raise ValueError(f"max_epochs must be >= 1, got {self.max_epochs}")


@dataclass
class TrainHistory:
    initial_val_loss: float = math.nan
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    epoch_seconds: list[float] = field(default_factory=list)
    stopped_early: bool = False
    best_epoch: int = 0


def sgd_step(params, velocities, grads, cfg: TrainConfig) -> None:
    """In-place momentum update ``v <- mu v - lr g; p <- p + v``."""
    for p, v, g in zip(params, velocities, grads):
        v *= cfg.momentum
        v -= cfg.learning_rate * g
        p += v


def evaluate(model: CnnModel, inputs, targets, chunk: int = 500) -> float:
    """Mean squared error of ``model`` over a whole patch set."""
    total = 0.0
    n = 0
    for start in range(0, len(inputs), chunk):
        out = forward(model, inputs[start:start + chunk])
        d = out.astype(np.float64) - targets[start:start + chunk]
        total += float(np.sum(d * d))
        n += d.size
    return total / n


def train(model: CnnModel, train_set, val_set, cfg: TrainConfig = TrainConfig(),
          val_loss_fn=None, progress=None):
    """Minibatch SGD with (Nesterov) momentum and one-step-patience early stopping.

    ``train_set`` and ``val_set`` expose ``inputs`` and ``targets`` stacks.
    The gradient for the Nesterov update is taken at the look-ahead point
    ``w + mu v``. After each epoch the validation loss is compared with the
    previous epoch; on the first increase training stops and the previous
    epoch's weights are returned.

    ``val_loss_fn(model) -> float`` replaces the validation MSE, and
    ``progress(epoch, history)`` is called after every epoch.
    Returns ``(model, history)``; the input model is not modified.
    """
    if len(train_set.inputs) == 0 or len(val_set.inputs) == 0:
        raise ValueError("training and validation sets must be non-empty")
    if val_loss_fn is None:
        def val_loss_fn(m):
            return evaluate(m, val_set.inputs, val_set.targets)

    model = model.copy()
    params = model.parameters()
    velocities = [np.zeros_like(p) for p in params]
    rng = np.random.default_rng(cfg.seed)
    history = TrainHistory(initial_val_loss=val_loss_fn(model))
    n = len(train_set.inputs)
    snapshot = model.copy()
    prev_val = math.inf

    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(n)
        batch_losses = []
        for start in range(0, n, cfg.batch_size):
            idx = np.sort(order[start:start + cfg.batch_size])
            xb = train_set.inputs[idx]
            tb = train_set.targets[idx]
            if cfg.nesterov and cfg.momentum > 0:
                ahead = model.copy()
                for p, v in zip(ahead.parameters(), velocities):
                    p += cfg.momentum * v
                loss, grads = loss_and_gradients(ahead, xb, tb)
            else:
                loss, grads = loss_and_gradients(model, xb, tb)
            if not math.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss {loss} at epoch {epoch}, batch {start // cfg.batch_size}; "
                    f"try a smaller learning rate (currently {cfg.learning_rate})"
                )
            flat = [g for pair in grads for g in pair]
            sgd_step(params, velocities, flat, cfg)
            batch_losses.append(loss)

        val = float(val_loss_fn(model))
        history.train_loss.append(float(np.mean(batch_losses)))
        history.val_loss.append(val)
        history.epoch_seconds.append(time.perf_counter() - t0)
        log.info("epoch %d: train %.6g val %.6g (%.1fs)", epoch,
                 history.train_loss[-1], val, history.epoch_seconds[-1])
        if progress is not None:
            progress(epoch, history)
        if not math.isfinite(val):
            raise TrainingDiverged(f"non-finite validation loss at epoch {epoch}")
        if cfg.early_stop and val > prev_val:
            history.stopped_early = True
            history.best_epoch = epoch - 1
            return snapshot, history
        prev_val = val
        snapshot = model.copy()
        history.best_epoch = epoch
    return snapshot, history


# ------------------------------------------------------------ files

MODEL_MAGIC = b"CNN1"
MODEL_VERSION = 1
_LAYER_HEADER = struct.Struct("<4IB")


def encode_model(model: CnnModel) -> bytes:
    parts = [MODEL_MAGIC, struct.pack("<2I", MODEL_VERSION, len(model.layers))]
    for layer in model.layers:
        co, ci, kh, kw = layer.weights.shape
        parts.append(_LAYER_HEADER.pack(co, ci, kh, kw, int(layer.relu)))
        parts.append(np.ascontiguousarray(layer.weights, dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(layer.biases, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_model(blob: bytes) -> CnnModel:
    if blob[:4] != MODEL_MAGIC:
        raise ModelFormatError(f"bad magic: expected b'CNN1', found {blob[:4]!r}")
    if len(blob) < 12:
        raise ModelFormatError("truncated model header")
    version, n_layers = struct.unpack_from("<2I", blob, 4)
    if version != MODEL_VERSION:
        raise ModelFormatError(f"unsupported model version {version} (expected {MODEL_VERSION})")
    pos = 12
    layers = []
    for k in range(n_layers):
        if pos + _LAYER_HEADER.size > len(blob):
            raise ModelFormatError(f"truncated header for layer {k}")
        co, ci, kh, kw, relu = _LAYER_HEADER.unpack_from(blob, pos)
        pos += _LAYER_HEADER.size
        nw = co * ci * kh * kw
        need = 4 * (nw + co)
        if pos + need > len(blob):
            raise ModelFormatError(
                f"truncated payload for layer {k}: need {need} bytes, {len(blob) - pos} left"
            )
        w = np.frombuffer(blob, "<f4", nw, pos).reshape(co, ci, kh, kw).astype(DTYPE)
        pos += 4 * nw
        b = np.frombuffer(blob, "<f4", co, pos).astype(DTYPE)
        pos += 4 * co
        layers.append(ConvLayer(w, b, bool(relu)))
    if pos != len(blob):
        raise ModelFormatError(f"{len(blob) - pos} unexpected trailing bytes")
    return CnnModel(layers)


def save_model(model: CnnModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_model(model))


def load_model(path) -> CnnModel:
    with open(path, "rb") as fh:
        return decode_model(fh.read())
