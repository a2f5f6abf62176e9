"""Compact residual classifier trained with AdamW and exact gradients.

The network is a small ResNet: a 3x3 stem, `n_blocks` residual blocks (two
3x3 convolutions plus a shortcut, width doubling and stride-2 downsampling
between stages), global average pooling and an affine head.  Forward,
loss and gradients are implemented directly on numpy arrays; gradients are
exact derivatives of the mean cross-entropy (verified against central finite
differences in the test suite, which runs the same code in float64).

Training is single-threaded and fully deterministic in (seed, plan, config):
initialization, shuffling and augmentation all derive from the package PRNG.
"""

from __future__ import annotations

import json
import struct
import time
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .prng import Stream, derive
from .synthgrid import DatasetGrid, PreprocessSpec, preprocess_batch
from .diversity import SplitPlan

CHECKPOINT_MAGIC = b"GBCK"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    input_size: int = 16
    channels: int = 3
    stem_width: int = 16
    n_blocks: int = 3
    n_classes: int = 10

    def __post_init__(self):
        if self.stem_width < 1 or self.n_blocks < 1 or self.n_classes < 2:
            raise ValueError("stem_width, n_blocks >= 1 and n_classes >= 2 required")
        size = self.input_size
        for i in range(1, self.n_blocks):
            size = (size + 1) // 2
        if size < 1:
            raise ValueError("input_size too small for the requested n_blocks")

    def block_widths(self) -> list[int]:
        return [self.stem_width << i for i in range(self.n_blocks)]


@dataclass(frozen=True)
class OptimizerHyper:
    learning_rate: float = 0.005
    batch_size: int = 512
    weight_decay: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 25
    lr_decay_factor: float = 0.1
    lr_decay_every: int = 5

    def __post_init__(self):
        if min(self.learning_rate, self.batch_size, self.eps,
               self.lr_decay_factor, self.lr_decay_every) <= 0:
            raise ValueError("optimizer hyperparameters must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


@dataclass
class ParamState:
    config: ModelConfig
    params: dict[str, np.ndarray]
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    epoch: int = 0


@dataclass(frozen=True)
class TrainReport:
    train_losses: tuple[float, ...]
    val_scores: tuple[float, ...]
    selected_epoch: int
    wall_seconds: float


# -- parameter declaration ---------------------------------------------------


def param_specs(config: ModelConfig) -> list[tuple[str, tuple[int, ...], int]]:
    """Declaration-ordered (name, shape, fan_in) for every parameter tensor."""
    specs: list[tuple[str, tuple[int, ...], int]] = []
    w0 = config.stem_width
    specs.append(("stem.w", (w0, config.channels, 3, 3), config.channels * 9))
    specs.append(("stem.b", (w0,), config.channels * 9))
    w_in = w0
    for i, width in enumerate(config.block_widths()):
        prefix = f"block{i}"
        specs.append((f"{prefix}.conv1.w", (width, w_in, 3, 3), w_in * 9))
        specs.append((f"{prefix}.conv1.b", (width,), w_in * 9))
        specs.append((f"{prefix}.conv2.w", (width, width, 3, 3), width * 9))
        specs.append((f"{prefix}.conv2.b", (width,), width * 9))
        if i > 0:
            specs.append((f"{prefix}.proj.w", (width, w_in, 1, 1), w_in))
            specs.append((f"{prefix}.proj.b", (width,), w_in))
        w_in = width
    specs.append(("head.w", (config.n_classes, w_in), w_in))
    specs.append(("head.b", (config.n_classes,), w_in))
    return specs


def init_model(config: ModelConfig, seed: int) -> ParamState:
    """He-uniform weights (bound sqrt(6/fan_in)) via the package PRNG; zero biases."""
    params: dict[str, np.ndarray] = {}
    for idx, (name, shape, fan_in) in enumerate(param_specs(config)):
        if name.endswith(".b"):
            params[name] = np.zeros(shape, dtype=np.float32)
            continue
        bound = np.sqrt(6.0 / fan_in)
        stream = Stream(derive(seed, "init", idx))
        n = int(np.prod(shape))
        values = (stream.floats(n) * 2.0 - 1.0) * bound
        params[name] = values.reshape(shape).astype(np.float32)
    zeros = {name: np.zeros_like(p) for name, p in params.items()}
    return ParamState(config=config,
                      params=params,
                      m={k: z.copy() for k, z in zeros.items()},
                      v={k: z.copy() for k, z in zeros.items()})


# -- layer primitives --------------------------------------------------------


def _conv2d_forward(x, w, b, stride, pad):
    n, c, h, wd = x.shape
    k, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]          # [N, C, Ho, Wo, kh, kw]
    cols = np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5))
    cols = cols.reshape(n * ho * wo, c * kh * kw)
    out = cols @ w.reshape(k, -1).T + b
    out = out.reshape(n, ho, wo, k).transpose(0, 3, 1, 2)
    cache = (xp.shape, cols, w, stride, pad, (n, c, h, wd))
    return np.ascontiguousarray(out), cache


def _conv2d_backward(dout, cache):
    xp_shape, cols, w, stride, pad, (n, c, h, wd) = cache
    k, _, kh, kw = w.shape
    _, _, ho, wo = dout.shape
    dflat = np.ascontiguousarray(dout.transpose(0, 2, 3, 1)).reshape(n * ho * wo, k)
    dw = (dflat.T @ cols).reshape(w.shape)
    db = dflat.sum(axis=0)
    dcols = dflat @ w.reshape(k, -1)
    dcols = dcols.reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
    dxp = np.zeros(xp_shape, dtype=dout.dtype)
    for ki in range(kh):
        for kj in range(kw):
            dxp[:, :, ki:ki + stride * ho:stride, kj:kj + stride * wo:stride] += \
                dcols[:, :, :, :, ki, kj]
    if pad:
        dx = dxp[:, :, pad:-pad, pad:-pad]
    else:
        dx = dxp
    return np.ascontiguousarray(dx), dw, db


def _relu_forward(x):
    out = np.maximum(x, 0)
    return out, (x > 0)


def _relu_backward(dout, mask):
    return dout * mask


def _gap_forward(x):
    return x.mean(axis=(2, 3)), x.shape


def _gap_backward(dout, shape):
    n, c, h, w = shape
    return np.broadcast_to(dout[:, :, None, None], shape) / np.asarray(
        h * w, dtype=dout.dtype)


def _affine_forward(x, w, b):
    return x @ w.T + b, x


def _affine_backward(dout, x, w):
    return dout @ w, dout.T @ x, dout.sum(axis=0)


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


# -- model forward/backward ---------------------------------------------------


def forward(state: ParamState, batch: np.ndarray, *, want_caches: bool = False):
    """Logits for a [N, C, H, W] batch; optionally the backward caches."""
    cfg = state.config
    x = np.asarray(batch)
    if x.ndim != 4 or x.shape[1] != cfg.channels or x.shape[2] != cfg.input_size \
            or x.shape[3] != cfg.input_size:
        raise ValueError(
            f"batch shape {x.shape} does not match model input "
            f"[N, {cfg.channels}, {cfg.input_size}, {cfg.input_size}]"
        )
    p = state.params
    caches = []
    out, cache = _conv2d_forward(x, p["stem.w"], p["stem.b"], 1, 1)
    caches.append(("conv", "stem", cache))
    out, mask = _relu_forward(out)
    caches.append(("relu", "stem", mask))
    for i in range(cfg.n_blocks):
        prefix = f"block{i}"
        stride = 1 if i == 0 else 2
        identity = out
        h1, c1 = _conv2d_forward(out, p[f"{prefix}.conv1.w"], p[f"{prefix}.conv1.b"],
                                 stride, 1)
        h1r, m1 = _relu_forward(h1)
        h2, c2 = _conv2d_forward(h1r, p[f"{prefix}.conv2.w"], p[f"{prefix}.conv2.b"],
                                 1, 1)
        if f"{prefix}.proj.w" in p:
            sc, cp = _conv2d_forward(identity, p[f"{prefix}.proj.w"],
                                     p[f"{prefix}.proj.b"], stride, 0)
        else:
            sc, cp = identity, None
        summed = h2 + sc
        out, m_out = _relu_forward(summed)
        caches.append(("block", prefix, (c1, m1, c2, cp, m_out)))
    pooled, gap_shape = _gap_forward(out)
    caches.append(("gap", "head", gap_shape))
    logits, aff_x = _affine_forward(pooled, p["head.w"], p["head.b"])
    caches.append(("affine", "head", aff_x))
    if want_caches:
        return logits, caches
    return logits


def loss_and_grad(state: ParamState, batch: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy and its exact gradients w.r.t. every parameter."""
    labels = np.asarray(labels)
    cfg = state.config
    if labels.ndim != 1 or len(labels) != len(batch):
        raise ValueError("labels must be a vector aligned with the batch")
    if labels.min() < 0 or labels.max() >= cfg.n_classes:
        raise ValueError("labels out of range")
    logits, caches = forward(state, batch, want_caches=True)
    n = len(labels)
    probs = softmax(logits)
    eps_floor = np.finfo(logits.dtype).tiny
    loss = float(-np.log(np.maximum(probs[np.arange(n), labels], eps_floor)).mean())

    dlogits = probs.copy()
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n

    p = state.params
    grads: dict[str, np.ndarray] = {}
    kind, name, aff_x = caches.pop()
    dpooled, grads["head.w"], grads["head.b"] = _affine_backward(dlogits, aff_x,
                                                                 p["head.w"])
    kind, name, gap_shape = caches.pop()
    dout = _gap_backward(dpooled, gap_shape)
    for i in range(cfg.n_blocks - 1, -1, -1):
        kind, prefix, (c1, m1, c2, cp, m_out) = caches.pop()
        dsum = _relu_backward(dout, m_out)
        if cp is not None:
            dsc, grads[f"{prefix}.proj.w"], grads[f"{prefix}.proj.b"] = \
                _conv2d_backward(dsum, cp)
        else:
            dsc = dsum
        dh1r, grads[f"{prefix}.conv2.w"], grads[f"{prefix}.conv2.b"] = \
            _conv2d_backward(dsum, c2)
        dh1 = _relu_backward(dh1r, m1)
        dident, grads[f"{prefix}.conv1.w"], grads[f"{prefix}.conv1.b"] = \
            _conv2d_backward(dh1, c1)
        dout = dident + dsc
    kind, name, mask = caches.pop()
    dout = _relu_backward(dout, mask)
    kind, name, cache = caches.pop()
    _, grads["stem.w"], grads["stem.b"] = _conv2d_backward(dout, cache)
    return loss, grads


def adamw_step(state: ParamState, grads: dict[str, np.ndarray],
               hyper: OptimizerHyper, lr_now: float) -> ParamState:
    """One decoupled-weight-decay Adam update; mutates and returns the state."""
    t = state.step + 1
    b1, b2 = hyper.beta1, hyper.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for name, p in state.params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        m_hat = m / bc1
        v_hat = v / bc2
        p -= (lr_now * (m_hat / (np.sqrt(v_hat) + hyper.eps)
                        + hyper.weight_decay * p)).astype(p.dtype, copy=False)
    state.step = t
    return state


def lr_at(epoch: int, hyper: OptimizerHyper) -> float:
    """Step-decayed learning rate for a 0-based epoch index."""
    return hyper.learning_rate * hyper.lr_decay_factor ** (epoch // hyper.lr_decay_every)


def predict(state: ParamState, images: np.ndarray, batch_size: int = 2048) -> np.ndarray:
    """Argmax class ids; ties resolve to the smallest class id."""
    out = np.empty(len(images), dtype=np.int64)
    for lo in range(0, len(images), batch_size):
        hi = min(lo + batch_size, len(images))
        out[lo:hi] = np.argmax(forward(state, images[lo:hi]), axis=1)
    return out


# -- training loop -------------------------------------------------------------


def _cell_macro_recall(pred: np.ndarray, classes: np.ndarray,
                       domains: np.ndarray) -> float:
    """Mean per-(class, domain)-cell recall over cells with support."""
    cells: dict[tuple[int, int], list[int]] = {}
    for p_i, c_i, d_i in zip(pred, classes, domains):
        cells.setdefault((int(c_i), int(d_i)), []).append(int(p_i == c_i))
    if not cells:
        return float("nan")
    return float(np.mean([np.mean(hits) for hits in cells.values()]))


def train(grid: DatasetGrid, plan: SplitPlan, model_config: ModelConfig,
          hyper: OptimizerHyper, seed: int,
          preprocess_spec: PreprocessSpec | None = None
          ) -> tuple[ParamState, TrainReport]:
    """Mini-batch AdamW over the plan's train uids, best-validation checkpointing.

    Validation score is the cell-macro recall on the plan's val uids; the
    returned parameters are those of the best epoch (ties: earliest).  Plans
    with no validation samples select the final epoch.  Fully deterministic
    in (grid, plan, configs, seed) under single-threaded execution.
    """
    t_start = time.perf_counter()
    train_uids = plan.all_train_uids()
    if not train_uids:
        raise ConfigError("plan has no training samples")
    x_train, y_train, _ = grid.gather(train_uids)
    val_uids = plan.all_val_uids()
    if val_uids:
        x_val, y_val, d_val = grid.gather(val_uids)
    else:
        x_val = y_val = d_val = None

    base_spec = None
    augment = False
    if preprocess_spec is not None:
        augment = preprocess_spec.random_translate_max > 0.0
        base_spec = preprocess_spec
        x_train = preprocess_batch(x_train, base_spec, "eval")
        if x_val is not None:
            x_val = preprocess_batch(x_val, base_spec, "eval")

    state = init_model(model_config, seed)
    n = len(train_uids)
    losses = []
    scores = []
    best_score = -np.inf
    best_epoch = 0
    best_params = {k: p.copy() for k, p in state.params.items()}
    for epoch in range(hyper.epochs):
        state.epoch = epoch
        lr_now = lr_at(epoch, hyper)
        order = Stream(derive(seed, "shuffle", epoch)).permutation(n)
        total_loss = 0.0
        for lo in range(0, n, hyper.batch_size):
            idx = order[lo:lo + hyper.batch_size]
            xb = x_train[idx]
            if augment:
                shift_stream = Stream(derive(seed, "augment", epoch, lo))
                xb = preprocess_batch(
                    xb, base_spec, "train", stream=shift_stream)
            loss, grads = loss_and_grad(state, xb, y_train[idx])
            adamw_step(state, grads, hyper, lr_now)
            total_loss += loss * len(idx)
        losses.append(total_loss / n)

        if x_val is not None:
            pred = predict(state, x_val)
            score = _cell_macro_recall(pred, y_val, d_val)
        else:
            score = float("nan")
        scores.append(score)
        if not np.isnan(score) and score > best_score:
            best_score = score
            best_epoch = epoch
            best_params = {k: p.copy() for k, p in state.params.items()}

    if x_val is None:
        best_epoch = hyper.epochs - 1
        best_params = state.params
    state.params = best_params
    state.epoch = best_epoch
    report = TrainReport(train_losses=tuple(losses), val_scores=tuple(scores),
                         selected_epoch=best_epoch,
                         wall_seconds=time.perf_counter() - t_start)
    return state, report


# -- checkpoint I/O ------------------------------------------------------------


def save_checkpoint(path: str, state: ParamState) -> None:
    """Binary checkpoint: magic, version, config echo, float32 LE tensors in
    declaration order.  Optimizer moments are not persisted."""
    cfg_json = json.dumps({
        "input_size": state.config.input_size,
        "channels": state.config.channels,
        "stem_width": state.config.stem_width,
        "n_blocks": state.config.n_blocks,
        "n_classes": state.config.n_classes,
    }, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(cfg_json)))
        fh.write(cfg_json)
        fh.write(struct.pack("<QI", state.step, state.epoch))
        names = [name for name, _, _ in param_specs(state.config)]
        fh.write(struct.pack("<I", len(names)))
        for name in names:
            tensor = np.ascontiguousarray(state.params[name], dtype="<f4")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", tensor.ndim))
            fh.write(struct.pack(f"<{tensor.ndim}I", *tensor.shape))
            fh.write(tensor.tobytes())


def load_checkpoint(path: str) -> ParamState:
    with open(path, "rb") as fh:
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise ConfigError(f"{path!r} is not a gridbench checkpoint")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise ConfigError(f"unsupported checkpoint version {version}")
        (cfg_len,) = struct.unpack("<I", fh.read(4))
        cfg = json.loads(fh.read(cfg_len).decode("utf-8"))
        config = ModelConfig(**cfg)
        step, epoch = struct.unpack("<QI", fh.read(12))
        (n_tensors,) = struct.unpack("<I", fh.read(4))
        params: dict[str, np.ndarray] = {}
        for _ in range(n_tensors):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            count = int(np.prod(shape))
            data = np.frombuffer(fh.read(4 * count), dtype="<f4")
            params[name] = data.reshape(shape).astype(np.float32)
    zeros = {k: np.zeros_like(p) for k, p in params.items()}
    return ParamState(config=config, params=params, m=zeros,
                      v={k: z.copy() for k, z in zeros.items()},
                      step=step, epoch=epoch)
