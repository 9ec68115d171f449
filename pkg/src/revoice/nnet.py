"""Minimal neural-network engine: dense and LSTM layers, Adam, early stopping.

Reverse-mode gradients are exact (full backpropagation through time, no
truncation) and are validated against central finite differences in the test
suite. Parameters are float32 by default; float64 is available for the
gradient checks.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

CHECKPOINT_MAGIC = b"PVC1"
CHECKPOINT_VERSION = 1

KINDS = ("feedforward", "recurrent")


class NonFiniteGradientError(FloatingPointError):
    """Gradients blew up; the optimizer step is aborted."""


class CheckpointError(ValueError):
    """Checkpoint file is corrupt or does not match the expected model."""


@dataclass
class ModelConfig:
    kind: str
    input_dim: int
    output_dim: int
    hidden_layers: int = 0  # 0 picks the kind-specific default
    hidden_width: int = 512
    activation: str = "tanh"
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.hidden_layers <= 0:
            self.hidden_layers = 4 if self.kind == "feedforward" else 2
        if self.input_dim <= 0 or self.output_dim <= 0 or self.hidden_width <= 0:
            raise ValueError("dimensions must be positive")
        if self.activation != "tanh":
            raise ValueError("only tanh hidden activation is supported")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch: int = 8
    max_epochs: int = 25
    patience: int = 5
    seed: int = 0

    def __post_init__(self):
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValueError("adam betas must lie in (0, 1)")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")


@dataclass
class Model:
    config: ModelConfig
    params: dict

    def param_names(self):
        return list(self.params.keys())

    def copy_params(self):
        return {k: v.copy() for k, v in self.params.items()}


def _glorot(rng, shape, dtype):
    limit = np.sqrt(6.0 / (shape[0] + shape[1]))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def init_model(cfg: ModelConfig) -> Model:
    rng = np.random.default_rng(cfg.seed)
    dt = np.dtype(cfg.dtype)
    params = {}
    width = cfg.hidden_width
    if cfg.kind == "feedforward":
        d_in = cfg.input_dim
        for layer in range(cfg.hidden_layers):
            params[f"w{layer}"] = _glorot(rng, (d_in, width), dt)
            params[f"b{layer}"] = np.zeros(width, dtype=dt)
            d_in = width
    else:
        d_in = cfg.input_dim
        for layer in range(cfg.hidden_layers):
            params[f"wx{layer}"] = _glorot(rng, (d_in, 4 * width), dt)
            params[f"wh{layer}"] = _glorot(rng, (width, 4 * width), dt)
            bias = np.zeros(4 * width, dtype=dt)
            bias[width : 2 * width] = 1.0  # forget gate starts open
            params[f"b{layer}"] = bias
            d_in = width
    params["w_out"] = _glorot(rng, (d_in, cfg.output_dim), dt)
    params["b_out"] = np.zeros(cfg.output_dim, dtype=dt)
    return Model(cfg, params)


def _sigmoid(x):
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


def forward(model: Model, x: np.ndarray, return_cache: bool = False):
    """Run the network over a batch (B, T, D_in) -> (B, T, D_out).

    A single utterance may be passed as (T, D_in). Recurrent models process
    whole sequences in time order; feedforward models are frame-local.
    """
    squeeze = x.ndim == 2
    if squeeze:
        x = x[None]
    if x.shape[2] != model.config.input_dim:
        raise ValueError(
            f"input dim {x.shape[2]} does not match config {model.config.input_dim}"
        )
    p = model.params
    x = x.astype(p["w_out"].dtype, copy=False)
    cache = {"x": x, "layers": []}

    h = x
    if model.config.kind == "feedforward":
        for layer in range(model.config.hidden_layers):
            z = h @ p[f"w{layer}"] + p[f"b{layer}"]
            a = np.tanh(z)
            cache["layers"].append({"inp": h, "act": a})
            h = a
    else:
        width = model.config.hidden_width
        batch, steps, _ = x.shape
        for layer in range(model.config.hidden_layers):
            wx, wh, b = p[f"wx{layer}"], p[f"wh{layer}"], p[f"b{layer}"]
            pre = h @ wx + b  # input contribution for every step at once
            h_seq = np.zeros((batch, steps, width), dtype=h.dtype)
            lc = {
                "inp": h,
                "i": np.empty_like(h_seq),
                "f": np.empty_like(h_seq),
                "g": np.empty_like(h_seq),
                "o": np.empty_like(h_seq),
                "c": np.empty_like(h_seq),
                "ch": np.empty_like(h_seq),
            }
            h_t = np.zeros((batch, width), dtype=h.dtype)
            c_t = np.zeros((batch, width), dtype=h.dtype)
            for t in range(steps):
                gates = pre[:, t] + h_t @ wh
                i = _sigmoid(gates[:, :width])
                f = _sigmoid(gates[:, width : 2 * width])
                g = np.tanh(gates[:, 2 * width : 3 * width])
                o = _sigmoid(gates[:, 3 * width :])
                c_t = f * c_t + i * g
                ch = np.tanh(c_t)
                h_t = o * ch
                lc["i"][:, t], lc["f"][:, t], lc["g"][:, t] = i, f, g
                lc["o"][:, t], lc["c"][:, t], lc["ch"][:, t] = o, c_t, ch
                h_seq[:, t] = h_t
            cache["layers"].append(lc)
            h = h_seq

    cache["top"] = h
    y = h @ p["w_out"] + p["b_out"]
    if squeeze:
        y = y[0]
    if return_cache:
        return y, cache
    return y


def mse_loss(pred: np.ndarray, target: np.ndarray, mask: np.ndarray | None = None):
    """Mean squared error over unmasked frame-elements and its gradient."""
    if pred.ndim == 2:
        pred = pred[None]
    if target.ndim == 2:
        target = target[None]
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    if mask is None:
        mask = np.ones(pred.shape[:2], dtype=bool)
    mask = mask.astype(bool)
    n = int(mask.sum()) * pred.shape[2]
    if n == 0:
        raise ValueError("mask excludes every frame")
    diff = (pred - target) * mask[..., None]
    loss = float(np.sum(diff * diff) / n)
    grad = (2.0 / n) * diff
    return loss, grad.astype(pred.dtype)


def backward(model: Model, cache: dict, grad_out: np.ndarray) -> dict:
    """Exact parameter gradients for the batch that produced `cache`."""
    p = model.params
    if grad_out.ndim == 2:
        grad_out = grad_out[None]
    grad_out = grad_out.astype(p["w_out"].dtype, copy=False)
    grads = {}
    top = cache["top"]
    flat_top = top.reshape(-1, top.shape[2])
    flat_gy = grad_out.reshape(-1, grad_out.shape[2])
    grads["w_out"] = flat_top.T @ flat_gy
    grads["b_out"] = flat_gy.sum(axis=0)
    dh = grad_out @ p["w_out"].T

    if model.config.kind == "feedforward":
        for layer in range(model.config.hidden_layers - 1, -1, -1):
            lc = cache["layers"][layer]
            dz = dh * (1.0 - lc["act"] ** 2)
            flat_in = lc["inp"].reshape(-1, lc["inp"].shape[2])
            flat_dz = dz.reshape(-1, dz.shape[2])
            grads[f"w{layer}"] = flat_in.T @ flat_dz
            grads[f"b{layer}"] = flat_dz.sum(axis=0)
            dh = dz @ p[f"w{layer}"].T
    else:
        width = model.config.hidden_width
        for layer in range(model.config.hidden_layers - 1, -1, -1):
            lc = cache["layers"][layer]
            wx, wh = p[f"wx{layer}"], p[f"wh{layer}"]
            inp = lc["inp"]
            batch, steps, _ = inp.shape
            g_wx = np.zeros_like(wx)
            g_wh = np.zeros_like(wh)
            g_b = np.zeros_like(p[f"b{layer}"])
            dx = np.zeros_like(inp)
            dh_next = np.zeros((batch, width), dtype=inp.dtype)
            dc_next = np.zeros((batch, width), dtype=inp.dtype)
            for t in range(steps - 1, -1, -1):
                i, f, g = lc["i"][:, t], lc["f"][:, t], lc["g"][:, t]
                o, ch = lc["o"][:, t], lc["ch"][:, t]
                c_prev = lc["c"][:, t - 1] if t > 0 else np.zeros_like(ch)
                dh_t = dh[:, t] + dh_next
                dc = dh_t * o * (1.0 - ch * ch) + dc_next
                da = np.empty((batch, 4 * width), dtype=inp.dtype)
                da[:, :width] = dc * g * i * (1.0 - i)
                da[:, width : 2 * width] = dc * c_prev * f * (1.0 - f)
                da[:, 2 * width : 3 * width] = dc * i * (1.0 - g * g)
                da[:, 3 * width :] = dh_t * ch * o * (1.0 - o)
                g_wx += inp[:, t].T @ da
                if t > 0:  # h at t-1 is o * tanh(c); zero before the first step
                    h_prev = lc["o"][:, t - 1] * lc["ch"][:, t - 1]
                    g_wh += h_prev.T @ da
                g_b += da.sum(axis=0)
                dx[:, t] = da @ wx.T
                dh_next = da @ wh.T
                dc_next = dc * f
            grads[f"wx{layer}"] = g_wx
            grads[f"wh{layer}"] = g_wh
            grads[f"b{layer}"] = g_b
            dh = dx
    return grads


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_step(model: Model, grads: dict, state: AdamState, cfg: TrainConfig) -> None:
    """One Adam update in place; refuses non-finite gradients."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient in {name}")
    if not state.m:
        state.m = {k: np.zeros_like(v) for k, v in model.params.items()}
        state.v = {k: np.zeros_like(v) for k, v in model.params.items()}
    state.step += 1
    t = state.step
    b1, b2 = cfg.beta1, cfg.beta2
    for name, g in grads.items():
        g = g.astype(model.params[name].dtype, copy=False)
        state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        m_hat = state.m[name] / (1.0 - b1**t)
        v_hat = state.v[name] / (1.0 - b2**t)
        model.params[name] -= cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.eps)


def _make_batches(data, order, batch_size):
    for start in range(0, len(order), batch_size):
        chunk = [data[i] for i in order[start : start + batch_size]]
        steps = max(x.shape[0] for x, _ in chunk)
        d_in = chunk[0][0].shape[1]
        d_out = chunk[0][1].shape[1]
        xb = np.zeros((len(chunk), steps, d_in), dtype=np.float32)
        yb = np.zeros((len(chunk), steps, d_out), dtype=np.float32)
        mask = np.zeros((len(chunk), steps), dtype=bool)
        for row, (x, y) in enumerate(chunk):
            xb[row, : x.shape[0]] = x
            yb[row, : y.shape[0]] = y
            mask[row, : x.shape[0]] = True
        yield xb, yb, mask


def _dataset_mse(model, data, batch_size):
    total_sq = 0.0
    total_n = 0
    for xb, yb, mask in _make_batches(data, range(len(data)), batch_size):
        pred = forward(model, xb)
        diff = (pred - yb) * mask[..., None]
        total_sq += float(np.sum(diff.astype(np.float64) ** 2))
        total_n += int(mask.sum()) * yb.shape[2]
    return total_sq / total_n


def train(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    train_data,
    dev_data,
    log=None,
):
    """Adam training with per-epoch dev evaluation and early stopping.

    Keeps the parameters of the best dev epoch and stops after `patience`
    epochs without improvement. Returns (model, history); history has one
    entry per epoch with train and dev MSE.
    """
    if not train_data or not dev_data:
        raise ValueError("train and dev splits must be non-empty")
    model = init_model(model_cfg)
    state = AdamState()
    rng = np.random.default_rng(train_cfg.seed)
    history = []
    best_dev = np.inf
    best_params = model.copy_params()
    best_epoch = -1

    for epoch in range(train_cfg.max_epochs):
        order = rng.permutation(len(train_data))
        total_sq = 0.0
        total_n = 0
        for xb, yb, mask in _make_batches(train_data, order, train_cfg.batch):
            pred, cache = forward(model, xb, return_cache=True)
            loss, grad = mse_loss(pred, yb, mask)
            grads = backward(model, cache, grad)
            adam_step(model, grads, state, train_cfg)
            n = int(mask.sum()) * yb.shape[2]
            total_sq += loss * n
            total_n += n
        train_mse = total_sq / total_n
        dev_mse = _dataset_mse(model, dev_data, train_cfg.batch)
        history.append({"epoch": epoch, "train_mse": train_mse, "dev_mse": dev_mse})
        if log:
            log(f"epoch {epoch}: train {train_mse:.6f} dev {dev_mse:.6f}")
        if dev_mse < best_dev:
            best_dev = dev_mse
            best_params = model.copy_params()
            best_epoch = epoch
        elif epoch - best_epoch >= train_cfg.patience:
            break

    model.params = best_params
    return model, history


# ---------------------------------------------------------------------------
# Checkpoints: "PVC1", u32 version, config JSON, then named f32 tensors


def save_checkpoint(model: Model, path) -> None:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    cfg_json = json.dumps(asdict(model.config), sort_keys=True).encode()
    buf.write(struct.pack("<I", len(cfg_json)))
    buf.write(cfg_json)
    buf.write(struct.pack("<I", len(model.params)))
    for name, tensor in model.params.items():
        nb = name.encode()
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<I", tensor.ndim))
        for dim in tensor.shape:
            buf.write(struct.pack("<I", dim))
        buf.write(np.ascontiguousarray(tensor, dtype="<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path, expect_kind: str | None = None) -> Model:
    with open(path, "rb") as fh:
        blob = fh.read()

    view = memoryview(blob)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointError(f"{path}: truncated checkpoint")
        out = view[pos : pos + n]
        pos += n
        return out

    if bytes(take(4)) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad checkpoint magic")
    version = struct.unpack("<I", take(4))[0]
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    cfg_len = struct.unpack("<I", take(4))[0]
    cfg = ModelConfig(**json.loads(bytes(take(cfg_len)).decode()))
    if expect_kind is not None and cfg.kind != expect_kind:
        raise CheckpointError(
            f"{path}: checkpoint holds a {cfg.kind} model, expected {expect_kind}"
        )
    n_tensors = struct.unpack("<I", take(4))[0]
    params = {}
    for _ in range(n_tensors):
        name_len = struct.unpack("<I", take(4))[0]
        name = bytes(take(name_len)).decode()
        ndim = struct.unpack("<I", take(4))[0]
        shape = tuple(struct.unpack("<I", take(4))[0] for _ in range(ndim))
        count = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(take(4 * count), dtype="<f4").reshape(shape)
        params[name] = data.astype(np.dtype(cfg.dtype)).copy()
    if pos != len(blob):
        raise CheckpointError(f"{path}: trailing bytes after checkpoint payload")

    template = init_model(cfg)
    if set(template.params) != set(params):
        raise CheckpointError(f"{path}: tensor names do not match the config")
    for name, tensor in params.items():
        if tensor.shape != template.params[name].shape:
            raise CheckpointError(
                f"{path}: tensor {name} has shape {tensor.shape}, "
                f"config implies {template.params[name].shape}"
            )
    return Model(cfg, params)
