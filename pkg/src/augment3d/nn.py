"""A small 3D CNN for binary volume classification, written on numpy.

Architecture: ``conv3d(valid) + ReLU`` blocks with optional 2x2x2 max
pooling after selected blocks, flatten, ``dense + ReLU``, then a single
sigmoid unit. Parameters are stored as float32 (or float64 for gradient
checking); all forward/backward arithmetic runs in float64.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .rng import RngStream

BCE_EPS = 1e-7


class ShapeMismatch(ValueError):
    pass


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    input_shape: Tuple[int, int, int] = (61, 73, 61)
    conv_channels: Tuple[int, ...] = (8, 8, 16)
    kernel: int = 3
    pool_after: Tuple[int, ...] = (0, 1)
    dense_units: int = 16
    output_units: int = 1

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(n) for n in self.input_shape))
        object.__setattr__(self, "conv_channels", tuple(int(c) for c in self.conv_channels))
        object.__setattr__(self, "pool_after", tuple(sorted({int(i) for i in self.pool_after})))
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ConfigError(f"input_shape must be 3 positive ints, got {self.input_shape}")
        if not self.conv_channels or min(self.conv_channels) < 1:
            raise ConfigError("at least one conv layer with a positive channel count is required")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigError(f"kernel must be odd and >= 1, got {self.kernel}")
        if any(i < 0 or i >= len(self.conv_channels) for i in self.pool_after):
            raise ConfigError(f"pool_after {self.pool_after} refers to missing conv layers")
        if self.dense_units < 1:
            raise ConfigError("dense_units must be positive")
        if self.output_units != 1:
            raise ConfigError("only a single sigmoid output unit is supported")
        self.feature_shapes()

    def feature_shapes(self) -> List[Tuple[int, int, int, int]]:
        """Activation shape ``(C, X, Y, Z)`` after every conv and pool stage."""
        shapes = []
        spatial = self.input_shape
        for i, ch in enumerate(self.conv_channels):
            spatial = tuple(n - self.kernel + 1 for n in spatial)
            if min(spatial) < 1:
                raise ConfigError(f"conv layer {i} shrinks input {self.input_shape} below 1 voxel")
            shapes.append((ch,) + spatial)
            if i in self.pool_after:
                if min(spatial) < 2:
                    raise ConfigError(f"pool after conv {i} needs spatial dims >= 2, got {spatial}")
                spatial = tuple(n // 2 for n in spatial)
                shapes.append((ch,) + spatial)
        return shapes

    @property
    def flat_features(self) -> int:
        return int(np.prod(self.feature_shapes()[-1]))

    def param_shapes(self) -> Dict[str, Tuple[int, ...]]:
        shapes = {}
        cin = 1
        k = self.kernel
        for i, cout in enumerate(self.conv_channels):
            shapes[f"conv{i}.w"] = (cout, cin, k, k, k)
            shapes[f"conv{i}.b"] = (cout,)
            cin = cout
        shapes["dense.w"] = (self.flat_features, self.dense_units)
        shapes["dense.b"] = (self.dense_units,)
        shapes["out.w"] = (self.dense_units, self.output_units)
        shapes["out.b"] = (self.output_units,)
        return shapes

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def param_count(config: ModelConfig) -> int:
    return int(sum(np.prod(s) for s in config.param_shapes().values()))


def _fans(name: str, shape) -> Tuple[int, int]:
    if name.startswith("conv"):
        receptive = int(np.prod(shape[2:]))
        return shape[1] * receptive, shape[0] * receptive
    return shape[0], shape[1]


@dataclass
class Model:
    config: ModelConfig
    params: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def init(cls, config: ModelConfig, rng: RngStream, dtype=np.float32) -> "Model":
        """Glorot-uniform weights (limit ``sqrt(6 / (fan_in + fan_out))``), zero biases."""
        params = {}
        for name, shape in config.param_shapes().items():
            if name.endswith(".b"):
                params[name] = np.zeros(shape, dtype=dtype)
            else:
                fan_in, fan_out = _fans(name, shape)
                limit = np.sqrt(6.0 / (fan_in + fan_out))
                n = int(np.prod(shape))
                params[name] = rng.child(name).uniform(-limit, limit, n).reshape(shape).astype(dtype)
        return cls(config, params)

    @classmethod
    def zeros(cls, config: ModelConfig, dtype=np.float32) -> "Model":
        return cls(config, {n: np.zeros(s, dtype=dtype) for n, s in config.param_shapes().items()})

    def copy(self) -> "Model":
        return Model(self.config, {k: v.copy() for k, v in self.params.items()})

    def state(self) -> Dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.params.items()}

    def load_state(self, state: Dict[str, np.ndarray]) -> None:
        for k, v in state.items():
            self.params[k][...] = v

    def equals(self, other: "Model") -> bool:
        return self.config == other.config and all(
            self.params[k].tobytes() == other.params[k].tobytes() for k in self.params
        )


# -- layer kernels ------------------------------------------------------------


def conv3d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Valid, stride-1 cross-correlation.

    Args:
        x: ``(B, C, X, Y, Z)`` or unbatched ``(C, X, Y, Z)``.
        w: ``(O, C, k, k, k)``.
        b: ``(O,)``.

    Returns:
        ``(B, O, X-k+1, Y-k+1, Z-k+1)`` (batch axis dropped if the input had none).
    """
    unbatched = x.ndim == 4
    if unbatched:
        x = x[None]
    k = w.shape[2:]
    if x.shape[1] != w.shape[1]:
        raise ShapeMismatch(f"input has {x.shape[1]} channels, filters expect {w.shape[1]}")
    if any(n < kk for n, kk in zip(x.shape[2:], k)):
        raise ShapeMismatch(f"kernel {k} does not fit input {x.shape[2:]}")
    win = sliding_window_view(x, k, axis=(2, 3, 4))
    out = np.tensordot(win, w, axes=([1, 5, 6, 7], [1, 2, 3, 4]))
    out = np.moveaxis(out, -1, 1) + b[None, :, None, None, None]
    return out[0] if unbatched else out


def conv3d_backward(x: np.ndarray, w: np.ndarray, dout: np.ndarray, need_input_grad: bool = True):
    """Gradients of a valid conv w.r.t. weights, bias and (optionally) input."""
    k = w.shape[2]
    win = sliding_window_view(x, w.shape[2:], axis=(2, 3, 4))
    dw = np.tensordot(dout, win, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
    db = dout.sum(axis=(0, 2, 3, 4))
    dx = None
    if need_input_grad:
        pad = k - 1
        padded = np.pad(dout, ((0, 0), (0, 0), (pad, pad), (pad, pad), (pad, pad)))
        dwin = sliding_window_view(padded, w.shape[2:], axis=(2, 3, 4))
        flipped = w[:, :, ::-1, ::-1, ::-1]
        dx = np.moveaxis(np.tensordot(dwin, flipped, axes=([1, 5, 6, 7], [0, 2, 3, 4])), -1, 1)
    return dw, db, dx


def maxpool3d(x: np.ndarray, window: int = 2):
    """Non-overlapping max pooling; odd trailing planes are dropped.

    Returns the pooled tensor and, per output cell, the argmax position in
    its window (lexicographic x, y, z order; ties go to the lowest index).
    """
    unbatched = x.ndim == 4
    if unbatched:
        x = x[None]
    B, C, X, Y, Z = x.shape
    w = window
    X2, Y2, Z2 = X // w, Y // w, Z // w
    if min(X2, Y2, Z2) < 1:
        raise ShapeMismatch(f"spatial dims {x.shape[2:]} too small for pooling")
    blocks = x[:, :, : X2 * w, : Y2 * w, : Z2 * w].reshape(B, C, X2, w, Y2, w, Z2, w)
    blocks = blocks.transpose(0, 1, 2, 4, 6, 3, 5, 7).reshape(B, C, X2, Y2, Z2, w**3)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    if unbatched:
        return out[0], idx[0]
    return out, idx


def maxpool3d_backward(dout: np.ndarray, idx: np.ndarray, input_shape, window: int = 2) -> np.ndarray:
    B, C, X, Y, Z = input_shape
    w = window
    X2, Y2, Z2 = dout.shape[2:]
    cells = np.zeros((B, C, X2, Y2, Z2, w**3), dtype=dout.dtype)
    np.put_along_axis(cells, idx[..., None], dout[..., None], axis=-1)
    cells = cells.reshape(B, C, X2, Y2, Z2, w, w, w).transpose(0, 1, 2, 5, 3, 6, 4, 7)
    dx = np.zeros(input_shape, dtype=dout.dtype)
    dx[:, :, : X2 * w, : Y2 * w, : Z2 * w] = cells.reshape(B, C, X2 * w, Y2 * w, Z2 * w)
    return dx


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=np.float64)))


def bce_loss(p, y):
    """Binary cross-entropy with ``p`` clamped to ``[1e-7, 1 - 1e-7]``; mean over a batch."""
    p = np.clip(np.asarray(p, dtype=np.float64), BCE_EPS, 1.0 - BCE_EPS)
    y = np.asarray(y, dtype=np.float64)
    return float(np.mean(-(y * np.log(p) + (1.0 - y) * np.log1p(-p))))


# -- whole-network passes -----------------------------------------------------


def _as_batch(model: Model, x) -> np.ndarray:
    from .volume import Volume3

    if isinstance(x, Volume3):
        x = x.data[None]
    elif isinstance(x, (list, tuple)):
        x = np.stack([v.data if isinstance(v, Volume3) else np.asarray(v) for v in x])
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    if x.shape[1:] != model.config.input_shape:
        raise ShapeMismatch(f"input shape {x.shape[1:]} != model input {model.config.input_shape}")
    return x[:, None]


def _forward(model: Model, x: np.ndarray, keep: bool):
    cfg = model.config
    P = {k: v.astype(np.float64, copy=False) for k, v in model.params.items()}
    cache = []
    a = x
    for i in range(len(cfg.conv_channels)):
        z = conv3d_forward(a, P[f"conv{i}.w"], P[f"conv{i}.b"])
        h = np.maximum(z, 0.0)
        entry = {"in": a, "z": z}
        if i in cfg.pool_after:
            pooled, idx = maxpool3d(h)
            entry.update(pool_idx=idx, pre_pool_shape=h.shape)
            h = pooled
        cache.append(entry)
        a = h
    flat = a.reshape(a.shape[0], -1)
    zd = flat @ P["dense.w"] + P["dense.b"]
    hd = np.maximum(zd, 0.0)
    logit = (hd @ P["out.w"] + P["out.b"])[:, 0]
    p = sigmoid(logit)
    if keep:
        return p, dict(convs=cache, flat=flat, flat_shape=a.shape, zd=zd, hd=hd, logit=logit)
    return p, None


def predict(model: Model, x, batch_size: int = 16) -> np.ndarray:
    """Probabilities for a volume, list of volumes, or ``(B, X, Y, Z)`` array."""
    xb = _as_batch(model, x)
    out = [_forward(model, xb[s : s + batch_size], keep=False)[0] for s in range(0, len(xb), batch_size)]
    return np.concatenate(out)


def forward(model: Model, vol) -> float:
    return float(predict(model, vol)[0])


def backward(model: Model, x, y) -> Tuple[Dict[str, np.ndarray], float]:
    """Exact gradients of mean BCE loss over the batch.

    Returns:
        ``(grads, loss)``; ``grads`` maps parameter names to float64 arrays.
    """
    grads, loss, _ = backward_with_probs(model, x, y)
    return grads, loss


def backward_with_probs(model: Model, x, y):
    """:func:`backward` plus the batch probabilities from the same forward pass."""
    cfg = model.config
    xb = _as_batch(model, x)
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    if y.shape[0] != xb.shape[0]:
        raise ShapeMismatch(f"{y.shape[0]} labels for {xb.shape[0]} inputs")
    p, c = _forward(model, xb, keep=True)
    loss = bce_loss(p, y)
    n = xb.shape[0]
    P = {k: v.astype(np.float64, copy=False) for k, v in model.params.items()}
    grads = {}

    clamped = (p < BCE_EPS) | (p > 1.0 - BCE_EPS)
    dlogit = np.where(clamped, 0.0, p - y) / n
    grads["out.w"] = c["hd"].T @ dlogit[:, None]
    grads["out.b"] = np.array([dlogit.sum()])
    dhd = dlogit[:, None] @ P["out.w"].T
    dzd = dhd * (c["zd"] > 0)
    grads["dense.w"] = c["flat"].T @ dzd
    grads["dense.b"] = dzd.sum(axis=0)
    da = (dzd @ P["dense.w"].T).reshape(c["flat_shape"])

    for i in reversed(range(len(cfg.conv_channels))):
        entry = c["convs"][i]
        if "pool_idx" in entry:
            da = maxpool3d_backward(da, entry["pool_idx"], entry["pre_pool_shape"])
        dz = da * (entry["z"] > 0)
        dw, db, dx = conv3d_backward(entry["in"], P[f"conv{i}.w"], dz, need_input_grad=i > 0)
        grads[f"conv{i}.w"] = dw
        grads[f"conv{i}.b"] = db
        da = dx
    return grads, loss, p


# -- optimiser ----------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-7
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_model(cls, model: Model, **hyper) -> "AdamState":
        state = cls(**hyper)
        for k, p in model.params.items():
            state.m[k] = np.zeros(p.shape, dtype=np.float64)
            state.v[k] = np.zeros(p.shape, dtype=np.float64)
        return state


def adam_step(model: Model, grads: Dict[str, np.ndarray], state: AdamState):
    """One bias-corrected Adam update, applied in place.

    Returns ``(model, state)`` for convenience.
    """
    for k, g in grads.items():
        if g.shape != model.params[k].shape:
            raise ShapeMismatch(f"gradient {k} has shape {g.shape}, parameter {model.params[k].shape}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for k, g in grads.items():
        g = np.asarray(g, dtype=np.float64)
        m = state.m.setdefault(k, np.zeros_like(g))
        v = state.v.setdefault(k, np.zeros_like(g))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        step = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        if not step.any():
            continue
        p = model.params[k]
        p[...] = (p.astype(np.float64) - step).astype(p.dtype)
    return model, state


# -- checkpoints --------------------------------------------------------------
#
# Layout (all integers little-endian):
#   8 bytes  magic b"A3DCKPT\x00"
#   u32      format version (1)
#   u32      length L of the config JSON, then L bytes of UTF-8 JSON
#   u32      tensor count N, then N records of:
#              u16 name length, name bytes (UTF-8)
#              u8 ndim, ndim x u32 dims
#              prod(dims) x float32 payload

CKPT_MAGIC = b"A3DCKPT\x00"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(model: Model, path) -> None:
    cfg = json.dumps(model.config.to_dict(), sort_keys=True).encode("utf-8")
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(cfg)), cfg, struct.pack("<I", len(model.params))]
    for name in sorted(model.params):
        arr = model.params[name]
        bname = name.encode("utf-8")
        parts.append(struct.pack("<H", len(bname)) + bname)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> Model:
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise CheckpointError(f"{path} is not a model checkpoint")
    try:
        return _parse_checkpoint(raw)
    except (struct.error, ValueError, TypeError, UnicodeDecodeError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"{path}: malformed checkpoint ({exc})") from exc


def _parse_checkpoint(raw: bytes) -> Model:
    version, clen = struct.unpack_from("<II", raw, 8)
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 16
    config = ModelConfig.from_dict(json.loads(raw[pos : pos + clen].decode("utf-8")))
    pos += clen
    (count,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    params = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        name = raw[pos : pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<B", raw, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", raw, pos)
        pos += 4 * ndim
        n = int(np.prod(shape))
        if pos + 4 * n > len(raw):
            raise CheckpointError(f"tensor {name} is truncated")
        params[name] = np.frombuffer(raw, dtype="<f4", count=n, offset=pos).reshape(shape).astype(np.float32)
        pos += 4 * n
    expected = config.param_shapes()
    if {k: tuple(v.shape) for k, v in params.items()} != expected:
        raise CheckpointError("checkpoint tensors do not match its config")
    return Model(config, params)
