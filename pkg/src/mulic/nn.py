"""Hand-written CNN: conv(1->32, 3x3) -> ReLU -> linear(->128) -> ReLU -> linear(->5) -> softmax.

Everything is float64 and single-path so that gradients can be checked
against finite differences at tight tolerance.
"""
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import BadMagicError, IntegrityError, TruncatedFileError, VersionMismatchError

PARAM_NAMES = ("conv_w", "conv_b", "fc1_w", "fc1_b", "fc2_w", "fc2_b")
PROB_FLOOR = 1e-12
CHECKPOINT_MAGIC = b"MULC"
CHECKPOINT_VERSION = 1


class NumericFaultError(FloatingPointError):
    def __init__(self, layer):
        super().__init__(f"non-finite activation in layer {layer!r}")
        self.layer = layer


class StaleCacheError(RuntimeError):
    pass


@dataclass
class CnnParams:
    conv_w: np.ndarray
    conv_b: np.ndarray
    fc1_w: np.ndarray
    fc1_b: np.ndarray
    fc2_w: np.ndarray
    fc2_b: np.ndarray
    version: int = field(default=0, compare=False)

    def arrays(self):
        return [getattr(self, n) for n in PARAM_NAMES]

    def items(self):
        return [(n, getattr(self, n)) for n in PARAM_NAMES]

    def copy(self):
        return CnnParams(*(a.copy() for a in self.arrays()))

    def zeros_like(self):
        return CnnParams(*(np.zeros_like(a) for a in self.arrays()))

    @property
    def kernel(self):
        return self.conv_w.shape[-1]

    def equals(self, other):
        return all(np.array_equal(a, b) for a, b in zip(self.arrays(), other.arrays()))


@dataclass
class AdamState:
    m: CnnParams
    v: CnnParams
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, params):
        return cls(params.zeros_like(), params.zeros_like())


@dataclass
class ForwardResult:
    logits: np.ndarray
    probs: np.ndarray
    cache: dict


def init_params(rng, map_size=28, channels=32, hidden=128, n_classes=5, kernel=3):
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases, layer by layer."""
    side = map_size - kernel + 1
    shapes = [
        ((channels, 1, kernel, kernel), kernel * kernel),
        ((channels,), kernel * kernel),
        ((hidden, channels * side * side), channels * side * side),
        ((hidden,), channels * side * side),
        ((n_classes, hidden), hidden),
        ((n_classes,), hidden),
    ]
    arrays = []
    for shape, fan_in in shapes:
        bound = 1.0 / np.sqrt(fan_in)
        arrays.append(rng.uniform(-bound, bound, size=shape))
    return CnnParams(*arrays)


def _patches(x, k):
    # [B, 1, H, W] -> [B, (H-k+1)*(W-k+1), k*k]
    win = sliding_window_view(x[:, 0], (k, k), axis=(1, 2))
    B, oh, ow = win.shape[:3]
    return win.reshape(B, oh * ow, k * k), oh, ow


def _check_batch(batch, params):
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim == 3:
        batch = batch[:, None]
    if batch.ndim != 4 or batch.shape[1] != 1:
        raise ValueError(f"expected a [B, 1, H, W] batch, got shape {batch.shape}")
    k = params.kernel
    side_h, side_w = batch.shape[2] - k + 1, batch.shape[3] - k + 1
    expected = params.conv_w.shape[0] * side_h * side_w
    if expected != params.fc1_w.shape[1]:
        raise ValueError(f"map of shape {batch.shape[2:]} feeds {expected} features, fc1 expects {params.fc1_w.shape[1]}")
    return batch


def conv2d_forward(x, conv_w, conv_b):
    """Valid, stride-1 convolution of single-channel maps: ``[B,1,H,W] -> [B,O,H-k+1,W-k+1]``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4 or x.shape[1] != 1:
        raise ValueError(f"expected [B, 1, H, W], got {x.shape}")
    O, C, k, k2 = conv_w.shape
    if C != 1 or k != k2 or conv_b.shape != (O,):
        raise ValueError(f"bad kernel shapes {conv_w.shape}, {conv_b.shape}")
    P, oh, ow = _patches(x, k)
    out = np.matmul(conv_w.reshape(O, k * k), P.transpose(0, 2, 1)) + conv_b[:, None]
    return out.reshape(x.shape[0], O, oh, ow)


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def forward(params, batch):
    batch = _check_batch(batch, params)
    B = batch.shape[0]
    k = params.kernel
    O = params.conv_w.shape[0]
    P, _, _ = _patches(batch, k)
    z1 = np.matmul(params.conv_w.reshape(O, k * k), P.transpose(0, 2, 1)) + params.conv_b[:, None]
    if not np.isfinite(z1).all():
        raise NumericFaultError("conv")
    a1 = np.maximum(z1, 0.0).reshape(B, -1)
    z2 = a1 @ params.fc1_w.T + params.fc1_b
    if not np.isfinite(z2).all():
        raise NumericFaultError("fc1")
    a2 = np.maximum(z2, 0.0)
    logits = a2 @ params.fc2_w.T + params.fc2_b
    if not np.isfinite(logits).all():
        raise NumericFaultError("fc2")
    probs = softmax(logits)
    cache = {
        "token": (id(params), params.version),
        "P": P, "z1": z1, "a1": a1, "z2": z2, "a2": a2, "probs": probs,
    }
    return ForwardResult(logits, probs, cache)


def cross_entropy(probs, labels):
    """Return ``(mean_loss, per_sample)`` with probabilities floored at 1e-12."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if labels.shape != (probs.shape[0],):
        raise ValueError(f"{labels.shape[0] if labels.ndim else 'scalar'} labels for {probs.shape[0]} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= probs.shape[1]):
        raise ValueError(f"labels must lie in [0, {probs.shape[1] - 1}]")
    picked = probs[np.arange(len(labels)), labels.astype(np.int64)]
    per_sample = -np.log(np.maximum(picked, PROB_FLOOR))
    return float(per_sample.mean()), per_sample


def backward(params, cache, labels):
    """Gradients of the mean cross-entropy for the batch that produced ``cache``."""
    if cache.get("token") != (id(params), params.version):
        raise StaleCacheError("cache was produced by different or since-updated parameters")
    labels = np.asarray(labels, dtype=np.int64)
    probs = cache["probs"]
    B = probs.shape[0]
    if labels.shape != (B,):
        raise StaleCacheError(f"{labels.size} labels for a cached batch of {B}")
    O, _, k, _ = params.conv_w.shape

    d_logits = probs.copy()
    d_logits[np.arange(B), labels] -= 1.0
    d_logits /= B

    g_fc2_w = d_logits.T @ cache["a2"]
    g_fc2_b = d_logits.sum(axis=0)
    d_z2 = d_logits @ params.fc2_w
    d_z2 *= cache["z2"] > 0

    g_fc1_w = d_z2.T @ cache["a1"]
    g_fc1_b = d_z2.sum(axis=0)
    d_z1 = (d_z2 @ params.fc1_w).reshape(cache["z1"].shape)
    d_z1 *= cache["z1"] > 0

    g_conv_w = np.tensordot(d_z1, cache["P"], axes=([0, 2], [0, 1])).reshape(O, 1, k, k)
    g_conv_b = d_z1.sum(axis=(0, 2))
    return CnnParams(g_conv_w, g_conv_b, g_fc1_w, g_fc1_b, g_fc2_w, g_fc2_b)


@numba.njit(cache=True)
def _adam_kernel(p, g, m, v, b1, b2, step, root_corr, eps):
    # one fused pass; the parameter tensors are large enough that numpy
    # temporaries dominate the update otherwise
    for i in range(p.size):
        gi = g[i]
        mi = b1 * m[i] + (1.0 - b1) * gi
        vi = b2 * v[i] + (1.0 - b2) * (gi * gi)
        m[i] = mi
        v[i] = vi
        p[i] -= step * mi / (np.sqrt(vi) / root_corr + eps)


def adam_step(params, grads, state, lr):
    """One bias-corrected Adam update, applied in place; returns ``(params, state)``."""
    if not lr > 0:
        raise ValueError("lr must be positive")
    for name in PARAM_NAMES:
        p, g = getattr(params, name), getattr(grads, name)
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, expected {p.shape}")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    step = lr / (1.0 - b1 ** t)
    root_corr = np.sqrt(1.0 - b2 ** t)
    for name in PARAM_NAMES:
        p, m, v = getattr(params, name), getattr(state.m, name), getattr(state.v, name)
        if not (p.flags.c_contiguous and m.flags.c_contiguous and v.flags.c_contiguous):
            raise ValueError(f"{name}: parameter and moment arrays must be C-contiguous")
        g = np.ascontiguousarray(getattr(grads, name), dtype=np.float64)
        _adam_kernel(p.reshape(-1), g.reshape(-1), m.reshape(-1), v.reshape(-1), b1, b2, step, root_corr, state.eps)
    params.version += 1
    return params, state


# -- checkpoint file ----------------------------------------------------------
#
# "MULC" | version u16 | n_tensors u16 | has_adam u8 | adam step u64 |
# per tensor: name_len u8, name, ndim u8, dims u32 * ndim
# payload: params (, m, v) as f64 little-endian in table order

_CK_HEAD = struct.Struct("<4sHHBQ")


def save_checkpoint(path, params, adam=None):
    chunks = [_CK_HEAD.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(PARAM_NAMES), adam is not None, adam.step_count if adam else 0)]
    for name, arr in params.items():
        raw = name.encode()
        chunks.append(struct.pack("<B", len(raw)) + raw + struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
    groups = [params] + ([adam.m, adam.v] if adam is not None else [])
    for group in groups:
        for arr in group.arrays():
            chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path):
    """Return ``(params, adam_state_or_None)``."""
    buf = Path(path).read_bytes()
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(buf):
            raise TruncatedFileError(f"checkpoint truncated while reading {what} at byte {pos}")
        out = buf[pos:pos + n]
        pos += n
        return out

    if take(4, "magic") != CHECKPOINT_MAGIC:
        raise BadMagicError(f"bad magic {buf[:4]!r}, expected {CHECKPOINT_MAGIC!r}")
    version, n_tensors, has_adam, step = struct.unpack("<HHBQ", take(_CK_HEAD.size - 4, "header"))
    if version != CHECKPOINT_VERSION:
        raise VersionMismatchError(f"checkpoint version {version} not supported (expected {CHECKPOINT_VERSION})")
    table = []
    for _ in range(n_tensors):
        (n,) = struct.unpack("<B", take(1, "tensor table"))
        name = take(n, "tensor table").decode()
        (ndim,) = struct.unpack("<B", take(1, "tensor table"))
        table.append((name, struct.unpack(f"<{ndim}I", take(4 * ndim, "tensor table"))))
    if [name for name, _ in table] != list(PARAM_NAMES):
        raise IntegrityError(f"tensor table {[n for n, _ in table]} does not match {list(PARAM_NAMES)}")

    def read_group(what):
        out = []
        for name, shape in table:
            count = int(np.prod(shape))
            out.append(np.frombuffer(take(8 * count, f"{what}.{name}"), dtype="<f8").reshape(shape).astype(np.float64))
        return CnnParams(*out)

    params = read_group("params")
    adam = None
    if has_adam:
        adam = AdamState(read_group("m"), read_group("v"), step_count=step)
    if pos != len(buf):
        raise IntegrityError(f"{len(buf) - pos} trailing bytes in checkpoint")
    return params, adam
