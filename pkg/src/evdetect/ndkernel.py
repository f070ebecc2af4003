"""Layer primitives with hand-written backward passes.

Activations use the (N, channels, space, time) layout throughout. Every
``*_forward`` returns ``(out, cache)`` and the matching ``*_backward``
consumes that cache, so a cache belongs to exactly one call.

Only what the detector needs is here: stride-1 convolutions with zero
padding, batch normalisation, ReLU, temporal max pooling with kernel (1, 2),
a grouped softmax and SGD with momentum.
"""

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import kernels


class ContractError(ValueError):
    """Raised when a layer receives inputs that break its shape contract."""


# --------------------------------------------------------------------------
# convolution


def conv2d_forward(x, w, b=None, pad=(0, 0)):
    """Stride-1 cross-correlation with zero padding.

    Parameters
    ----------
    x : ndarray, shape (N, Cin, H, W)
    w : ndarray, shape (Cout, Cin, kh, kw)
    b : ndarray, shape (Cout,), optional
    pad : (int, int)
        Zeros added on both sides of the space and time axes.

    Returns
    -------
    out : ndarray, shape (N, Cout, H + 2*ph - kh + 1, W + 2*pw - kw + 1)
    cache : tuple
    """
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ContractError(f"conv2d: input {x.shape} incompatible with kernel {w.shape}")
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    ph, pw = pad
    hp, wp = h + 2 * ph, wd + 2 * pw
    if hp < kh or wp < kw:
        raise ContractError(f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    if ph or pw:
        xp = np.zeros((n, cin, hp, wp), dtype=x.dtype)
        xp[:, :, ph : ph + h, pw : pw + wd] = x
    else:
        xp = np.ascontiguousarray(x)
    ho, wo = hp - kh + 1, wp - kw + 1
    cols = kernels.im2col(xp, kh, kw)
    wmat = w.reshape(cout, -1)
    out = cols @ wmat.T
    if b is not None:
        out += b
    out = np.ascontiguousarray(out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2))
    return out, (cols, x.shape, w, pad, b is not None)


def conv2d_backward(dout, cache):
    """Gradients of :func:`conv2d_forward` w.r.t. input, kernel and bias."""
    if cache is None:
        raise ContractError("conv2d_backward called without a forward cache")
    cols, xshape, w, pad, has_bias = cache
    n, cin, h, wd = xshape
    cout, _, kh, kw = w.shape
    ph, pw = pad
    if dout.shape[:2] != (n, cout):
        raise ContractError(f"conv2d_backward: grad shape {dout.shape} does not match output")
    g = np.ascontiguousarray(dout.transpose(0, 2, 3, 1)).reshape(-1, cout)
    dw = (g.T @ cols).reshape(w.shape)
    db = g.sum(axis=0) if has_bias else None
    dcols = g @ w.reshape(cout, -1)
    dxp = kernels.col2im(dcols, n, cin, h + 2 * ph, wd + 2 * pw, kh, kw)
    dx = dxp[:, :, ph : ph + h, pw : pw + wd]
    return np.ascontiguousarray(dx), dw, db


# --------------------------------------------------------------------------
# batch normalisation


@dataclass
class BatchNormState:
    """Running statistics of one batch-norm layer."""

    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1

    @classmethod
    def fresh(cls, channels, dtype=np.float32):
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


def batchnorm2d_forward(x, gamma, beta, state, mode="train"):
    """Normalise each channel over (N, H, W), then scale and shift.

    In ``train`` mode batch statistics are used and ``state`` is updated
    in place with an exponential moving average; ``eval`` mode uses the
    running statistics.
    """
    if x.ndim != 4 or x.shape[1] != gamma.shape[0]:
        raise ContractError(f"batchnorm: {x.shape[1]} channels, params for {gamma.shape[0]}")
    if mode == "train":
        mean, var = kernels.channel_moments(np.ascontiguousarray(x))
        m = state.momentum
        state.running_mean[...] = (1 - m) * state.running_mean + m * mean
        state.running_var[...] = (1 - m) * state.running_var + m * var
    elif mode == "eval":
        mean = state.running_mean.astype(np.float64)
        var = state.running_var.astype(np.float64)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    inv_std = (1.0 / np.sqrt(var + state.eps)).astype(x.dtype)
    xhat = (x - mean.astype(x.dtype)[None, :, None, None]) * inv_std[None, :, None, None]
    out = xhat * gamma[None, :, None, None] + beta[None, :, None, None]
    return out, (xhat, inv_std, gamma, mode)


def batchnorm2d_backward(dout, cache):
    """Gradients w.r.t. input, scale and shift."""
    xhat, inv_std, gamma, mode = cache
    dout = np.ascontiguousarray(dout)
    sg, sgx = kernels.bn_backward_sums(dout, xhat)
    dgamma = sgx.astype(gamma.dtype)
    dbeta = sg.astype(gamma.dtype)
    scale = (gamma * inv_std)[None, :, None, None]
    if mode == "eval":
        return dout * scale, dgamma, dbeta
    m = dout.shape[0] * dout.shape[2] * dout.shape[3]
    mg = (sg / m).astype(dout.dtype)[None, :, None, None]
    mgx = (sgx / m).astype(dout.dtype)[None, :, None, None]
    dx = scale * (dout - mg - xhat * mgx)
    return dx, dgamma, dbeta


# --------------------------------------------------------------------------
# pointwise and pooling


def relu_forward(x):
    return np.maximum(x, 0), x


def relu_backward(dout, cache):
    return dout * (cache > 0)


def maxpool2d_forward(x):
    """Max pooling with kernel (1, 2) and stride 2 along time."""
    if x.ndim != 4 or x.shape[3] % 2:
        raise ContractError(f"maxpool: temporal dim must be even, got shape {x.shape}")
    out, arg = kernels.maxpool_time(np.ascontiguousarray(x))
    return out, arg


def maxpool2d_backward(dout, cache):
    return kernels.maxpool_time_backward(np.ascontiguousarray(dout), cache)


def grouped_softmax(x, group):
    """Softmax over each consecutive block of ``group`` channels.

    ``x`` has shape (N, G*group, H, W); the result has the same shape and
    every (n, block, h, w) slice sums to one.
    """
    n, c, h, w = x.shape
    if c % group:
        raise ContractError(f"grouped_softmax: {c} channels not divisible by {group}")
    z = x.reshape(n, c // group, group, h, w)
    z = z - z.max(axis=2, keepdims=True)
    e = np.exp(z)
    return (e / e.sum(axis=2, keepdims=True)).reshape(x.shape)


def grouped_softmax_backward(probs, dprobs, group):
    """Vector-Jacobian product of :func:`grouped_softmax`."""
    n, c, h, w = probs.shape
    p = probs.reshape(n, c // group, group, h, w)
    g = dprobs.reshape(p.shape)
    dot = (p * g).sum(axis=2, keepdims=True)
    return (p * (g - dot)).reshape(probs.shape)


# --------------------------------------------------------------------------
# optimiser


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass
class SGD:
    """SGD with heavy-ball momentum: ``v <- mu*v + g``, ``w <- w - lr*v``."""

    lr: float = 1e-3
    momentum: float = 0.9
    velocity: dict = field(default_factory=dict)

    def step(self, params, grads):
        bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
        if bad:
            raise NonFiniteGradient(f"non-finite gradient in {', '.join(sorted(bad))}; step skipped")
        for name, g in grads.items():
            w = params[name]
            v = self.velocity.get(name)
            if v is None:
                v = self.velocity[name] = np.zeros_like(w)
            v *= self.momentum
            v += g
            w -= (self.lr * v).astype(w.dtype)


# --------------------------------------------------------------------------
# tensor container file
#
# layout (all integers little-endian):
#   b"EVDT"  magic
#   u32      format version (1)
#   u64      header length in bytes
#   header   UTF-8 JSON: {"meta": {...}, "tensors": [{"name", "shape",
#            "offset", "nbytes"}, ...]} with offsets relative to the data
#            section, keys sorted
#   data     concatenated little-endian float32 arrays, C order

MAGIC = b"EVDT"
FORMAT_VERSION = 1


def save_tensors(path, tensors, meta):
    """Write named float32 arrays plus a JSON-able ``meta`` dict."""
    table, blobs, offset = [], [], 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        blob = arr.tobytes()
        table.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"meta": meta, "tensors": table}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_tensors(path):
    """Inverse of :func:`save_tensors`; returns ``(tensors, meta)``."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: not an evdetect tensor file")
    version, hlen = struct.unpack_from("<IQ", raw, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format version {version}")
    start = 4 + struct.calcsize("<IQ")
    header = json.loads(raw[start : start + hlen].decode("utf-8"))
    base = start + hlen
    tensors = {}
    for entry in header["tensors"]:
        lo = base + entry["offset"]
        arr = np.frombuffer(raw, dtype="<f4", count=entry["nbytes"] // 4, offset=lo)
        tensors[entry["name"]] = arr.reshape(entry["shape"]).astype(np.float32)
    return tensors, header["meta"]
