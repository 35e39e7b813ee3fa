"""Differentiable neural-network operations.

Convolution and pooling dispatch to the active kernel backend (compiled
extension or numpy fallback); everything else is plain numpy. All ops are
pure functions of their inputs except ``batch_norm`` in train mode, which
updates the running statistics it is given.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import backend
from .autodiff import DimensionError, NonFiniteError, Tensor, record

__all__ = [
    "conv3d",
    "maxpool3d",
    "BatchNormState",
    "batch_norm",
    "linear",
    "dropout",
    "cross_entropy",
    "pair_scores",
    "diag_pairs",
    "conv_out_dim",
]


def conv_out_dim(dim: int, kernel: int, stride: int, padding: int = 0) -> int:
    return (dim + 2 * padding - kernel) // stride + 1


def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None, stride: int, padding: int) -> Tensor:
    """Zero-padded 3D cross-correlation of (B,Cin,D,H,W) with (Cout,Cin,k,k,k)."""
    if x.ndim != 5 or weight.ndim != 5:
        raise DimensionError(f"conv3d expects 5-d input/weight, got {x.shape} / {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise DimensionError(f"channel mismatch: input has {x.shape[1]}, weight expects {weight.shape[1]}")
    k = weight.shape[2]
    for name, dim in zip("DHW", x.shape[2:]):
        if k > dim + 2 * padding:
            raise DimensionError(
                f"kernel {k} exceeds padded input extent {dim + 2 * padding} on axis {name}"
            )
    if k == 1 and stride == 1 and padding == 0:
        return _pointwise_conv3d(x, weight, bias)
    y = backend.conv3d_forward(x.data, weight.data, stride, padding)
    if bias is not None:
        y = y + bias.data[None, :, None, None, None]
    out = Tensor(y)
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def back(g):
        g = np.ascontiguousarray(g)
        gx, gw = backend.conv3d_backward(x.data, weight.data, g, stride, padding)
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3, 4))

    return record(out, inputs, back)


def _pointwise_conv3d(x: Tensor, weight: Tensor, bias: Tensor | None) -> Tensor:
    # 1x1x1 convolutions are a per-voxel channel mix; one GEMM beats the
    # general kernels by a wide margin.
    b = x.shape[0]
    spatial = x.shape[2:]
    xm = x.data.reshape(b, x.shape[1], -1)
    wm = weight.data.reshape(weight.shape[0], weight.shape[1])
    y = np.einsum("oc,bcl->bol", wm, xm, optimize=True)
    if bias is not None:
        y = y + bias.data[None, :, None]
    out = Tensor(y.reshape(b, weight.shape[0], *spatial))
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def back(g):
        gm = g.reshape(b, weight.shape[0], -1)
        gx = np.einsum("oc,bol->bcl", wm, gm, optimize=True).reshape(x.shape)
        gw = np.einsum("bol,bcl->oc", gm, xm, optimize=True).reshape(weight.shape)
        if bias is None:
            return gx, gw
        return gx, gw, gm.sum(axis=(0, 2))

    return record(out, inputs, back)


def maxpool3d(x: Tensor, kernel: int, stride: int) -> Tensor:
    """Max pooling; the gradient routes to the first maximal index per window."""
    if x.ndim != 5:
        raise DimensionError(f"maxpool3d expects 5-d input, got {x.shape}")
    for name, dim in zip("DHW", x.shape[2:]):
        if kernel > dim:
            raise DimensionError(f"pool kernel {kernel} exceeds input extent {dim} on axis {name}")
    y, idx = backend.maxpool3d_forward(x.data, kernel, stride)
    out = Tensor(y)
    d, h, w = x.shape[2:]

    def back(g):
        return (backend.maxpool3d_backward(np.ascontiguousarray(g), idx, d, h, w),)

    return record(out, (x,), back)


@dataclass
class BatchNormState:
    """Running statistics plus the train/eval switch for one BN layer."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    epsilon: float = 1e-5
    mode: str = "train"

    @classmethod
    def create(cls, channels: int, dtype=np.float32, momentum: float = 0.1, epsilon: float = 1e-5):
        return cls(
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
            momentum=momentum,
            epsilon=epsilon,
        )

    def copy(self) -> "BatchNormState":
        return BatchNormState(
            self.running_mean.copy(), self.running_var.copy(), self.momentum, self.epsilon, self.mode
        )


def batch_norm(x: Tensor, state: BatchNormState, gamma: Tensor, beta: Tensor) -> Tensor:
    """Per-channel batch normalization for (B,C,...) or (B,N) inputs.

    Train mode normalizes by batch statistics (biased variance) and updates
    the running stats with ``momentum`` (unbiased variance, the usual
    convention); eval mode uses the running stats and mutates nothing.
    """
    if x.ndim < 2:
        raise DimensionError(f"batch_norm expects at least 2-d input, got {x.shape}")
    axes = (0,) + tuple(range(2, x.ndim))
    shape = (1, x.shape[1]) + (1,) * (x.ndim - 2)
    dt = x.dtype.type

    if state.mode == "train":
        if x.shape[0] < 2:
            raise DimensionError("batch_norm in train mode needs batch size >= 2 (variance undefined)")
        m = x.data.size // x.shape[1]
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        inv = 1.0 / np.sqrt(var + dt(state.epsilon))
        xhat = (x.data - mean.reshape(shape)) * inv.reshape(shape)
        mom = state.momentum
        state.running_mean = ((1 - mom) * state.running_mean + mom * mean).astype(state.running_mean.dtype)
        unbiased = var * (m / (m - 1))
        state.running_var = ((1 - mom) * state.running_var + mom * unbiased).astype(state.running_var.dtype)
    elif state.mode == "eval":
        m = 0
        inv = (1.0 / np.sqrt(state.running_var + state.epsilon)).astype(dt)
        xhat = (x.data - state.running_mean.reshape(shape).astype(dt)) * inv.reshape(shape)
    else:
        raise ValueError(f"unknown batch_norm mode {state.mode!r}")

    out = Tensor(xhat * gamma.data.reshape(shape) + beta.data.reshape(shape))
    train = state.mode == "train"

    def back(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        scale = (gamma.data * inv).reshape(shape)
        if train:
            gx = scale * (
                g
                - (gbeta / m).reshape(shape)
                - xhat * ((g * xhat).sum(axis=axes) / m).reshape(shape)
            )
        else:
            gx = scale * g
        return gx.astype(g.dtype, copy=False), ggamma, gbeta

    return record(out, (x, gamma, beta), back)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map (B,n) @ (m,n)^T + (m,)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"linear: incompatible shapes {x.shape} and {weight.shape}")
    out = Tensor(x.data @ weight.data.T + bias.data)

    def back(g):
        return g @ weight.data, g.T @ x.data, g.sum(axis=0)

    return record(out, (x, weight, bias), back)


def dropout(x: Tensor, p: float, mode: str, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: train zeroes with probability p and rescales the
    survivors by 1/(1-p); eval is the identity."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if mode == "eval" or p == 0.0:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.dtype)
    scale = x.dtype.type(1.0 / (1.0 - p))
    out = Tensor(x.data * keep * scale)
    return record(out, (x,), lambda g: (g * keep * scale,))


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-softmax of the true class, log-sum-exp stabilized."""
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy expects (B,K) logits, got {logits.shape}")
    labels = np.asarray(labels)
    b, k = logits.shape
    if labels.shape != (b,):
        raise DimensionError(f"labels shape {labels.shape} does not match batch {b}")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    z = logits.data
    m = z.max(axis=1, keepdims=True)
    lse = m + np.log(np.exp(z - m).sum(axis=1, keepdims=True))
    losses = lse[:, 0] - z[np.arange(b), labels]
    out = Tensor(np.asarray(losses.mean(), dtype=logits.dtype))
    softmax = np.exp(z - lse)

    def back(g):
        gz = softmax.copy()
        gz[np.arange(b), labels] -= 1.0
        return (gz * (g / b),)

    return record(out, (logits,), back)


def pair_scores(local_emb: Tensor, global_emb: Tensor) -> Tensor:
    """All-pairs dot products: (B,E,L) x (B,E) -> (B,B,L) where entry
    [i,j,l] pairs location l of sample i with the representation of j."""
    if local_emb.ndim != 3 or global_emb.ndim != 2:
        raise DimensionError(
            f"pair_scores expects (B,E,L) and (B,E), got {local_emb.shape} / {global_emb.shape}"
        )
    if local_emb.shape[0] != global_emb.shape[0] or local_emb.shape[1] != global_emb.shape[1]:
        raise DimensionError(
            f"pair_scores mismatch: {local_emb.shape} vs {global_emb.shape}"
        )
    out = Tensor(np.einsum("iel,je->ijl", local_emb.data, global_emb.data, optimize=True))

    def back(g):
        gl = np.einsum("ijl,je->iel", g, global_emb.data, optimize=True)
        gg = np.einsum("ijl,iel->je", g, local_emb.data, optimize=True)
        return gl, gg

    return record(out, (local_emb, global_emb), back)


def diag_pairs(scores: Tensor) -> Tensor:
    """Extract the matched (i == j) entries of a (B,B,L) score tensor."""
    if scores.ndim != 3 or scores.shape[0] != scores.shape[1]:
        raise DimensionError(f"diag_pairs expects (B,B,L), got {scores.shape}")
    b = scores.shape[0]
    ar = np.arange(b)
    out = Tensor(np.ascontiguousarray(scores.data[ar, ar, :]))

    def back(g):
        gs = np.zeros_like(scores.data)
        gs[ar, ar, :] = g
        return (gs,)

    return record(out, (scores,), back)
