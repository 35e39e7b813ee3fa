"""Finite-difference verification of every differentiable op.

Each check builds a scalar function of one float64 input tensor, runs
:func:`grad_check` (central differences vs the tape gradient) and returns
the max relative error. ``composed`` chains the full micro encoder with the
cross-entropy loss and finite-differences every parameter coordinate.
Kink/tie points are avoided by construction, not by loosening tolerances.
"""

from __future__ import annotations

import numpy as np

from . import nn
from .autodiff import Tape, Tensor, backward, grad_check, relu, softplus, tabs, tmean, tsum
from .encoders import build_encoder, forward_with_taps

__all__ = ["OP_CHECKS", "run_suite", "composed_model_check", "COMPOSED_TOL", "OP_TOL"]

OP_TOL = 1e-4
COMPOSED_TOL = 1e-3


def _rand(rng, shape, scale=1.0):
    return Tensor(rng.standard_normal(shape) * scale, dtype=np.float64)


def _away_from_kinks(rng, shape, margin=0.15):
    """Standard normal values with |x| >= margin, so ReLU/abs kinks and
    their FD neighborhoods are never sampled."""
    x = rng.standard_normal(shape)
    x = np.where(np.abs(x) < margin, np.sign(x) * margin + x, x)
    return Tensor(x, dtype=np.float64)


def _separated_pool_input(seed, shape, min_gap=1e-3):
    """Random input whose values are pairwise separated, so max-pool FD
    never crosses an argmax switch."""
    rng = np.random.default_rng(seed)
    n = int(np.prod(shape))
    base = np.arange(n, dtype=np.float64) * (3.7 * min_gap)
    perm = rng.permutation(n)
    return Tensor((base[perm] + rng.standard_normal(n) * 1e-8).reshape(shape))


def check_conv3d(seed: int, h: float = 1e-5) -> float:
    rng = np.random.default_rng(seed)
    x = _rand(rng, (2, 2, 6, 6, 6))
    w = _rand(rng, (3, 2, 3, 3, 3), scale=0.5)
    b = _rand(rng, (3,))
    errs = [
        grad_check(lambda t: tsum(nn.conv3d(t, w, b, 2, 1)), x, h),
        grad_check(lambda t: tsum(nn.conv3d(x, t, b, 2, 1)), w, h),
        grad_check(lambda t: tsum(nn.conv3d(x, w, t, 2, 1)), b, h),
        grad_check(lambda t: tsum(nn.conv3d(t, w, b, 1, 0)), x, h),
    ]
    return max(errs)


def check_maxpool3d(seed: int, h: float = 1e-5) -> float:
    x = _separated_pool_input(seed, (2, 2, 5, 5, 5))
    # weights make the loss depend unevenly on outputs
    rng = np.random.default_rng(seed + 1)
    cmask = Tensor(rng.standard_normal((2, 2, 2, 2, 2)), dtype=np.float64)
    return grad_check(lambda t: tsum(nn.maxpool3d(t, 3, 2) * cmask), x, h)


def check_batch_norm(seed: int, h: float = 1e-5) -> float:
    rng = np.random.default_rng(seed)
    x = _rand(rng, (4, 3, 2, 2, 2))
    gamma = Tensor(1.0 + 0.1 * rng.standard_normal(3), dtype=np.float64)
    beta = _rand(rng, (3,))
    cmask = Tensor(rng.standard_normal(x.shape), dtype=np.float64)

    def run(xx, gg, bb, mode):
        state = nn.BatchNormState.create(3, dtype=np.float64)
        state.mode = mode
        return tsum(nn.batch_norm(xx, state, gg, bb) * cmask)

    errs = []
    for mode in ("train", "eval"):
        errs.append(grad_check(lambda t: run(t, gamma, beta, mode), x, h))
        errs.append(grad_check(lambda t: run(x, t, beta, mode), gamma, h))
        errs.append(grad_check(lambda t: run(x, gamma, t, mode), beta, h))
    return max(errs)


def check_linear(seed: int, h: float = 1e-5) -> float:
    rng = np.random.default_rng(seed)
    x = _rand(rng, (2, 3))
    w = _rand(rng, (4, 3))
    b = _rand(rng, (4,))
    cmask = Tensor(rng.standard_normal((2, 4)), dtype=np.float64)
    errs = [
        grad_check(lambda t: tsum(nn.linear(t, w, b) * cmask), x, h),
        grad_check(lambda t: tsum(nn.linear(x, t, b) * cmask), w, h),
        grad_check(lambda t: tsum(nn.linear(x, w, t) * cmask), b, h),
    ]
    return max(errs)


def check_activation(seed: int, h: float = 1e-5) -> float:
    rng = np.random.default_rng(seed)
    x_sp = _rand(rng, (11,), scale=3.0)
    x_re = _away_from_kinks(rng, (11,))
    errs = [
        grad_check(lambda t: tsum(softplus(t) * softplus(t)), x_sp, h),
        grad_check(lambda t: tsum(relu(t) * Tensor(np.arange(1.0, 12.0))), x_re, h),
    ]
    return max(errs)


def check_dropout(seed: int, h: float = 1e-5) -> float:
    rng = np.random.default_rng(seed)
    x = _rand(rng, (50,))
    cmask = Tensor(rng.standard_normal(50), dtype=np.float64)

    def f(t):
        # identical generator per call: the mask is data-independent
        return tsum(nn.dropout(t, 0.3, "train", np.random.default_rng(seed + 5)) * cmask)

    return grad_check(f, x, h)


def check_cross_entropy(seed: int, h: float = 1e-5) -> float:
    rng = np.random.default_rng(seed)
    logits = _rand(rng, (4, 5), scale=2.0)
    labels = rng.integers(0, 5, size=4)
    return grad_check(lambda t: nn.cross_entropy(t, labels), logits, h)


def check_abs(seed: int, h: float = 1e-5) -> float:
    rng = np.random.default_rng(seed)
    x = _away_from_kinks(rng, (17,))
    return grad_check(lambda t: tsum(tabs(t)) * 2.5, x, h)


def check_scores(seed: int, h: float = 1e-5) -> float:
    rng = np.random.default_rng(seed)
    local = _rand(rng, (3, 4, 2))
    glob = _rand(rng, (3, 4))
    cmask = Tensor(rng.standard_normal((3, 3, 2)), dtype=np.float64)
    errs = [
        grad_check(lambda t: tsum(nn.pair_scores(t, glob) * cmask), local, h),
        grad_check(lambda t: tsum(nn.pair_scores(local, t) * cmask), glob, h),
        grad_check(lambda t: tmean(nn.diag_pairs(nn.pair_scores(t, glob))), local, h),
    ]
    return max(errs)


OP_CHECKS = {
    "conv3d": check_conv3d,
    "maxpool3d": check_maxpool3d,
    "batch_norm": check_batch_norm,
    "linear": check_linear,
    "activation": check_activation,
    "dropout": check_dropout,
    "cross_entropy": check_cross_entropy,
    "abs": check_abs,
    "scores": check_scores,
}


def _kink_margin(spec, params, batch) -> float:
    """Distance of the nearest ReLU input to zero and the tightest max-pool
    winner margin along a forward pass. Finite differences are only valid
    when this clears the perturbation the FD step can induce."""
    from numpy.lib.stride_tricks import sliding_window_view

    from .encoders import BatchNorm, MaxPool, ReLU, _resolved_layers

    trace: list = []
    forward_with_taps(spec, params, batch, mode="train", trace=trace)
    layers = _resolved_layers(spec)
    margin = np.inf
    for i, layer in enumerate(layers):
        if isinstance(layer, ReLU) and isinstance(layers[i - 1], BatchNorm):
            margin = min(margin, float(np.min(np.abs(trace[i - 1].data))))
        elif isinstance(layer, MaxPool) and layer.kernel > 1:
            x = trace[i - 1].data
            k = layer.kernel
            win = sliding_window_view(x, (k, k, k), axis=(2, 3, 4))
            win = win[:, :, :: layer.stride, :: layer.stride, :: layer.stride]
            flat = win.reshape(*win.shape[:5], -1)
            part = np.partition(flat, flat.shape[-1] - 2, axis=-1)
            gaps = part[..., -1] - part[..., -2]
            margin = min(margin, float(gaps.min()))
    return margin


def composed_model_check(seed: int, h: float = 1e-5) -> float:
    """Finite-difference every parameter coordinate of the micro encoder
    through a full forward + cross-entropy loss (float64, batch 2).

    Batches that put any ReLU input or pool decision within 2e-4 of a kink
    are redrawn deterministically; at those points the loss is not
    differentiable and central differences measure nothing.
    """
    spec, params = build_encoder("alexnet_micro", seed=seed, dtype=np.float64)
    side = spec.input_side
    for attempt in range(64):
        rng = np.random.default_rng(np.random.SeedSequence((seed, 9973, attempt)))
        batch = Tensor(rng.standard_normal((2, 1, side, side, side)), dtype=np.float64)
        if _kink_margin(spec, params, batch) > 2e-4:
            break
    else:
        raise RuntimeError(f"could not find a kink-free evaluation point for seed {seed}")
    labels = rng.integers(0, spec.num_classes, size=2)
    tensors = params.parameters()

    def loss_value() -> float:
        out = forward_with_taps(spec, params, batch, mode="train")
        return nn.cross_entropy(out.logits_or_z, labels).item()

    with Tape() as tape:
        tape.watch(*tensors)
        out = forward_with_taps(spec, params, batch, mode="train")
        loss = nn.cross_entropy(out.logits_or_z, labels)
    grads = backward(tape, loss)

    worst = 0.0
    for p, g in zip(tensors, grads):
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            hi = loss_value()
            flat[i] = orig - h
            lo = loss_value()
            flat[i] = orig
            fd = (hi - lo) / (2.0 * h)
            err = abs(gflat[i] - fd) / max(abs(gflat[i]), abs(fd), 1.0)
            worst = max(worst, err)
    return worst


def run_suite(ops=None, seeds: int = 20, h: float = 1e-5, include_composed: bool = True):
    """Run the selected checks over ``seeds`` random seeds.

    Returns {name: max error}; 'composed' uses COMPOSED_TOL, ops use OP_TOL.
    """
    names = list(OP_CHECKS) if ops is None else list(ops)
    unknown = [n for n in names if n not in OP_CHECKS and n != "composed"]
    if unknown:
        raise KeyError(f"unknown gradcheck ops: {unknown}")
    results: dict[str, float] = {}
    for name in names:
        if name == "composed":
            continue
        results[name] = max(OP_CHECKS[name](seed, h) for seed in range(seeds))
    if include_composed or "composed" in names:
        results["composed"] = max(composed_model_check(seed, h) for seed in range(seeds))
    return results
