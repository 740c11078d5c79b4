"""Central finite-difference verification of the analytic gradients.

Checks run in real64 with step h = 1e-5.  Errors are reported as
max |analytic - numeric| / max(|analytic|, |numeric|, 1), so small
gradients are judged on absolute error at the same tolerance.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .blocks import ModelConfig, init_params, mbmfn_forward
from .tensor import (
    Tape,
    Tensor,
    add,
    channel_mean,
    channel_scale,
    channel_std,
    concat_channels,
    conv2d,
    l1_loss,
    leaky_relu,
    pixel_shuffle,
    relu,
    sigmoid,
    sum_all,
    upsample_bilinear,
    upsample_nearest,
)

__all__ = ["TOLERANCE", "numeric_grad", "max_rel_error", "check_ops", "check_model"]

TOLERANCE = 1e-6
STEP = 1e-5


def numeric_grad(f: Callable[[], float], arr: np.ndarray, h: float = STEP) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. every element of `arr`.

    `arr` is perturbed in place and restored; `f` must read it afresh on
    every call.
    """
    grad = np.zeros_like(arr)
    flat, gflat = arr.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        v = flat[i]
        flat[i] = v + h
        fp = f()
        flat[i] = v - h
        fm = f()
        flat[i] = v
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1.0)
    return float(np.max(np.abs(analytic - numeric) / denom))


def _away_from_zero(rng: np.random.Generator, shape, margin: float = 0.05) -> np.ndarray:
    """Uniform in [-1, 1] with every value at least `margin` from 0."""
    x = rng.uniform(-1.0, 1.0, size=shape)
    return np.where(np.abs(x) < margin, x + np.sign(x + 1e-12) * 2 * margin, x)


def _check(inputs: list, build: Callable[[], Tensor]) -> float:
    """Max rel error over the gradients of `inputs` for loss = build()."""
    with Tape() as tape:
        loss = build()
    tape.backward(loss)
    worst = 0.0
    for t in inputs:
        analytic = tape.grad(t)
        numeric = numeric_grad(lambda: build().item(), t.data)
        worst = max(worst, max_rel_error(analytic, numeric))
    return worst


def check_ops(seed: int = 0) -> list:
    """Finite-difference check of every differentiable op.

    Each op feeds a sigmoid before a full sum, so the incoming cotangent
    varies per element and misrouted gradients cannot cancel.  Returns
    (op_name, max_rel_error) rows.
    """
    rng = np.random.default_rng(seed)

    def t(*shape, away=False):
        data = _away_from_zero(rng, shape) if away else rng.uniform(-1, 1, shape)
        return Tensor(data.astype(np.float64))

    def squash(out: Tensor) -> Tensor:
        return sum_all(sigmoid(out))

    rows = []

    x = t(2, 3, 5, 6)
    w = t(4, 3, 3, 3)
    b = t(1, 4, 1, 1)
    rows.append(("conv2d", _check([x, w, b], lambda: squash(conv2d(x, w, b)))))

    x = t(2, 3, 4, 4, away=True)
    rows.append(("leaky_relu", _check([x], lambda: squash(leaky_relu(x, 0.05)))))

    x = t(2, 3, 4, 4, away=True)
    rows.append(("relu", _check([x], lambda: squash(relu(x)))))

    x = t(2, 3, 4, 4)
    rows.append(("sigmoid", _check([x], lambda: squash(sigmoid(x)))))

    a, b2 = t(2, 3, 4, 4), t(2, 3, 4, 4)
    rows.append(("add", _check([a, b2], lambda: squash(add(a, b2)))))

    p1, p2, p3 = t(2, 2, 4, 4), t(2, 3, 4, 4), t(2, 1, 4, 4)
    rows.append(
        ("concat_channels", _check([p1, p2, p3], lambda: squash(concat_channels([p1, p2, p3]))))
    )

    x, s = t(2, 3, 4, 4), t(2, 3, 1, 1)
    rows.append(("channel_scale", _check([x, s], lambda: squash(channel_scale(x, s)))))

    x, s1 = t(2, 3, 4, 4), t(1, 3, 1, 1)
    rows.append(
        ("channel_scale_bcast", _check([x, s1], lambda: squash(channel_scale(x, s1))))
    )

    x = t(2, 3, 3, 4)
    rows.append(("upsample_nearest", _check([x], lambda: squash(upsample_nearest(x, 2)))))

    x = t(2, 3, 3, 4)
    rows.append(("upsample_bilinear", _check([x], lambda: squash(upsample_bilinear(x, 3)))))

    x = t(2, 8, 3, 3)
    rows.append(("pixel_shuffle", _check([x], lambda: squash(pixel_shuffle(x, 2)))))

    x = t(2, 3, 4, 4)
    rows.append(("channel_mean", _check([x], lambda: squash(channel_mean(x)))))

    x = t(2, 3, 4, 4)
    rows.append(("channel_std", _check([x], lambda: squash(channel_std(x)))))

    # Keep |pred - target| >= 0.1 so the kink at zero is never straddled.
    pred = t(2, 3, 4, 4)
    gap = rng.uniform(0.1, 0.5, pred.shape) * np.where(rng.random(pred.shape) < 0.5, -1, 1)
    target = Tensor(pred.data + gap)
    rows.append(("l1_loss", _check([pred, target], lambda: l1_loss(pred, target))))

    x = t(2, 3, 4, 4)
    rows.append(("sum_all", _check([x], lambda: sum_all(x))))

    return rows


def _leaky_margin(tape: Tape) -> float:
    """Smallest |pre-activation| feeding any leaky_relu on the tape."""
    margin = np.inf
    for node in tape.nodes():
        if node.op == "leaky_relu":
            pre = tape.node_value(node.parents[0]).data
            margin = min(margin, float(np.min(np.abs(pre))))
    return margin


# Finite differences are only valid away from the kinks of leaky_relu and
# the L1 loss.  Probe inputs are redrawn until every pre-activation sits
# at least this far from zero, so an FD step cannot cross a kink.
_KINK_MARGIN = 1e-3


def check_model(cfg: ModelConfig, seed: int = 0) -> list:
    """Finite-difference check of every parameter gradient of a model.

    The probe input is redrawn until the forward pass keeps a safe margin
    from every leaky_relu kink, and the L1 target sits at least 0.25 away
    from the network output, so the loss is smooth in the checked
    neighbourhood.  Returns (param_name, max_rel_error) rows.
    """
    params = init_params(cfg, seed=seed, dtype=np.float64)
    x = loss = tape = None
    for attempt in range(50):
        rng = np.random.default_rng(seed + 7919 * attempt + 1)
        x = Tensor(rng.random((1, cfg.in_channels, 8, 8)))
        with Tape() as tape:
            out = mbmfn_forward(x, params, cfg)
        if _leaky_margin(tape) > _KINK_MARGIN:
            signs = np.where(rng.random(out.shape) < 0.5, -1.0, 1.0)
            target = Tensor(out.data + signs * rng.uniform(0.25, 0.75, out.shape))
            break
    else:
        raise RuntimeError("could not find a probe input clear of activation kinks")

    def f() -> float:
        return l1_loss(mbmfn_forward(x, params, cfg), target).item()

    with Tape() as tape:
        loss = l1_loss(mbmfn_forward(x, params, cfg), target)
    tape.backward(loss)
    rows = []
    for name, p in params.items():
        rows.append((name, max_rel_error(tape.grad(p), numeric_grad(f, p.data))))
    return rows
