"""Dense NCHW tensors with reverse-mode automatic differentiation.

Every value is a 4-D (batch, channel, height, width) array of real32 or
real64 scalars.  Ops compute eagerly with numpy; while a :class:`Tape` is
active they additionally record the closure needed to replay the chain
rule in reverse.  Tensors are immutable values: ops allocate fresh arrays
and never write into their inputs, so activations saved for the backward
pass stay valid.
"""

from __future__ import annotations

import threading
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "backward",
    "conv2d",
    "leaky_relu",
    "relu",
    "sigmoid",
    "add",
    "concat_channels",
    "channel_scale",
    "channel_mean",
    "channel_std",
    "channel_stats",
    "upsample_nearest",
    "upsample_bilinear",
    "pixel_shuffle",
    "l1_loss",
    "sum_all",
    "assert_finite",
]

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

# Per-chunk im2col buffer cap.  Convolutions over large batches split the
# batch so the unfolded column matrix never exceeds this many bytes.
_COL_BYTES_LIMIT = 64 * 1024 * 1024


class Tensor:
    """A dense (n, c, h, w) array with all dimensions >= 1.

    Construction casts integer input to real32 and keeps real32/real64
    unchanged.  Instances are treated as immutable values; code that needs
    a modified tensor builds a new one.
    """

    __slots__ = ("data",)

    def __init__(self, data, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        if arr.ndim != 4:
            raise ValueError(
                f"tensor must be 4-D (n, c, h, w), got shape {arr.shape}"
            )
        if arr.size == 0:
            raise ValueError(f"tensor dimensions must all be >= 1, got {arr.shape}")
        self.data = arr

    @classmethod
    def zeros(cls, n, c, h, w, dtype=np.float32) -> "Tensor":
        return cls(np.zeros((n, c, h, w), dtype=dtype))

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def c(self) -> int:
        return self.data.shape[1]

    @property
    def h(self) -> int:
        return self.data.shape[2]

    @property
    def w(self) -> int:
        return self.data.shape[3]

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name})"


class _Node:
    """One recorded op: parent node ids, the op's output tensor, and the
    vector-Jacobian closure (None for leaves)."""

    __slots__ = ("op", "parents", "vjp", "tensor")

    def __init__(self, op, parents, vjp, tensor):
        self.op = op
        self.parents = parents
        self.vjp = vjp
        self.tensor = tensor


_ACTIVE = threading.local()


def _active_tape() -> Optional["Tape"]:
    return getattr(_ACTIVE, "tape", None)


class Tape:
    """Ordered record of ops for one forward pass.

    Use as a context manager: every op executed inside the block records
    itself, and tensors flowing into recorded ops are registered as leaves
    on first use.  Node order is creation order, so the reverse walk in
    :meth:`backward` is a deterministic topological order.  Single-writer:
    one tape may be active per thread at a time.
    """

    def __init__(self):
        self._nodes: list[_Node] = []
        self._node_of: dict[int, int] = {}
        self.grads: Optional[list] = None

    def __enter__(self) -> "Tape":
        if _active_tape() is not None:
            raise RuntimeError("a tape is already active in this thread")
        _ACTIVE.tape = self
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _ACTIVE.tape = None

    def __len__(self) -> int:
        return len(self._nodes)

    def watch(self, t: Tensor) -> int:
        """Register `t` as a leaf (idempotent) and return its node id."""
        return self._ensure_node(t)

    def node_id(self, t: Tensor) -> Optional[int]:
        return self._node_of.get(id(t))

    def node_value(self, nid: int) -> Tensor:
        """Tensor held by node `nid` (nodes hold their outputs alive)."""
        return self._nodes[nid].tensor

    def nodes(self) -> list:
        """The recorded nodes in creation order (read-only use)."""
        return self._nodes

    def _ensure_node(self, t: Tensor) -> int:
        nid = self._node_of.get(id(t))
        if nid is None:
            # The node keeps `t` alive, so id() stays unique for the
            # tape's lifetime.
            self._nodes.append(_Node("leaf", (), None, t))
            nid = len(self._nodes) - 1
            self._node_of[id(t)] = nid
        return nid

    def _append(self, op: str, out: Tensor, inputs: Sequence[Tensor], vjp) -> None:
        parents = tuple(self._ensure_node(t) for t in inputs)
        self._nodes.append(_Node(op, parents, vjp, out))
        self._node_of[id(out)] = len(self._nodes) - 1

    def backward(self, loss: Tensor) -> None:
        """Accumulate gradients of `loss` for every node feeding it.

        The walk visits nodes in reverse creation order, so gradients from
        fan-out (a tensor consumed by several ops, or a parameter aliased
        into several places) sum in a fixed order and repeated runs produce
        bit-identical results.
        """
        nid = self._node_of.get(id(loss))
        if nid is None:
            raise ValueError("loss tensor is not recorded on this tape")
        if loss.shape != (1, 1, 1, 1):
            raise ValueError(f"loss must be scalar-shaped (1, 1, 1, 1), got {loss.shape}")
        grads: list = [None] * len(self._nodes)
        grads[nid] = np.ones((1, 1, 1, 1), dtype=loss.dtype)
        for i in range(nid, -1, -1):
            node = self._nodes[i]
            g = grads[i]
            if g is None or node.vjp is None:
                continue
            parent_grads = node.vjp(g)
            for pid, pg in zip(node.parents, parent_grads):
                if pg is None:
                    continue
                if grads[pid] is None:
                    grads[pid] = pg
                else:
                    # Never in place: upstream arrays may be shared.
                    grads[pid] = grads[pid] + pg
        self.grads = grads

    def grad(self, t: Tensor) -> Optional[np.ndarray]:
        """Gradient array for `t` after :meth:`backward`, else None."""
        if self.grads is None:
            raise RuntimeError("backward() has not been run on this tape")
        nid = self._node_of.get(id(t))
        if nid is None:
            return None
        return self.grads[nid]


def backward(tape: Tape, loss: Tensor) -> None:
    """Run the reverse pass on `tape` seeded at the scalar `loss`."""
    tape.backward(loss)


def _maybe_record(op: str, out: Tensor, inputs: Sequence[Tensor], vjp) -> Tensor:
    tape = _active_tape()
    if tape is not None:
        tape._append(op, out, inputs, vjp)
    return out


def _check_dtypes(*tensors: Tensor) -> None:
    first = tensors[0].dtype
    for t in tensors[1:]:
        if t.dtype != first:
            raise ValueError(
                f"mixed dtypes: {first.name} vs {t.dtype.name}; cast explicitly"
            )


# ---------------------------------------------------------------------------
# convolution


def _im2col(xpad: np.ndarray, k: int) -> np.ndarray:
    """Unfold padded (n, c, hp, wp) into (n, c*k*k, h*w) columns."""
    win = np.lib.stride_tricks.sliding_window_view(xpad, (k, k), axis=(2, 3))
    n, c, h, w = win.shape[:4]
    return win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * k * k, h * w)


def _col2im(gcols: np.ndarray, c: int, k: int, hp: int, wp: int) -> np.ndarray:
    """Fold (m, c*k*k, h*w) column gradients back onto the padded input."""
    m = gcols.shape[0]
    h, w = hp - k + 1, wp - k + 1
    blocks = gcols.reshape(m, c, k, k, h, w)
    out = np.zeros((m, c, hp, wp), dtype=gcols.dtype)
    for ki in range(k):
        for kj in range(k):
            out[:, :, ki:ki + h, kj:kj + w] += blocks[:, :, ki, kj]
    return out


def _conv_chunk(c_in: int, k: int, hw: int, itemsize: int) -> int:
    per_sample = c_in * k * k * hw * itemsize
    return max(1, _COL_BYTES_LIMIT // max(per_sample, 1))


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, pad: Optional[int] = None) -> Tensor:
    """Stride-1 same-size 2-D convolution (cross-correlation, no flip).

    `weight` is (c_out, c_in, k, k) with k odd and square; `bias` is a
    per-output-channel vector stored as (1, c_out, 1, 1).  Padding is zero
    padding of width (k-1)/2 on all sides, which is also the only accepted
    value for `pad`; passing None selects it automatically.
    """
    _check_dtypes(x, weight, bias)
    if weight.data.ndim != 4:
        raise ValueError(f"weight must be 4-D, got shape {weight.shape}")
    c_out, c_in, k, k2 = weight.shape
    if k != k2:
        raise ValueError(f"kernel must be square, got {k}x{k2}")
    if k % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {k}")
    if x.c != c_in:
        raise ValueError(f"input has {x.c} channels, weight expects {c_in}")
    same_pad = (k - 1) // 2
    if pad is None:
        pad = same_pad
    elif pad != same_pad:
        raise ValueError(f"pad must be (k-1)/2 = {same_pad} for k={k}, got {pad}")
    if bias.shape != (1, c_out, 1, 1):
        raise ValueError(f"bias must have shape (1, {c_out}, 1, 1), got {bias.shape}")

    xd, wd, bd = x.data, weight.data, bias.data
    n, _, h, w = xd.shape
    xpad = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    wmat = wd.reshape(c_out, c_in * k * k)
    step = _conv_chunk(c_in, k, h * w, xd.itemsize)
    out = np.empty((n, c_out, h * w), dtype=xd.dtype)
    for i in range(0, n, step):
        out[i:i + step] = wmat @ _im2col(xpad[i:i + step], k)
    out += bd.reshape(1, c_out, 1)
    out = Tensor(out.reshape(n, c_out, h, w))

    def vjp(g: np.ndarray):
        gmat = g.reshape(n, c_out, h * w)
        gb = g.sum(axis=(0, 2, 3)).reshape(1, c_out, 1, 1)
        gw = np.zeros((c_out, c_in * k * k), dtype=g.dtype)
        gxpad = np.zeros_like(xpad)
        hp, wp = xpad.shape[2], xpad.shape[3]
        for i in range(0, n, step):
            cols = _im2col(xpad[i:i + step], k)
            gw += np.matmul(gmat[i:i + step], cols.transpose(0, 2, 1)).sum(axis=0)
            gcols = wmat.T @ gmat[i:i + step]
            gxpad[i:i + step] = _col2im(gcols, c_in, k, hp, wp)
        gx = gxpad[:, :, pad:pad + h, pad:pad + w] if pad else gxpad
        return gx, gw.reshape(wd.shape), gb

    return _maybe_record("conv2d", out, (x, weight, bias), vjp)


# ---------------------------------------------------------------------------
# pointwise nonlinearities


def leaky_relu(x: Tensor, slope: float) -> Tensor:
    """max(v, slope*v) elementwise; `slope` must lie strictly in (0, 1)."""
    if not 0.0 < slope < 1.0:
        raise ValueError(f"slope must be in (0, 1), got {slope}")
    xd = x.data
    neg = xd < 0
    out = Tensor(np.where(neg, xd * xd.dtype.type(slope), xd))

    def vjp(g: np.ndarray):
        return (np.where(neg, g * g.dtype.type(slope), g),)

    return _maybe_record("leaky_relu", out, (x,), vjp)


def relu(x: Tensor) -> Tensor:
    """max(v, 0) elementwise."""
    xd = x.data
    out = Tensor(np.maximum(xd, 0))

    def vjp(g: np.ndarray):
        return (np.where(xd > 0, g, g.dtype.type(0)),)

    return _maybe_record("relu", out, (x,), vjp)


def sigmoid(x: Tensor) -> Tensor:
    """Numerically stable logistic function, saturates to exactly 0/1."""
    xd = x.data
    out_data = np.empty_like(xd)
    pos = xd >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    e = np.exp(xd[~pos])
    out_data[~pos] = e / (1.0 + e)
    out = Tensor(out_data)

    def vjp(g: np.ndarray):
        return (g * out_data * (1.0 - out_data),)

    return _maybe_record("sigmoid", out, (x,), vjp)


# ---------------------------------------------------------------------------
# structural ops


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of two identically shaped tensors."""
    _check_dtypes(a, b)
    if a.shape != b.shape:
        raise ValueError(f"add shapes differ: {a.shape} vs {b.shape}")
    out = Tensor(a.data + b.data)

    def vjp(g: np.ndarray):
        return g, g

    return _maybe_record("add", out, (a, b), vjp)


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along the channel axis; n/h/w must match exactly."""
    parts = list(parts)
    if not parts:
        raise ValueError("concat_channels needs at least one tensor")
    _check_dtypes(*parts)
    ref = parts[0]
    for p in parts[1:]:
        if (p.n, p.h, p.w) != (ref.n, ref.h, ref.w):
            raise ValueError(
                f"concat_channels spatial/batch mismatch: {p.shape} vs {ref.shape}"
            )
    out = Tensor(np.concatenate([p.data for p in parts], axis=1))
    offsets = np.cumsum([0] + [p.c for p in parts])

    def vjp(g: np.ndarray):
        return tuple(g[:, offsets[i]:offsets[i + 1]] for i in range(len(parts)))

    return _maybe_record("concat_channels", out, parts, vjp)


def channel_scale(x: Tensor, s: Tensor) -> Tensor:
    """Multiply each channel of `x` by a per-channel scalar from `s`.

    `s` has shape (n, c, 1, 1) or (1, c, 1, 1); the singleton batch case
    broadcasts over the batch of `x`.
    """
    _check_dtypes(x, s)
    if s.h != 1 or s.w != 1 or s.c != x.c or s.n not in (1, x.n):
        raise ValueError(
            f"scale must be ({x.n} or 1, {x.c}, 1, 1), got {s.shape}"
        )
    out = Tensor(x.data * s.data)

    def vjp(g: np.ndarray):
        gx = g * s.data
        gs = (g * x.data).sum(axis=(2, 3), keepdims=True)
        if s.n == 1:
            gs = gs.sum(axis=0, keepdims=True)
        return gx, gs

    return _maybe_record("channel_scale", out, (x, s), vjp)


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    """Repeat every pixel `factor` times along both spatial axes."""
    if not isinstance(factor, int) or factor < 2:
        raise ValueError(f"factor must be an integer >= 2, got {factor!r}")
    out = Tensor(np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3))
    n, c, h, w = x.shape

    def vjp(g: np.ndarray):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return _maybe_record("upsample_nearest", out, (x,), vjp)


def _bilinear_axis(n_in: int, factor: int, dtype):
    """Source taps for one axis: half-pixel centers with edge clamping."""
    dst = np.arange(n_in * factor, dtype=np.float64)
    src = (dst + 0.5) / factor - 0.5
    src = np.clip(src, 0.0, float(n_in - 1))
    i0 = np.floor(src).astype(np.int64)
    frac = (src - i0).astype(dtype)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, frac


def upsample_bilinear(x: Tensor, factor: int) -> Tensor:
    """Bilinear upsampling with half-pixel sample centers.

    Interpolation uses the form a + f*(b - a), so constant regions
    reproduce their value bit-exactly.
    """
    if not isinstance(factor, int) or factor < 2:
        raise ValueError(f"factor must be an integer >= 2, got {factor!r}")
    xd = x.data
    n, c, h, w = xd.shape
    r0, r1, rf = _bilinear_axis(h, factor, xd.dtype)
    c0, c1, cf = _bilinear_axis(w, factor, xd.dtype)
    rfb = rf[None, None, :, None]
    cfb = cf[None, None, None, :]

    top, bot = xd[:, :, r0, :], xd[:, :, r1, :]
    rows = top + rfb * (bot - top)
    left, right = rows[:, :, :, c0], rows[:, :, :, c1]
    out = Tensor(left + cfb * (right - left))

    def vjp(g: np.ndarray):
        grows = np.zeros((n, c, h * factor, w), dtype=g.dtype)
        np.add.at(grows, (slice(None), slice(None), slice(None), c0), g * (1.0 - cfb))
        np.add.at(grows, (slice(None), slice(None), slice(None), c1), g * cfb)
        gx = np.zeros_like(xd)
        np.add.at(gx, (slice(None), slice(None), r0, slice(None)), grows * (1.0 - rfb))
        np.add.at(gx, (slice(None), slice(None), r1, slice(None)), grows * rfb)
        return (gx,)

    return _maybe_record("upsample_bilinear", out, (x,), vjp)


def pixel_shuffle(x: Tensor, factor: int) -> Tensor:
    """Rearrange (n, c*f*f, h, w) into (n, c, h*f, w*f)."""
    if not isinstance(factor, int) or factor < 2:
        raise ValueError(f"factor must be an integer >= 2, got {factor!r}")
    n, c_in, h, w = x.shape
    f2 = factor * factor
    if c_in % f2 != 0:
        raise ValueError(f"channels ({c_in}) not divisible by factor^2 ({f2})")
    c = c_in // f2
    out_data = (
        x.data.reshape(n, c, factor, factor, h, w)
        .transpose(0, 1, 4, 2, 5, 3)
        .reshape(n, c, h * factor, w * factor)
    )
    out = Tensor(out_data)

    def vjp(g: np.ndarray):
        gx = (
            g.reshape(n, c, h, factor, w, factor)
            .transpose(0, 1, 3, 5, 2, 4)
            .reshape(n, c_in, h, w)
        )
        return (gx,)

    return _maybe_record("pixel_shuffle", out, (x,), vjp)


# ---------------------------------------------------------------------------
# channel statistics


def channel_mean(x: Tensor) -> Tensor:
    """Spatial mean per (sample, channel), shape (n, c, 1, 1)."""
    xd = x.data
    hw = xd.shape[2] * xd.shape[3]
    out = Tensor(xd.mean(axis=(2, 3), keepdims=True))

    def vjp(g: np.ndarray):
        return (np.broadcast_to(g / hw, xd.shape).copy(),)

    return _maybe_record("channel_mean", out, (x,), vjp)


def channel_std(x: Tensor, eps: float = 1e-8) -> Tensor:
    """Spatial standard deviation per (sample, channel).

    Population variance (divide by h*w) stabilised as sqrt(var + eps), so
    the gradient stays finite on constant inputs.
    """
    xd = x.data
    hw = xd.shape[2] * xd.shape[3]
    mu = xd.mean(axis=(2, 3), keepdims=True)
    var = np.square(xd - mu).mean(axis=(2, 3), keepdims=True)
    std = np.sqrt(var + xd.dtype.type(eps))
    out = Tensor(std)

    def vjp(g: np.ndarray):
        # d std / d x_i = (x_i - mu) / (h*w * std); the mean term cancels.
        return (g * (xd - mu) / (hw * std),)

    return _maybe_record("channel_std", out, (x,), vjp)


def channel_stats(x: Tensor, eps: float = 1e-8) -> tuple:
    """(mean, std) channel descriptors, each shaped (n, c, 1, 1)."""
    return channel_mean(x), channel_std(x, eps)


# ---------------------------------------------------------------------------
# reductions


def l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean absolute error over all elements, as a (1,1,1,1) tensor.

    The sub-gradient at exact ties is 0.
    """
    _check_dtypes(pred, target)
    if pred.shape != target.shape:
        raise ValueError(f"l1_loss shapes differ: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    out = Tensor(np.abs(diff).mean(dtype=np.float64).astype(pred.dtype).reshape(1, 1, 1, 1))

    def vjp(g: np.ndarray):
        s = np.sign(diff) / diff.size
        gp = g.reshape(()) * s
        return gp, -gp

    return _maybe_record("l1_loss", out, (pred, target), vjp)


def sum_all(x: Tensor) -> Tensor:
    """Sum of all elements, as a (1,1,1,1) tensor."""
    out = Tensor(x.data.sum(dtype=np.float64).astype(x.dtype).reshape(1, 1, 1, 1))

    def vjp(g: np.ndarray):
        return (np.broadcast_to(g.reshape(()), x.shape).astype(g.dtype).copy(),)

    return _maybe_record("sum_all", out, (x,), vjp)


def assert_finite(t: Tensor, name: str = "tensor") -> Tensor:
    """Raise FloatingPointError if `t` has NaN/Inf; returns `t` unchanged."""
    bad = ~np.isfinite(t.data)
    if bad.any():
        raise FloatingPointError(f"{name} contains {int(bad.sum())} non-finite values")
    return t
