"""Super-resolution network built from taped tensor ops.

Layout: a 3x3 head lifts the input plane to the trunk width; a chain of
multi-branch feature-multiplexing fusion blocks (MBMFB) refines it; an
upsampling chain with channel attention reconstructs the target size; a
3x3 tail projects back to image channels and a bilinear skip from the
input supplies the low frequencies.

Parameters live in a :class:`ParamStore` keyed by hierarchical names
(``head.*``, ``block{i}.branch{k}.*``, ``recon.*``, ``tail.*``).  Weight
sharing between reconstruction steps is expressed by giving the steps the
same name prefix, so shared tensors exist (and are counted) once.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from .tensor import (
    Tensor,
    add,
    channel_mean,
    channel_scale,
    channel_stats,
    concat_channels,
    conv2d,
    leaky_relu,
    pixel_shuffle,
    relu,
    sigmoid,
    upsample_bilinear,
    upsample_nearest,
)

__all__ = [
    "BRANCH_MODES",
    "ATTENTION_KINDS",
    "UPSAMPLERS",
    "BRANCH_COUNT",
    "ModelConfig",
    "ParamStore",
    "init_params",
    "count_params",
    "param_breakdown",
    "param_layout",
    "lerca_forward",
    "attention_forward",
    "residual_block",
    "mbmfb_forward",
    "ulerca_forward",
    "mbmfn_forward",
    "MBMFN",
]

BRANCH_MODES = ("BRW", "ARW", "AAW")
ATTENTION_KINDS = ("none", "SE", "CA", "RCA", "CCA", "LERCA")
UPSAMPLERS = ("nearest_direct", "nearest_stepwise", "subpixel")

# Branches per block and the bottleneck ratio of the squeeze-style
# attention variants are fixed by the architecture.
BRANCH_COUNT = 4
ATTENTION_REDUCTION = 4

# Variance floor used by the mean+std channel descriptors.
CHANNEL_STATS_EPS = 1e-8

MIN_INPUT_SIZE = 8


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters; the defaults are the full model.

    `branch_input_mode` selects what each branch hands to the next one:
    the residual pair's raw conv output ("BRW"), the output after the
    skip addition ("ARW", default), or the output after attention
    ("AAW").  `basic_branch` appends branch 2's pre-attention output to
    the fusion concat as an identity-friendly bypass.
    """

    scale: int = 4
    in_channels: int = 1
    num_blocks: int = 6
    trunk_channels: int = 56
    distill_channels: int = 40
    branch_input_mode: str = "ARW"
    basic_branch: bool = True
    attention_kind: str = "LERCA"
    upsampler: str = "nearest_stepwise"
    recon_attention: bool = True
    recon_weight_sharing: bool = True
    leaky_slope: float = 0.05

    def __post_init__(self):
        if self.scale not in (2, 3, 4):
            raise ValueError(f"scale must be 2, 3 or 4, got {self.scale}")
        if self.in_channels < 1:
            raise ValueError(f"in_channels must be >= 1, got {self.in_channels}")
        if self.num_blocks < 1:
            raise ValueError(f"num_blocks must be >= 1, got {self.num_blocks}")
        if self.trunk_channels < 1 or self.distill_channels < 1:
            raise ValueError("channel widths must be >= 1")
        if self.distill_channels > self.trunk_channels:
            raise ValueError(
                f"distill_channels ({self.distill_channels}) must not exceed "
                f"trunk_channels ({self.trunk_channels})"
            )
        if self.branch_input_mode not in BRANCH_MODES:
            raise ValueError(
                f"branch_input_mode must be one of {BRANCH_MODES}, "
                f"got {self.branch_input_mode!r}"
            )
        if self.attention_kind not in ATTENTION_KINDS:
            raise ValueError(
                f"attention_kind must be one of {ATTENTION_KINDS}, "
                f"got {self.attention_kind!r}"
            )
        if self.upsampler not in UPSAMPLERS:
            raise ValueError(
                f"upsampler must be one of {UPSAMPLERS}, got {self.upsampler!r}"
            )
        if not 0.0 < self.leaky_slope < 1.0:
            raise ValueError(f"leaky_slope must be in (0, 1), got {self.leaky_slope}")

    def recon_steps(self) -> tuple:
        """Upsampling factor of each reconstruction step, in order."""
        if self.upsampler == "subpixel":
            return ()
        if self.upsampler == "nearest_direct":
            return (self.scale,)
        # Stepwise: x4 is two cascaded x2 steps; x2/x3 are a single step.
        return (2, 2) if self.scale == 4 else (self.scale,)

    def shares_recon_weights(self) -> bool:
        return self.recon_weight_sharing and len(self.recon_steps()) > 1

    def recon_prefixes(self) -> tuple:
        steps = self.recon_steps()
        if self.shares_recon_weights():
            return tuple("recon.step" for _ in steps)
        return tuple(f"recon.step{j}" for j in range(len(steps)))


class ParamStore:
    """Named parameter tensors in deterministic insertion order."""

    def __init__(self):
        self._entries: dict[str, Tensor] = {}

    def add(self, name: str, tensor: Tensor) -> None:
        if name in self._entries:
            raise ValueError(f"duplicate parameter name {name!r}")
        self._entries[name] = tensor

    def set(self, name: str, tensor: Tensor) -> None:
        """Replace an existing entry; shape and dtype must be preserved."""
        old = self._entries[name]
        if old.shape != tensor.shape or old.dtype != tensor.dtype:
            raise ValueError(
                f"cannot change {name!r} from {old.shape}/{old.dtype.name} "
                f"to {tensor.shape}/{tensor.dtype.name}"
            )
        self._entries[name] = tensor

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._entries[name]
        except KeyError:
            raise KeyError(f"no parameter named {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def names(self) -> list:
        return list(self._entries)

    def items(self) -> Iterator:
        return iter(self._entries.items())


def _attention_layout(prefix: str, kind: str, channels: int) -> list:
    """(name, shape, init) triples for one attention module."""
    if kind == "none":
        return []
    if kind == "LERCA":
        # Zero init keeps the mask at sigmoid(0) = 0.5 from the start.
        return [
            (f"{prefix}.conv.weight", (channels, channels, 1, 1), "zero"),
            (f"{prefix}.conv.bias", (1, channels, 1, 1), "zero"),
        ]
    mid = max(channels // ATTENTION_REDUCTION, 1)
    return [
        (f"{prefix}.conv1.weight", (mid, channels, 1, 1), "conv"),
        (f"{prefix}.conv1.bias", (1, mid, 1, 1), "zero"),
        (f"{prefix}.conv2.weight", (channels, mid, 1, 1), "conv"),
        (f"{prefix}.conv2.bias", (1, channels, 1, 1), "zero"),
    ]


def param_layout(cfg: ModelConfig) -> list:
    """Every parameter of the model as (name, shape, init) in build order.

    Shared reconstruction steps contribute their names exactly once.
    """
    C, Cd = cfg.trunk_channels, cfg.distill_channels
    out: list = [
        ("head.weight", (C, cfg.in_channels, 3, 3), "conv"),
        ("head.bias", (1, C, 1, 1), "zero"),
    ]
    for i in range(cfg.num_blocks):
        p = f"block{i}"
        out += [
            (f"{p}.distill.weight", (Cd, C, 1, 1), "conv"),
            (f"{p}.distill.bias", (1, Cd, 1, 1), "zero"),
        ]
        for k in range(1, BRANCH_COUNT + 1):
            bp = f"{p}.branch{k}"
            cin = Cd if k == 1 else 2 * Cd
            out += [
                (f"{bp}.conv1.weight", (Cd, cin, 3, 3), "conv"),
                (f"{bp}.conv1.bias", (1, Cd, 1, 1), "zero"),
                (f"{bp}.conv2.weight", (Cd, Cd, 3, 3), "proj"),
                (f"{bp}.conv2.bias", (1, Cd, 1, 1), "zero"),
            ]
            out += _attention_layout(f"{bp}.att", cfg.attention_kind, Cd)
        fuse_in = (BRANCH_COUNT + (1 if cfg.basic_branch else 0)) * Cd
        out += [
            (f"{p}.fuse.weight", (C, fuse_in, 1, 1), "proj"),
            (f"{p}.fuse.bias", (1, C, 1, 1), "zero"),
        ]
        out += _attention_layout(f"{p}.att", cfg.attention_kind, C)
    if cfg.upsampler == "subpixel":
        out += [
            ("recon.sub.weight", (C * cfg.scale ** 2, C, 3, 3), "conv"),
            ("recon.sub.bias", (1, C * cfg.scale ** 2, 1, 1), "zero"),
        ]
    else:
        for prefix in dict.fromkeys(cfg.recon_prefixes()):
            out += [
                (f"{prefix}.conv1.weight", (C, C, 3, 3), "conv"),
                (f"{prefix}.conv1.bias", (1, C, 1, 1), "zero"),
            ]
            if cfg.recon_attention:
                out += _attention_layout(f"{prefix}.att", "LERCA", C)
            out += [
                (f"{prefix}.conv2.weight", (C, C, 3, 3), "conv"),
                (f"{prefix}.conv2.bias", (1, C, 1, 1), "zero"),
            ]
    out += [
        ("tail.weight", (cfg.in_channels, C, 3, 3), "proj"),
        ("tail.bias", (1, cfg.in_channels, 1, 1), "zero"),
    ]
    return out


# Residual-emitting convs start 10x smaller than the Kaiming bound so
# every block opens close to the identity; without this the stacked
# residual adds blow early activations up by orders of magnitude.
PROJ_INIT_SCALE = 0.1


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> ParamStore:
    """Deterministic parameter initialisation for `cfg`.

    Conv weights draw from a Kaiming-style fan-in uniform distribution
    with the leaky-relu gain sqrt(2 / (1 + slope^2)); convs that feed a
    residual add ("proj" entries) are scaled down by PROJ_INIT_SCALE;
    biases and the LERCA 1x1 layers start at zero so every attention
    mask opens at 0.5.
    """
    rng = np.random.default_rng(seed)
    gain = math.sqrt(2.0 / (1.0 + cfg.leaky_slope ** 2))
    store = ParamStore()
    for name, shape, kind in param_layout(cfg):
        if kind == "zero":
            data = np.zeros(shape, dtype=dtype)
        else:
            fan_in = shape[1] * shape[2] * shape[3]
            bound = gain * math.sqrt(3.0 / fan_in)
            if kind == "proj":
                bound *= PROJ_INIT_SCALE
            data = rng.uniform(-bound, bound, size=shape).astype(dtype)
        store.add(name, Tensor(data))
    return store


def count_params(store: ParamStore) -> int:
    """Total scalar count; aliased (shared) tensors are stored once."""
    return sum(t.size for _, t in store.items())


def param_breakdown(store: ParamStore) -> dict:
    """Nested {group: {subgroup: count}} keyed by the first two name parts."""
    out: dict = {}
    for name, t in store.items():
        parts = name.split(".")
        group = parts[0]
        sub = parts[1] if len(parts) > 2 else ""
        out.setdefault(group, {})
        out[group][sub] = out[group].get(sub, 0) + t.size
    return out


# ---------------------------------------------------------------------------
# forward passes


def lerca_forward(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Channel attention from mean+std descriptors, with a residual jump.

    The descriptor passes through a single full-width 1x1 conv (no
    bottleneck) and a sigmoid; the output is x + x * mask.
    """
    mean, std = channel_stats(x, CHANNEL_STATS_EPS)
    desc = add(mean, std)
    mask = sigmoid(conv2d(desc, weight, bias))
    return add(x, channel_scale(x, mask))


def attention_forward(kind: str, x: Tensor, params: ParamStore, prefix: str) -> Tensor:
    """Apply one attention variant to `x` using parameters under `prefix`.

    "SE" and "CA" share the squeeze-excite form sigmoid(W2 relu(W1 avg));
    "RCA" adds an outer residual to that; "CCA" swaps the descriptor for
    mean+std; "none" is the identity.
    """
    if kind == "none":
        return x
    if kind == "LERCA":
        return lerca_forward(
            x, params[f"{prefix}.conv.weight"], params[f"{prefix}.conv.bias"]
        )
    if kind not in ATTENTION_KINDS:
        raise ValueError(f"unknown attention kind {kind!r}")
    if kind == "CCA":
        mean, std = channel_stats(x, CHANNEL_STATS_EPS)
        desc = add(mean, std)
    else:
        desc = channel_mean(x)
    z = relu(conv2d(desc, params[f"{prefix}.conv1.weight"], params[f"{prefix}.conv1.bias"]))
    mask = sigmoid(conv2d(z, params[f"{prefix}.conv2.weight"], params[f"{prefix}.conv2.bias"]))
    scaled = channel_scale(x, mask)
    return add(x, scaled) if kind == "RCA" else scaled


def _residual_convs(x: Tensor, params: ParamStore, prefix: str, slope: float) -> Tensor:
    """conv3x3 -> leaky -> conv3x3, without the skip addition."""
    y = conv2d(x, params[f"{prefix}.conv1.weight"], params[f"{prefix}.conv1.bias"])
    y = leaky_relu(y, slope)
    return conv2d(y, params[f"{prefix}.conv2.weight"], params[f"{prefix}.conv2.bias"])


def residual_block(
    x: Tensor, params: ParamStore, prefix: str, slope: float, skip_source: Tensor
) -> Tensor:
    """Two 3x3 convs with a leaky gap, plus `skip_source`.

    The skip input is explicit because the branches inside a block add
    the block's distilled features rather than their own input.
    """
    return add(_residual_convs(x, params, prefix, slope), skip_source)


def mbmfb_forward(x: Tensor, params: ParamStore, prefix: str, cfg: ModelConfig) -> Tensor:
    """One multi-branch feature-multiplexing fusion block.

    A 1x1 conv distils the trunk to the branch width.  Branch 1 consumes
    the distilled features; each later branch consumes its predecessor's
    handoff concatenated with the distilled features.  Every branch is a
    residual pair (skip from the distilled features) followed by
    attention.  The attended branch outputs, plus branch 2's residual
    output when the basic branch is on, concatenate into a 1x1 fusion
    conv, a final attention, and a skip from the block input.
    """
    distilled = conv2d(
        x, params[f"{prefix}.distill.weight"], params[f"{prefix}.distill.bias"]
    )
    att_outs = []
    handoff: Optional[Tensor] = None
    basic: Optional[Tensor] = None
    for k in range(1, BRANCH_COUNT + 1):
        bp = f"{prefix}.branch{k}"
        xin = distilled if k == 1 else concat_channels([handoff, distilled])
        pre = _residual_convs(xin, params, bp, cfg.leaky_slope)
        res = add(pre, distilled)
        att = attention_forward(cfg.attention_kind, res, params, f"{bp}.att")
        if cfg.branch_input_mode == "BRW":
            handoff = pre
        elif cfg.branch_input_mode == "ARW":
            handoff = res
        else:
            handoff = att
        if k == 2:
            basic = res
        att_outs.append(att)
    parts = att_outs + ([basic] if cfg.basic_branch else [])
    fused = conv2d(
        concat_channels(parts),
        params[f"{prefix}.fuse.weight"],
        params[f"{prefix}.fuse.bias"],
    )
    gated = attention_forward(cfg.attention_kind, fused, params, f"{prefix}.att")
    return add(gated, x)


def ulerca_forward(
    x: Tensor, params: ParamStore, prefix: str, step_factor: int, cfg: ModelConfig
) -> Tensor:
    """One reconstruction step: nearest upsample, conv, attention, conv."""
    if step_factor not in (2, 3, 4):
        raise ValueError(f"step_factor must be 2, 3 or 4, got {step_factor}")
    up = upsample_nearest(x, step_factor)
    y = conv2d(up, params[f"{prefix}.conv1.weight"], params[f"{prefix}.conv1.bias"])
    y = leaky_relu(y, cfg.leaky_slope)
    if cfg.recon_attention:
        y = lerca_forward(
            y, params[f"{prefix}.att.conv.weight"], params[f"{prefix}.att.conv.bias"]
        )
    return conv2d(y, params[f"{prefix}.conv2.weight"], params[f"{prefix}.conv2.bias"])


def mbmfn_forward(img: Tensor, params: ParamStore, cfg: ModelConfig) -> Tensor:
    """Full network: features, blocks, reconstruction, bilinear skip."""
    if img.c != cfg.in_channels:
        raise ValueError(f"input has {img.c} channels, expected {cfg.in_channels}")
    if img.h < MIN_INPUT_SIZE or img.w < MIN_INPUT_SIZE:
        raise ValueError(
            f"input must be at least {MIN_INPUT_SIZE}x{MIN_INPUT_SIZE}, "
            f"got {img.h}x{img.w}"
        )
    feat = conv2d(img, params["head.weight"], params["head.bias"])
    for i in range(cfg.num_blocks):
        feat = mbmfb_forward(feat, params, f"block{i}", cfg)
    if cfg.upsampler == "subpixel":
        feat = pixel_shuffle(
            conv2d(feat, params["recon.sub.weight"], params["recon.sub.bias"]),
            cfg.scale,
        )
    else:
        for prefix, step in zip(cfg.recon_prefixes(), cfg.recon_steps()):
            feat = ulerca_forward(feat, params, prefix, step, cfg)
    detail = conv2d(feat, params["tail.weight"], params["tail.bias"])
    return add(detail, upsample_bilinear(img, cfg.scale))


class MBMFN:
    """A configured network bound to its parameter store."""

    def __init__(self, config: ModelConfig, params: ParamStore):
        self.config = config
        self.params = params

    @classmethod
    def create(cls, config: ModelConfig, seed: int = 0, dtype=np.float32) -> "MBMFN":
        return cls(config, init_params(config, seed=seed, dtype=dtype))

    def forward(self, img: Tensor) -> Tensor:
        return mbmfn_forward(img, self.params, self.config)

    def count_params(self) -> int:
        return count_params(self.params)
