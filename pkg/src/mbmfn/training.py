"""L1/Adam training loop, learning-rate schedule and checkpoint IO.

Checkpoints are a little-endian binary container: magic ``MBMF``, format
version, the model config as JSON, the named parameter tensors, an
optional training-state section (counters, RNG state, Adam moments) and a
trailing CRC32 over everything before it.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .blocks import MBMFN, ModelConfig, ParamStore
from .data import DatasetManifest, sample_patch_pair
from .tensor import Tape, Tensor, l1_loss

__all__ = [
    "TrainConfig",
    "TrainState",
    "learning_rate",
    "adam_step",
    "save_checkpoint",
    "load_checkpoint",
    "Checkpoint",
    "train",
    "TrainResult",
]

CHECKPOINT_MAGIC = b"MBMF"
CHECKPOINT_VERSION = 1

_DTYPE_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


@dataclass
class TrainConfig:
    """Optimisation protocol; defaults are the full training recipe."""

    seed: int = 0
    epochs: int = 400
    iters_per_epoch: int = 1000
    batch_size: int = 24
    hr_patch: int = 192
    lr0: float = 2e-4
    lr_decay_period: int = 200
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    augment: bool = False
    checkpoint_period: int = 25
    memory_budget_mb: int = 8192

    def __post_init__(self):
        for name in ("epochs", "iters_per_epoch", "batch_size", "hr_patch",
                     "lr_decay_period", "checkpoint_period", "memory_budget_mb"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.lr0 <= 0:
            raise ValueError(f"lr0 must be > 0, got {self.lr0}")
        if not 0.0 <= self.beta1 < 1.0 or not 0.0 <= self.beta2 < 1.0:
            raise ValueError("beta1/beta2 must lie in [0, 1)")
        if self.eps <= 0:
            raise ValueError(f"eps must be > 0, got {self.eps}")


@dataclass
class TrainState:
    """Mutable optimiser state carried across iterations."""

    epoch: int = 0
    iteration: int = 0
    lr: float = 0.0
    adam_step: int = 0
    moments: dict = field(default_factory=dict)  # name -> (m, v) arrays
    rng_state: Optional[dict] = None


def learning_rate(cfg: TrainConfig, epoch: int) -> float:
    """lr0 halved after every `lr_decay_period` epochs (step schedule)."""
    return cfg.lr0 * 0.5 ** (epoch // cfg.lr_decay_period)


def adam_step(
    params: ParamStore,
    grads: dict,
    state: TrainState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update over every parameter in `params`.

    Shared (aliased) parameters appear in the store once, so they receive
    exactly one update from their already-summed gradient.  A non-finite
    gradient aborts before any parameter is touched.
    """
    for name, _ in params.items():
        g = grads.get(name)
        if g is None:
            raise KeyError(f"missing gradient for parameter {name!r}")
        if not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
    state.adam_step += 1
    t = state.adam_step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads[name]
        m, v = state.moments.get(name, (None, None))
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        state.moments[name] = (m, v)
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        params.set(name, Tensor(p.data - update.astype(p.dtype)))


# ---------------------------------------------------------------------------
# checkpoint container


def _pack_entry(name: str, arr: np.ndarray) -> bytes:
    if arr.ndim != 4:
        raise ValueError(f"entry {name!r} must be 4-D, got shape {arr.shape}")
    tag = _DTYPE_TAGS.get(arr.dtype)
    if tag is None:
        raise ValueError(f"entry {name!r} has unsupported dtype {arr.dtype}")
    nb = name.encode("utf-8")
    head = struct.pack("<I", len(nb)) + nb + struct.pack("<B4I", tag, *arr.shape)
    return head + np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes()


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise ValueError(
                f"truncated checkpoint: wanted {n} bytes at offset {self.pos}, "
                f"file has {len(self.buf)}"
            )
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u8(self) -> int:
        return self.take(1)[0]


def _read_entry(r: _Reader) -> tuple:
    name = r.take(r.u32()).decode("utf-8")
    tag = r.u8()
    if tag not in _TAG_DTYPES:
        raise ValueError(f"entry {name!r}: unknown dtype tag {tag}")
    dims = struct.unpack("<4I", r.take(16))
    dtype = _TAG_DTYPES[tag]
    count = int(np.prod(dims))
    raw = r.take(count * dtype.itemsize)
    arr = np.frombuffer(raw, dtype=dtype.newbyteorder("<")).astype(dtype).reshape(dims)
    return name, arr


def _state_to_json(state: TrainState) -> str:
    d = {
        "epoch": state.epoch,
        "iteration": state.iteration,
        "lr": state.lr,
        "adam_step": state.adam_step,
        "rng_state": state.rng_state,
    }
    return json.dumps(d, sort_keys=True, separators=(",", ":"))


def save_checkpoint(
    path,
    config: ModelConfig,
    params: ParamStore,
    state: Optional[TrainState] = None,
) -> None:
    """Write the binary checkpoint container described in the module doc."""
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    cfg_json = json.dumps(asdict(config), sort_keys=True, separators=(",", ":")).encode()
    parts.append(struct.pack("<I", len(cfg_json)))
    parts.append(cfg_json)
    names = params.names()
    parts.append(struct.pack("<I", len(names)))
    for name in names:
        parts.append(_pack_entry(name, params[name].data))
    if state is None:
        parts.append(struct.pack("<B", 0))
    else:
        parts.append(struct.pack("<B", 1))
        sj = _state_to_json(state).encode()
        parts.append(struct.pack("<I", len(sj)))
        parts.append(sj)
        moment_names = sorted(state.moments)
        parts.append(struct.pack("<I", 2 * len(moment_names)))
        for name in moment_names:
            m, v = state.moments[name]
            parts.append(_pack_entry(f"{name}.m", m))
            parts.append(_pack_entry(f"{name}.v", v))
    body = b"".join(parts)
    blob = body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)
    Path(path).write_bytes(blob)


@dataclass
class Checkpoint:
    config: ModelConfig
    params: ParamStore
    state: Optional[TrainState]

    def model(self) -> MBMFN:
        return MBMFN(self.config, self.params)


def load_checkpoint(path) -> Checkpoint:
    """Read and verify a checkpoint; raises ValueError on any corruption."""
    blob = Path(path).read_bytes()
    if len(blob) < 8:
        raise ValueError(f"{path}: too short to be a checkpoint ({len(blob)} bytes)")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise ValueError(f"{path}: CRC mismatch, file is corrupt")
    r = _Reader(body)
    if r.take(4) != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad magic, not a checkpoint file")
    version = r.u32()
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    cfg_dict = json.loads(r.take(r.u32()).decode("utf-8"))
    config = ModelConfig(**cfg_dict)
    params = ParamStore()
    for _ in range(r.u32()):
        name, arr = _read_entry(r)
        params.add(name, Tensor(arr))
    state = None
    if r.u8():
        sd = json.loads(r.take(r.u32()).decode("utf-8"))
        state = TrainState(
            epoch=sd["epoch"],
            iteration=sd["iteration"],
            lr=sd["lr"],
            adam_step=sd["adam_step"],
            rng_state=sd["rng_state"],
        )
        raw = {}
        for _ in range(r.u32()):
            name, arr = _read_entry(r)
            raw[name] = arr
        for name in sorted({n.rsplit(".", 1)[0] for n in raw}):
            state.moments[name] = (raw[f"{name}.m"], raw[f"{name}.v"])
    if r.pos != len(body):
        raise ValueError(f"{path}: {len(body) - r.pos} trailing bytes after payload")
    return Checkpoint(config, params, state)


# ---------------------------------------------------------------------------
# training loop


def estimate_activation_mb(mcfg: ModelConfig, tcfg: TrainConfig) -> float:
    """Rough upper bound on tape memory for one training iteration."""
    C, Cd = mcfg.trunk_channels, mcfg.distill_channels
    lr_hw = (tcfg.hr_patch // mcfg.scale) ** 2
    # Channel-units saved at LR resolution per block, plus reconstruction
    # activations at the upsampled resolutions and the IO planes.
    block_units = 40 * Cd + 4 * C
    units = C + mcfg.num_blocks * block_units
    recon_hw = 0
    f = 1
    for s in mcfg.recon_steps():
        f *= s
        recon_hw += 6 * C * f * f
    units += recon_hw + 4 * mcfg.scale ** 2 * mcfg.in_channels
    return 4.0 * tcfg.batch_size * lr_hw * units / 1e6


@dataclass
class TrainResult:
    out_dir: Path
    loss_log: Path
    last_checkpoint: Path
    best_checkpoint: Path
    first_iter_loss: float
    epoch_means: list


def _batch_tensors(manifest, mcfg, tcfg, rng) -> tuple:
    lrs, hrs = [], []
    for _ in range(tcfg.batch_size):
        pair = sample_patch_pair(manifest, mcfg.scale, tcfg.hr_patch, rng)
        lr_arr, hr_arr = pair.lr.data, pair.hr.data
        if tcfg.augment:
            # The same rotation/flip applies to both planes so the pair
            # stays aligned.
            quarter = int(rng.integers(4))
            flip = bool(rng.integers(2))
            lr_arr, hr_arr = np.rot90(lr_arr, quarter), np.rot90(hr_arr, quarter)
            if flip:
                lr_arr, hr_arr = lr_arr[:, ::-1], hr_arr[:, ::-1]
        lrs.append(np.ascontiguousarray(lr_arr))
        hrs.append(np.ascontiguousarray(hr_arr))
    lr = Tensor(np.stack(lrs)[:, None, :, :])
    hr = Tensor(np.stack(hrs)[:, None, :, :])
    return lr, hr


def train(
    model: MBMFN,
    manifest: DatasetManifest,
    tcfg: TrainConfig,
    out_dir,
) -> TrainResult:
    """Run the full training protocol and leave artefacts in `out_dir`.

    Writes ``loss.csv`` (header ``epoch,iter,lr,l1``, one row per
    iteration), periodic ``epoch_NNNN.ckpt`` files, ``best.ckpt`` for the
    lowest epoch-mean loss and ``last.ckpt`` at the end.  A non-finite
    loss or gradient aborts immediately; checkpoints already on disk are
    left in place.
    """
    est = estimate_activation_mb(model.config, tcfg)
    if est > tcfg.memory_budget_mb:
        raise ValueError(
            f"estimated activation memory {est:.0f} MB exceeds budget "
            f"{tcfg.memory_budget_mb} MB; lower batch_size or hr_patch"
        )
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    loss_log = out_dir / "loss.csv"
    rng = np.random.default_rng(tcfg.seed)
    state = TrainState()
    best = (float("inf"), None)
    first_iter_loss = float("nan")
    epoch_means = []
    with loss_log.open("w") as logf:
        logf.write("epoch,iter,lr,l1\n")
        for epoch in range(tcfg.epochs):
            state.epoch = epoch
            state.lr = learning_rate(tcfg, epoch)
            total = 0.0
            for it in range(1, tcfg.iters_per_epoch + 1):
                state.iteration = it
                lr_batch, hr_batch = _batch_tensors(manifest, model.config, tcfg, rng)
                with Tape() as tape:
                    pred = model.forward(lr_batch)
                    loss = l1_loss(pred, hr_batch)
                lval = loss.item()
                if not np.isfinite(lval):
                    raise FloatingPointError(
                        f"non-finite loss at epoch {epoch} iter {it}; "
                        f"last checkpoints kept in {out_dir}"
                    )
                tape.backward(loss)
                grads = {name: tape.grad(p) for name, p in model.params.items()}
                adam_step(
                    model.params, grads, state, state.lr,
                    tcfg.beta1, tcfg.beta2, tcfg.eps,
                )
                logf.write(f"{epoch},{it},{state.lr!r},{lval!r}\n")
                if epoch == 0 and it == 1:
                    first_iter_loss = lval
                total += lval
            mean = total / tcfg.iters_per_epoch
            epoch_means.append(mean)
            state.rng_state = rng.bit_generator.state
            if (epoch + 1) % tcfg.checkpoint_period == 0:
                save_checkpoint(
                    out_dir / f"epoch_{epoch + 1:04d}.ckpt",
                    model.config, model.params, state,
                )
            if mean < best[0]:
                best = (mean, epoch)
                save_checkpoint(out_dir / "best.ckpt", model.config, model.params, state)
    save_checkpoint(out_dir / "last.ckpt", model.config, model.params, state)
    return TrainResult(
        out_dir=out_dir,
        loss_log=loss_log,
        last_checkpoint=out_dir / "last.ckpt",
        best_checkpoint=out_dir / "best.ckpt",
        first_iter_loss=first_iter_loss,
        epoch_means=epoch_means,
    )
