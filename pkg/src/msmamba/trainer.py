"""AdamW training loop, cosine learning-rate schedule and checkpointing.

Training is bitwise reproducible from (seed, config): batch sampling draws
from one generator whose state rides along in every checkpoint, so a
resumed run continues the exact trajectory of an uninterrupted one.

Checkpoints are a little-endian binary format:

    magic "MSMB" | u32 version | u32 config-json-len | config json
    | u64 iteration | u64 param-count
    | per parameter: u16 name-len, name, u8 dtype code, u32 rank, u32 dims, raw values
    | optimizer: u64 step, u64 skipped, f64 beta1/beta2/eps/weight-decay,
      then per-parameter first and second moments (raw values)
    | u32 rng-json-len | bit-generator state json
"""

from __future__ import annotations

import json
import math
import os
import struct
import sys
from dataclasses import dataclass, field

import numpy as np

from . import losses, ops
from .config import Schedule, TrainConfig, dump_train_config
from .data import ImageSample, random_patch_augment
from .modules import Module
from .tensor import ContractViolation, Tape, Tensor, backward, grad_of, no_grad

MAGIC = b"MSMB"
FORMAT_VERSION = 1

_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype(np.float32), 1: np.dtype(np.float64)}


class CheckpointError(IOError):
    """Checkpoint file is missing, truncated, or from a different format."""


class NumericAbort(RuntimeError):
    """Training hit a non-finite loss and stopped."""


# ---------------------------------------------------------------------------
# schedule
# ---------------------------------------------------------------------------


def lr_at(i: int, s: Schedule) -> float:
    """Constant warmup plateau, cosine decay, then the floor."""
    if i < 0:
        raise ContractViolation(f"iteration must be >= 0, got {i}")
    if i < s.warm_iters:
        return s.lr_max
    if i < s.warm_iters + s.decay_iters:
        frac = (i - s.warm_iters) / s.decay_iters
        return s.lr_min + 0.5 * (s.lr_max - s.lr_min) * (1.0 + math.cos(math.pi * frac))
    return s.lr_min


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    """Per-parameter AdamW moments plus the shared counters."""

    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    t: int = 0
    skipped: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4

    @classmethod
    def for_params(cls, params: list, **overrides) -> "OptimizerState":
        state = cls(**overrides)
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
        return state


def adamw_step(params: list, grads: list, state: OptimizerState, lr: float) -> bool:
    """One decoupled-weight-decay Adam update; returns False on a skipped step.

    A step with any non-finite gradient is skipped whole: parameters,
    moments and the step counter all stay untouched (only the skip counter
    moves), so one bad batch cannot poison the moment estimates.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ContractViolation(
            f"optimizer got {len(params)} params, {len(grads)} grads, "
            f"{len(state.m)} moment slots"
        )
    for g in grads:
        if not np.all(np.isfinite(g)):
            state.skipped += 1
            return False
    state.t += 1
    bc1 = 1.0 - state.beta1**state.t
    bc2 = 1.0 - state.beta2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        m_hat = m / bc1
        v_hat = v / bc2
        p.data -= (lr * state.weight_decay) * p.data
        p.data -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return True


def clip_gradients(grads: list, max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm."""
    total = 0.0
    for g in grads:
        total += float(np.sum(g.astype(np.float64) ** 2))
    norm = math.sqrt(total)
    if max_norm > 0.0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads:
            g *= scale
    return norm


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------


def _write_array(f, arr: np.ndarray) -> None:
    f.write(struct.pack("<BI", _DTYPE_CODES[arr.dtype], arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    f.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


class _Reader:
    def __init__(self, buf: bytes, path: str):
        self.buf = buf
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(
                f"{self.path}: truncated at byte {self.pos} "
                f"(wanted {n} more, have {len(self.buf) - self.pos})"
            )
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self) -> np.ndarray:
        code, rank = self.unpack("<BI")
        if code not in _CODE_DTYPES:
            raise CheckpointError(f"{self.path}: unknown dtype code {code} at byte {self.pos}")
        shape = self.unpack(f"<{rank}I")
        dt = _CODE_DTYPES[code]
        n = int(np.prod(shape, dtype=np.int64)) if rank else 1
        raw = self.take(n * dt.itemsize)
        return np.frombuffer(raw, dtype=dt.newbyteorder("<")).astype(dt).reshape(shape)


def save_checkpoint(
    path: str,
    net: Module,
    state: OptimizerState,
    iteration: int,
    rng: np.random.Generator,
    config_json: str = "{}",
) -> None:
    named = list(net.named_parameters())
    with open(path, "wb") as f:
        f.write(MAGIC)
        cfg_bytes = config_json.encode("utf-8")
        f.write(struct.pack("<II", FORMAT_VERSION, len(cfg_bytes)))
        f.write(cfg_bytes)
        f.write(struct.pack("<QQ", iteration, len(named)))
        for name, p in named:
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            _write_array(f, p.data)
        f.write(
            struct.pack(
                "<QQdddd",
                state.t,
                state.skipped,
                state.beta1,
                state.beta2,
                state.eps,
                state.weight_decay,
            )
        )
        for m in state.m:
            _write_array(f, m)
        for v in state.v:
            _write_array(f, v)
        rng_bytes = json.dumps(rng.bit_generator.state).encode("utf-8")
        f.write(struct.pack("<I", len(rng_bytes)))
        f.write(rng_bytes)


@dataclass
class Checkpoint:
    config_json: str
    iteration: int
    params: dict
    state: OptimizerState
    rng_state: dict


def load_checkpoint(path: str) -> Checkpoint:
    try:
        with open(path, "rb") as f:
            buf = f.read()
    except OSError as e:
        raise CheckpointError(f"cannot read {path}: {e.strerror}") from e
    r = _Reader(buf, path)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint file")
    version, cfg_len = r.unpack("<II")
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: format version {version} unsupported (expected {FORMAT_VERSION})"
        )
    config_json = r.take(cfg_len).decode("utf-8")
    iteration, n_params = r.unpack("<QQ")
    params = {}
    order = []
    for _ in range(n_params):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        params[name] = r.array()
        order.append(name)
    t, skipped, beta1, beta2, eps, wd = r.unpack("<QQdddd")
    state = OptimizerState(
        t=t, skipped=skipped, beta1=beta1, beta2=beta2, eps=eps, weight_decay=wd
    )
    state.m = [r.array() for _ in order]
    state.v = [r.array() for _ in order]
    (rng_len,) = r.unpack("<I")
    rng_state = json.loads(r.take(rng_len).decode("utf-8"))
    return Checkpoint(config_json, iteration, params, state, rng_state)


def restore_parameters(net: Module, params: dict) -> None:
    named = dict(net.named_parameters())
    missing = sorted(set(named) - set(params))
    extra = sorted(set(params) - set(named))
    if missing or extra:
        raise CheckpointError(
            f"parameter table mismatch: missing {missing[:3]}, unexpected {extra[:3]}"
        )
    for name, p in named.items():
        saved = params[name]
        if saved.shape != p.data.shape:
            raise CheckpointError(
                f"parameter {name}: saved shape {saved.shape} != model {p.data.shape}"
            )
        p.data[...] = saved.astype(p.data.dtype, copy=False)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


def assemble_batch(samples: list, cfg: TrainConfig, rng: np.random.Generator):
    """Draw batch_size augmented patches; one RNG draw stream for all picks."""
    degraded, clean = [], []
    for _ in range(cfg.batch_size):
        idx = int(rng.integers(0, len(samples)))
        aug_seed = int(rng.integers(0, 2**63))
        c, d = random_patch_augment(samples[idx], cfg.patch, aug_seed)
        clean.append(c)
        degraded.append(d)
    dt = cfg.network.np_dtype
    return (
        np.stack(degraded).astype(dt, copy=False),
        np.stack(clean).astype(dt, copy=False),
    )


@dataclass
class TrainRecord:
    iteration: int
    l1: float
    edge: float
    fft: float
    total: float
    lr: float
    psnr: float


def _format_log(rec: TrainRecord) -> str:
    return (
        f"{rec.iteration}\t{rec.l1:.6f}\t{rec.edge:.6f}\t{rec.fft:.6f}"
        f"\t{rec.total:.6f}\t{rec.lr:.6e}"
    )


def train_loop(
    net: Module,
    samples: list,
    cfg: TrainConfig,
    resume: str = "",
    log_stream=None,
    progress_every: int = 0,
) -> list:
    """Run cfg.iters optimization steps; returns per-iteration records.

    Checkpoints land in cfg.out_dir every checkpoint_every iterations and
    once at the end. A non-finite loss aborts with a pointer to the last
    checkpoint written.
    """
    if not samples:
        raise ContractViolation("train_loop needs at least one sample")
    cfg.validate()
    os.makedirs(cfg.out_dir, exist_ok=True)
    params = [p for _, p in net.named_parameters()]
    config_json = dump_train_config(cfg)

    start_iter = 0
    rng = np.random.default_rng(cfg.seed)
    state = OptimizerState.for_params(params)
    if resume:
        ck = load_checkpoint(resume)
        restore_parameters(net, ck.params)
        state = ck.state
        rng.bit_generator.state = ck.rng_state
        start_iter = ck.iteration

    def checkpoint_path(i):
        return os.path.join(cfg.out_dir, f"ckpt_{i:06d}.msmb")

    def write_checkpoint(i):
        save_checkpoint(checkpoint_path(i), net, state, i, rng, config_json)
        return checkpoint_path(i)

    last_good = resume or ""
    records = []
    log_lines = []
    for i in range(start_iter, cfg.iters):
        x_np, y_np = assemble_batch(samples, cfg, rng)
        x = Tensor(x_np)
        y = Tensor(y_np)
        net.zero_grad()
        with Tape():
            pred = net(x)
            total, (c_l1, c_edge, c_fft) = losses.total_loss(pred, y, cfg.loss_weights)
            total_val = total.item()
            if not math.isfinite(total_val):
                raise NumericAbort(
                    f"non-finite loss {total_val} at iteration {i}; "
                    f"last good checkpoint: {last_good or '(none written)'}"
                )
            backward(total)
        grads = [grad_of(p) for p in params]
        clip_gradients(grads, cfg.grad_clip)
        lr = lr_at(i, cfg.schedule)
        adamw_step(params, grads, state, lr)
        with no_grad():
            mse = float(np.mean((pred.data - y_np) ** 2))
        batch_psnr = float("inf") if mse == 0.0 else 10.0 * math.log10(1.0 / mse)
        rec = TrainRecord(
            i, c_l1.item(), c_edge.item(), c_fft.item(), total_val, lr, batch_psnr
        )
        records.append(rec)
        log_lines.append(_format_log(rec))
        if log_stream is not None:
            print(_format_log(rec), file=log_stream)
        if progress_every and (i + 1) % progress_every == 0:
            print(
                f"iter {i + 1}/{cfg.iters} total {total_val:.4f} "
                f"psnr {batch_psnr:.2f} lr {lr:.2e}",
                file=sys.stderr,
            )
        done = i + 1
        if done % cfg.checkpoint_every == 0 or done == cfg.iters:
            last_good = write_checkpoint(done)
    log_path = os.path.join(cfg.out_dir, "metrics.tsv")
    mode = "a" if resume else "w"
    with open(log_path, mode) as f:
        for line in log_lines:
            f.write(line + "\n")
    return records
