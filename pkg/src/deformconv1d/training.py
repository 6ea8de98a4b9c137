"""Synthetic alignment-jitter task and a single-block training harness.

Each example hides a fixed multi-channel template in Gaussian noise. The
template's frames land at positions displaced by a smooth per-frame jitter of
at most ``jitter`` frames, so detecting covered frames rewards a temporal
filter that can re-align its taps to the local warp; with ``jitter`` zero a
rigid kernel is already optimal. Frame labels are 1 exactly on the (distinct)
covered positions, so the positive fraction per example is always
``template_length / t``.

The template repeats a short base pattern (``template_period`` frames). That
keeps the number of distinct frame phases well below the channel count, so
the rigid depthwise filter bank can fully represent the matched detector for
the undeformed task; learned offsets then buy nothing at jitter 0 while still
paying off once the placement warps.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .block import DeformableConvBlock
from .conv import offset_forward
from .errors import ConfigError, DivergenceError
from .optim import Adam
from .tensorio import write_tensor_file


@dataclass(frozen=True)
class ToyTask:
    seed: int
    batch_size: int = 8
    t: int = 64
    f: int = 16
    jitter: int = 5
    template_length: int = 32
    template_period: int = 2
    noise_std: float = 1.0

    def __post_init__(self):
        if self.template_length < 1 or self.t < 1:
            raise ConfigError("template_length and t must be >= 1")
        if not 1 <= self.template_period <= self.template_length:
            raise ConfigError(
                f"template_period must be in [1, template_length], "
                f"got {self.template_period}")
        if self.jitter < 0:
            raise ConfigError(f"jitter must be >= 0, got {self.jitter}")
        if self.template_length + 2 * self.jitter > self.t:
            raise ConfigError(
                f"template of {self.template_length} frames with jitter "
                f"{self.jitter} does not fit in t={self.t}")


def _task_template(task: ToyTask) -> np.ndarray:
    rng = np.random.default_rng([task.seed, 17])
    base = rng.standard_normal((task.template_period, task.f))
    reps = -(-task.template_length // task.template_period)
    return np.tile(base, (reps, 1))[: task.template_length]


def _jitter_positions(rng, task: ToyTask) -> np.ndarray:
    """Distinct, increasing placement positions with per-frame deviation <= J."""
    j = task.jitter
    length = task.template_length
    start = int(rng.integers(j, task.t - length - 2 * j + 1)) + j
    if j == 0:
        return start + np.arange(length)
    freq = rng.uniform(0.3, 1.0)
    phase = rng.uniform(0, 2 * np.pi)
    amp = rng.uniform(0.75, 1.0) * j
    curve = amp * np.sin(2 * np.pi * freq * np.arange(length) / length + phase)
    shifts = np.clip(np.round(curve), -j, j).astype(np.int64)
    pos = np.empty(length, dtype=np.int64)
    pos[0] = start + shifts[0]
    for l in range(1, length):
        # greedy lift keeps positions strictly increasing; the deviation
        # stays within [-j, j] because the unlifted target already is
        pos[l] = max(pos[l - 1] + 1, start + l + shifts[l])
    return pos


def toy_task_generate(task: ToyTask, batch_index: int = 0):
    """One deterministic batch: (x [B,T,F], target [B,T] of 0/1 labels)."""
    template = _task_template(task)
    rng = np.random.default_rng([task.seed, 29, batch_index])
    b, t, f = task.batch_size, task.t, task.f
    x = task.noise_std * rng.standard_normal((b, t, f))
    target = np.zeros((b, t), dtype=np.int64)
    for e in range(b):
        pos = _jitter_positions(rng, task)
        x[e, pos, :] += template
        target[e, pos] = 1
    return x, target


@dataclass
class TrainConfig:
    seed: int = 0
    steps: int = 1200
    batch_size: int = 8
    t: int = 64
    f: int = 16
    kernel_size: int = 9
    deformable_groups: int = 1
    jitter: int = 5
    template_length: int = 32
    template_period: int = 2
    noise_std: float = 1.0
    offset_init: str = "zero"        # zero | xavier
    offset_lr_mult: float = 0.5
    freeze_offsets: bool = False
    dtype: str = "real32"            # real32 | real64
    peak_lr: float = 4e-3
    warmup_steps: int = 100
    schedule: str = "inverse_sqrt"   # inverse_sqrt | constant
    eval_batches: int = 40
    log_every: int = 50
    metrics_path: str | None = None
    offsets_path: str | None = None

    def task(self) -> ToyTask:
        return ToyTask(seed=self.seed, batch_size=self.batch_size, t=self.t,
                       f=self.f, jitter=self.jitter,
                       template_length=self.template_length,
                       template_period=self.template_period,
                       noise_std=self.noise_std)

    def numpy_dtype(self):
        if self.dtype == "real32":
            return np.float32
        if self.dtype == "real64":
            return np.float64
        raise ConfigError(f"dtype must be real32 or real64, got {self.dtype!r}")


def load_config(path, base: TrainConfig | None = None) -> TrainConfig:
    """Read a flat key=value text file ('#' starts a comment)."""
    cfg = base or TrainConfig()
    kinds = {f.name: f.type for f in fields(TrainConfig)}
    casts = {"int": int, "float": float, "str": str,
             "bool": lambda s: s.lower() in ("1", "true", "yes"),
             "str | None": str}
    overrides = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in kinds:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            overrides[key] = casts[kinds[key]](value)
    return replace(cfg, **overrides)


@dataclass
class TrainResult:
    final_loss: float
    metrics: list              # (step, loss, offset_l1) tuples
    delta_p_final: np.ndarray  # offsets on the first eval batch


def _cross_entropy(logits, target):
    """Per-frame 2-class softmax CE; returns (mean loss, d_logits)."""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    expz = np.exp(shifted)
    probs = expz / expz.sum(axis=-1, keepdims=True)
    b, t, _ = logits.shape
    picked = np.take_along_axis(probs, target[..., None], axis=-1)[..., 0]
    loss = float(-np.log(np.maximum(picked, 1e-30)).mean())
    d_logits = probs.copy()
    np.put_along_axis(
        d_logits, target[..., None],
        np.take_along_axis(d_logits, target[..., None], axis=-1) - 1.0,
        axis=-1)
    return loss, d_logits / (b * t)


class _Model:
    def __init__(self, cfg: TrainConfig):
        dt = cfg.numpy_dtype()
        self.block = DeformableConvBlock(
            cfg.f, kernel_size=cfg.kernel_size,
            deformable_groups=cfg.deformable_groups,
            lr_mult=cfg.offset_lr_mult, dtype=dt,
            freeze_offsets=cfg.freeze_offsets)
        scheme = "zero_offset" if cfg.offset_init == "zero" else "xavier"
        if cfg.offset_init not in ("zero", "xavier"):
            raise ConfigError(f"offset_init must be zero or xavier, "
                              f"got {cfg.offset_init!r}")
        self.block.init_params(scheme, cfg.seed)
        rng = np.random.default_rng([cfg.seed, 101])
        bound = np.sqrt(6.0 / (cfg.f + 2))
        self.head_w = rng.uniform(-bound, bound, size=(2, cfg.f)).astype(dt)
        self.head_b = np.zeros(2, dtype=dt)

    def parameters(self):
        params = dict(self.block.parameters())
        params["head.weights"] = self.head_w
        params["head.bias"] = self.head_b
        return params

    def forward(self, x, target, train):
        y, cache = self.block.forward(x, train=train)
        logits = np.einsum("btf,cf->btc", y, self.head_w) + self.head_b
        loss, d_logits = _cross_entropy(logits, target)
        return loss, (cache, y, d_logits)

    def backward(self, fw):
        cache, y, d_logits = fw
        grads = {
            "head.weights": np.einsum("btc,btf->cf", d_logits, y),
            "head.bias": np.einsum("btc->c", d_logits),
        }
        d_y = np.einsum("btc,cf->btf", d_logits, self.head_w)
        _, block_grads = self.block.backward(cache, d_y.astype(y.dtype))
        grads.update(block_grads)
        return grads


def train_toy(cfg: TrainConfig, verbose: bool = False) -> TrainResult:
    """Train block + per-frame classifier head; returns metrics and offsets.

    Writes the metrics CSV (header ``step,loss,offset_l1``) and the final
    offset dump when the corresponding paths are set.
    """
    model = _Model(cfg)
    names = model.parameters()
    lr_mult = {n: cfg.offset_lr_mult for n in model.block.offset_parameter_names()}
    opt = Adam(names, peak_lr=cfg.peak_lr, warmup_steps=cfg.warmup_steps,
               lr_mult=lr_mult, schedule=cfg.schedule)
    task = cfg.task()

    metrics = []
    for step in range(cfg.steps):
        x, target = toy_task_generate(task, batch_index=step)
        x = x.astype(cfg.numpy_dtype())
        loss, fw = model.forward(x, target, train=True)
        if not np.isfinite(loss):
            raise DivergenceError(f"non-finite loss {loss} at step {step}")
        if model.block.freeze_offsets:
            offset_l1 = 0.0
        else:
            offset_l1 = float(np.abs(fw[0]["offsets"].delta_p).mean())
        metrics.append((step, loss, offset_l1))
        if verbose and step % cfg.log_every == 0:
            print(f"step {step:5d}  loss {loss:.4f}  offset_l1 {offset_l1:.4f}")
        grads = model.backward(fw)
        opt.step(grads)

    # held-out stream, eval mode
    eval_losses = []
    delta_final = None
    for i in range(cfg.eval_batches):
        x, target = toy_task_generate(task, batch_index=1_000_000 + i)
        x = x.astype(cfg.numpy_dtype())
        loss, _ = model.forward(x, target, train=False)
        eval_losses.append(loss)
        if i == 0:
            if model.block.freeze_offsets:
                t_out = model.block.deform.geometry.output_length(cfg.t)
                delta_final = np.zeros(
                    (cfg.batch_size, t_out, cfg.deformable_groups,
                     cfg.kernel_size), dtype=cfg.numpy_dtype())
            else:
                delta_final = offset_forward(model.block.deform, x).delta_p
    final_loss = float(np.mean(eval_losses))

    if cfg.metrics_path:
        with open(cfg.metrics_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "loss", "offset_l1"])
            for row in metrics:
                writer.writerow([row[0], repr(row[1]), repr(row[2])])
    if cfg.offsets_path:
        write_tensor_file(cfg.offsets_path, delta_final)
    return TrainResult(final_loss=final_loss, metrics=metrics,
                       delta_p_final=delta_final)
