"""SGD with momentum, the poly schedule and the training loop.

Every random choice in the loop (batch order, memory sampling, augmentation)
is drawn from a generator keyed on ``(seed, iteration, slot)``, so a run can
be stopped after any iteration and resumed from its checkpoint with a
bitwise-identical continuation.
"""

from __future__ import annotations

import logging
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .data import AugmentParams, VideoClip, augment, select_memory
from .errors import ContractError, ShapeError
from .model import ModelConfig, TMANet
from .tensor import GradTape, Parameter, add, scale

log = logging.getLogger(__name__)

LOG_NAME = "metrics.tsv"
CKPT_NAME = "model.tmac"


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    total_iters: int = 500
    poly_power: float = 0.9
    batch_size: int = 2
    aux_weight: float | None = None  # None: use the model's aux_loss_weight
    seed: int = 0
    sampler: str = "random"
    window: int = 10
    augment: bool = True
    resize_min: float = 0.5
    resize_max: float = 2.0
    crop: int = 32
    hflip_prob: float = 0.5

    def __post_init__(self):
        if self.base_lr < 0 or self.momentum < 0 or self.weight_decay < 0:
            raise ContractError("learning rate, momentum and weight decay must be nonnegative")
        if self.poly_power <= 0:
            raise ContractError("poly_power must be positive")
        if self.total_iters <= 0 or self.batch_size <= 0:
            raise ContractError("total_iters and batch_size must be positive")

    @property
    def augment_params(self) -> AugmentParams:
        return AugmentParams(self.resize_min, self.resize_max, self.crop, self.hflip_prob)


@dataclass
class OptimState:
    velocity: dict[str, np.ndarray] = field(default_factory=dict)
    iteration: int = 0

    @classmethod
    def for_params(cls, params: Sequence[Parameter]) -> OptimState:
        return cls({p.name: np.zeros(p.shape) for p in params}, 0)


def poly_lr(base_lr: float, iteration: int, total_iters: int, power: float = 0.9) -> float:
    if not 0 <= iteration <= total_iters:
        raise ContractError(f"iteration {iteration} outside [0, {total_iters}]")
    return base_lr * (1.0 - iteration / total_iters) ** power


def sgd_step(
    params: Sequence[Parameter],
    grads: Sequence[np.ndarray],
    state: OptimState,
    lr: float,
    momentum: float,
    weight_decay: float,
) -> None:
    """v <- momentum*v + grad + weight_decay*w ;  w <- w - lr*v  (in place on params/state)."""
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} parameters but {len(grads)} gradients")
    for p, g in zip(params, grads):
        v = state.velocity.get(p.name)
        if v is None:
            v = np.zeros(p.shape)
        if g.shape != p.shape or v.shape != p.shape:
            raise ShapeError(f"gradient/velocity shape mismatch for {p.name}: {g.shape}, {v.shape} vs {p.shape}")
        v = momentum * v + g + weight_decay * p.data
        state.velocity[p.name] = v
        p.assign(p.data - lr * v)


def train_step(model: TMANet, batch: Sequence[VideoClip], optim: OptimState, cfg: TrainConfig) -> dict[str, float]:
    """One optimizer step on the batch-averaged main + weighted auxiliary loss."""
    if not batch:
        raise ContractError("empty batch")
    aux_w = model.config.aux_loss_weight if cfg.aux_weight is None else cfg.aux_weight
    inv = 1.0 / len(batch)
    with GradTape() as tape:
        totals, mains, auxes = [], [], []
        for clip in batch:
            t, m, a = model.loss(clip, aux_w)
            totals.append(t)
            mains.append(m.item())
            auxes.append(a.item())
        acc = totals[0]
        for t in totals[1:]:
            acc = add(acc, t)
        total = scale(acc, inv)
    tape.backward(total)

    lr = poly_lr(cfg.base_lr, optim.iteration, cfg.total_iters, cfg.poly_power)
    params = model.parameters()
    sgd_step(params, [p.grad for p in params], optim, lr, cfg.momentum, cfg.weight_decay)
    model.zero_grad()
    optim.iteration += 1
    return {
        "total_loss": total.item(),
        "main_loss": sum(mains[1:], mains[0]) * inv,
        "aux_loss": sum(auxes[1:], auxes[0]) * inv,
        "lr": lr,
    }


def batch_indices(n: int, iteration: int, batch_size: int, seed: int) -> list[int]:
    """Clip indices for one iteration: consecutive slices of per-epoch permutations."""
    out = []
    for pos in range(iteration * batch_size, (iteration + 1) * batch_size):
        epoch = pos // n
        perm = np.random.default_rng([seed, 1, epoch]).permutation(n)
        out.append(int(perm[pos % n]))
    return out


def prepare_clip(clip: VideoClip, T: int, cfg: TrainConfig, iteration: int, slot: int) -> VideoClip:
    rng = np.random.default_rng([cfg.seed, 2, iteration, slot])
    clip = select_memory(clip, T, cfg.sampler, cfg.window, rng)
    if cfg.augment:
        clip = augment(clip, rng, cfg.augment_params)
    return clip


def format_log_line(iteration: int, row: dict[str, float]) -> str:
    return "\t".join(
        [str(iteration)] + [f"{row[k]:.6g}" for k in ("lr", "total_loss", "main_loss", "aux_loss")]
    )


def optim_extras(optim: OptimState) -> dict[str, np.ndarray]:
    extra = {"__optim": np.array([float(optim.iteration)])}
    extra.update({f"__velocity.{k}": v for k, v in optim.velocity.items()})
    return extra


def optim_from_extras(model: TMANet, extra: dict[str, np.ndarray]) -> OptimState:
    state = OptimState.for_params(model.parameters())
    if "__optim" in extra:
        state.iteration = int(extra["__optim"][0])
    for name in state.velocity:
        if f"__velocity.{name}" in extra:
            state.velocity[name] = extra[f"__velocity.{name}"].copy()
    return state


@dataclass
class TrainResult:
    model: TMANet
    optim: OptimState
    rows: list[dict[str, float]]
    checkpoint: Path
    log_path: Path


def run_training(
    train_cfg: TrainConfig,
    model_cfg: ModelConfig,
    dataset: Sequence[VideoClip],
    out_dir: str | Path,
    resume: str | Path | None = None,
    stop_after: int | None = None,
    on_step: Callable[[int, dict], None] | None = None,
) -> TrainResult:
    """Train, writing ``model.tmac`` and a tab-separated ``metrics.tsv`` to ``out_dir``.

    ``stop_after`` ends the run early at that iteration count (the checkpoint
    still records the position, so ``resume`` can continue it).
    """
    if not dataset:
        raise ContractError("empty dataset")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    log_path, ckpt_path = out / LOG_NAME, out / CKPT_NAME

    if resume is not None:
        model, extra = load_checkpoint(resume)
        if model.config != model_cfg:
            raise ContractError("checkpoint model config differs from the requested one")
        optim = optim_from_extras(model, extra)
        mode = "a"
    else:
        model = TMANet(model_cfg, seed=train_cfg.seed)
        optim = OptimState.for_params(model.parameters())
        mode = "w"

    end = train_cfg.total_iters if stop_after is None else min(stop_after, train_cfg.total_iters)
    T = model_cfg.memory_length
    rows = []
    with open(log_path, mode) as fh:
        while optim.iteration < end:
            it = optim.iteration
            idx = batch_indices(len(dataset), it, train_cfg.batch_size, train_cfg.seed)
            batch = [prepare_clip(dataset[i], T, train_cfg, it, k) for k, i in enumerate(idx)]
            row = train_step(model, batch, optim, train_cfg)
            rows.append(row)
            fh.write(format_log_line(it, row) + "\n")
            if on_step is not None:
                on_step(it, row)
            if it % 50 == 0:
                log.debug("iter %d loss %.4f", it, row["total_loss"])
    save_checkpoint(ckpt_path, model, optim_extras(optim))
    return TrainResult(model, optim, rows, ckpt_path, log_path)


def read_log(path: str | Path) -> list[tuple[int, float, float, float, float]]:
    rows = []
    for line in Path(path).read_text().splitlines():
        it, lr, total, main, aux = line.split("\t")
        rows.append((int(it), float(lr), float(total), float(main), float(aux)))
    return rows
