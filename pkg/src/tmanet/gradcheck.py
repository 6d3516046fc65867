"""Built-in finite-difference suites for every differentiable op and the model.

Each op case draws small random inputs from a seed and reduces the op's
output to a scalar through a fixed random projection, so every output
element contributes to the checked gradient.
"""

from __future__ import annotations

import time
from collections.abc import Callable
from dataclasses import dataclass

import numpy as np

from .data import SyntheticSceneSpec, clip_from_video, generate_clip
from .model import ModelConfig, TMANet
from .tensor import (
    Tensor,
    add,
    concat_channels,
    conv2d,
    cross_entropy,
    grad_check,
    grad_check_errors,
    matmul,
    relu,
    reshape_permute,
    scale,
    softmax_rows,
    stack,
    sum_all,
    upsample_bilinear,
)

TOLERANCE = 1e-4


def _project(t: Tensor, w: np.ndarray) -> Tensor:
    flat = reshape_permute(t, (1, t.size))
    return sum_all(matmul(flat, Tensor(w.reshape(-1, 1))))


def _rand(rng, *shape) -> Tensor:
    return Tensor(rng.standard_normal(shape))


def _ce_case(rng):
    labels = rng.integers(0, 4, size=(3, 3))
    labels[0, 0] = 255
    return [_rand(rng, 4, 3, 3)], lambda x: cross_entropy(x, labels)


def _projected(make_inputs, op, out_shape):
    def case(rng):
        inputs = make_inputs(rng)
        w = rng.standard_normal(out_shape)
        return inputs, lambda *xs: _project(op(*xs), w)

    return case


OP_SUITE: dict[str, Callable] = {
    "matmul": _projected(lambda r: [_rand(r, 3, 4), _rand(r, 4, 2)], matmul, (3, 2)),
    "conv2d_k3_s1": _projected(
        lambda r: [_rand(r, 2, 5, 5), _rand(r, 3, 2, 3, 3), _rand(r, 3)],
        lambda x, k, b: conv2d(x, k, b, 1, 1),
        (3, 5, 5),
    ),
    "conv2d_k3_s2": _projected(
        lambda r: [_rand(r, 2, 6, 6), _rand(r, 2, 2, 3, 3), _rand(r, 2)],
        lambda x, k, b: conv2d(x, k, b, 2, 1),
        (2, 3, 3),
    ),
    "conv2d_k1_s2": _projected(
        lambda r: [_rand(r, 3, 5, 5), _rand(r, 2, 3, 1, 1), _rand(r, 2)],
        lambda x, k, b: conv2d(x, k, b, 2, 0),
        (2, 3, 3),
    ),
    "softmax_rows": _projected(lambda r: [_rand(r, 4, 6)], softmax_rows, (4, 6)),
    "relu": _projected(lambda r: [_rand(r, 3, 4)], relu, (3, 4)),
    "upsample_bilinear": _projected(lambda r: [_rand(r, 2, 3, 3)], lambda x: upsample_bilinear(x, 7, 5), (2, 7, 5)),
    "reshape_permute": _projected(
        lambda r: [_rand(r, 2, 3, 4)], lambda x: reshape_permute(x, (4, 6), (2, 0, 1)), (4, 6)
    ),
    "concat_channels": _projected(lambda r: [_rand(r, 2, 3, 3), _rand(r, 1, 3, 3)], concat_channels, (3, 3, 3)),
    "stack": _projected(lambda r: [_rand(r, 2, 3), _rand(r, 2, 3)], lambda a, b: stack([a, b]), (2, 2, 3)),
    "add": _projected(lambda r: [_rand(r, 3, 3), _rand(r, 3, 3)], add, (3, 3)),
    "scale": _projected(lambda r: [_rand(r, 3, 3)], lambda x: scale(x, -0.7), (3, 3)),
    "cross_entropy": _ce_case,
}


def check_op(name: str, seed: int) -> float:
    inputs, f = OP_SUITE[name](np.random.default_rng(seed))
    return grad_check(f, inputs)


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE


def gradcheck_model(seed: int = 0, sample: int | None = None) -> list[CheckResult]:
    """End-to-end check on the tiny T=2, C_K=4, 3x16x16 configuration.

    Returns one result per parameter tensor.
    """
    cfg = tiny_gradcheck_config()
    model = TMANet(cfg, seed=seed)
    spec = SyntheticSceneSpec(num_objects=2, num_classes=cfg.num_classes, seed=seed + 11, occluder="occlude_query_only")
    video = generate_clip(spec, T=cfg.memory_length, H=16, W=16, video_length=cfg.memory_length + 1)
    clip = clip_from_video(video, video.query_index, list(range(cfg.memory_length)))

    params = list(model.params.values())
    # zero biases put ReLU inputs exactly on the kink in dead regions; check at a generic point
    jitter = np.random.default_rng([seed, 7])
    for p in params:
        if p.name.endswith(".bias"):
            p.assign(0.1 * jitter.standard_normal(p.shape))

    def loss_fn(*_):
        return model.loss(clip)[0]

    t0 = time.perf_counter()
    errs = grad_check_errors(loss_fn, params, sample=sample, max_elements=None, rng=np.random.default_rng(seed))
    elapsed = time.perf_counter() - t0
    return [CheckResult(f"model:{p.name}", e, elapsed / len(params)) for p, e in zip(params, errs)]


def tiny_gradcheck_config() -> ModelConfig:
    return ModelConfig(
        memory_length=2,
        key_channels=4,
        num_classes=3,
        backbone_widths=(4, 6),
        backbone_strides=(2, 2),
    )


def run_suite(seeds: int = 5, model: bool = True, sample: int | None = None) -> list[CheckResult]:
    results = []
    for name in OP_SUITE:
        t0 = time.perf_counter()
        worst = max(check_op(name, s) for s in range(seeds))
        results.append(CheckResult(name, worst, time.perf_counter() - t0))
    if model:
        results.extend(gradcheck_model(sample=sample))
    return results
