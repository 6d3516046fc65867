"""Temporal memory attention network on the float64 tensor core.

Pipeline for one clip (T memory frames, one query frame):

    frames --shared backbone--> features
           --encoders--> M_K (T×C_K×h×w), M_V (T×C_V×h×w), Q_K, Q_V
           --attention--> readout (C_V×h×w)
           --aggregate(readout, Q_V)--> 1x1 head --> bilinear upsample

With ``memory_length == 0`` the attention branch is skipped entirely and
the head sees Q_V alone, i.e. a per-frame FCN baseline.
"""

from __future__ import annotations

import math
import zlib
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, ShapeError
from .tensor import (
    Parameter,
    Tensor,
    add,
    concat_channels,
    conv2d,
    cross_entropy,
    matmul,
    relu,
    reshape_permute,
    scale,
    softmax_rows,
    stack,
    upsample_bilinear,
)

AGGREGATIONS = ("concat", "sum")
SCALINGS = ("none", "inv_sqrt_ck")
ENCODERS = ("1x1+3x3", "3x3", "1x1")


@dataclass(frozen=True)
class ModelConfig:
    memory_length: int = 2
    key_channels: int = 8
    value_channels: int | None = None  # defaults to 4 * key_channels
    num_classes: int = 4
    backbone_widths: tuple[int, ...] = (8, 16, 32)
    backbone_strides: tuple[int, ...] = (2, 2, 4)
    aggregation: str = "concat"
    attention_scaling: str = "none"
    encoder: str = "1x1+3x3"
    aux_loss_weight: float = 0.4
    in_channels: int = 3

    def __post_init__(self):
        if self.value_channels is None:
            object.__setattr__(self, "value_channels", 4 * self.key_channels)
        object.__setattr__(self, "backbone_widths", tuple(int(w) for w in self.backbone_widths))
        object.__setattr__(self, "backbone_strides", tuple(int(s) for s in self.backbone_strides))
        if self.memory_length < 0:
            raise ContractError("memory_length must be >= 0")
        if self.key_channels <= 0 or self.value_channels <= 0 or self.num_classes <= 0:
            raise ContractError("channel and class counts must be positive")
        if len(self.backbone_widths) != len(self.backbone_strides) or len(self.backbone_widths) < 2:
            raise ContractError("backbone needs at least two stages, one stride per width")
        if any(s not in (1, 2, 4) for s in self.backbone_strides):
            raise ContractError(f"stage strides must be 1, 2 or 4, got {self.backbone_strides}")
        if self.aggregation not in AGGREGATIONS:
            raise ContractError(f"unknown aggregation {self.aggregation!r}")
        if self.attention_scaling not in SCALINGS:
            raise ContractError(f"unknown attention scaling {self.attention_scaling!r}")
        if self.encoder not in ENCODERS:
            raise ContractError(f"unknown encoder variant {self.encoder!r}")

    @property
    def output_stride(self) -> int:
        return math.prod(self.backbone_strides)

    @property
    def head_channels(self) -> int:
        if self.memory_length > 0 and self.aggregation == "concat":
            return 2 * self.value_channels
        return self.value_channels


@dataclass
class EncodedFeatures:
    Q_K: Tensor | None
    Q_V: Tensor
    M_K: Tensor | None = None  # T×C_K×h×w
    M_V: Tensor | None = None  # T×C_V×h×w

    @property
    def T(self) -> int:
        return 0 if self.M_K is None else self.M_K.shape[0]


@dataclass
class AttentionMap:
    """Row-stochastic N×M weights of every query position over all memory positions."""

    S: Tensor
    T: int
    h: int
    w: int

    def heatmaps(self, query_pos: int) -> np.ndarray:
        """Weights of one query position, split into T maps of h×w."""
        return self.S.data[query_pos].reshape(self.T, self.h, self.w)


@dataclass
class ForwardOutput:
    main_logits: Tensor
    aux_logits: Tensor
    attention: AttentionMap | None = None
    encoded: EncodedFeatures | None = field(default=None, repr=False)


def temporal_memory_attention(enc: EncodedFeatures, config: ModelConfig) -> tuple[Tensor, AttentionMap]:
    """Softmax attention of each query position over the flattened memory.

    Logits are dot products of query keys with memory keys; each row is
    normalized over all T·h·w memory positions and used to average the
    memory values.
    """
    if enc.M_K is None or enc.M_V is None or enc.T == 0:
        raise ContractError("temporal memory attention needs T >= 1 memory frames")
    T, ck, h, w = enc.M_K.shape
    cv = enc.M_V.shape[1]
    if enc.Q_K.shape != (ck, h, w) or enc.M_V.shape != (T, cv, h, w):
        raise ShapeError(f"inconsistent encodings: Q_K {enc.Q_K.shape}, M_K {enc.M_K.shape}, M_V {enc.M_V.shape}")
    N, M = h * w, T * h * w
    q_k = reshape_permute(enc.Q_K, (N, ck), (1, 2, 0))
    m_k = reshape_permute(enc.M_K, (ck, M), (1, 0, 2, 3))
    m_v = reshape_permute(enc.M_V, (M, cv), (0, 2, 3, 1))
    logits = matmul(q_k, m_k)
    if config.attention_scaling == "inv_sqrt_ck":
        logits = scale(logits, 1.0 / math.sqrt(ck))
    S = softmax_rows(logits)
    readout = reshape_permute(matmul(S, m_v), (cv, h, w), (1, 0))
    return readout, AttentionMap(S, T, h, w)


def aggregate_features(readout: Tensor, q_v: Tensor, config: ModelConfig) -> Tensor:
    if config.aggregation == "concat":
        return concat_channels(readout, q_v)
    if readout.shape != q_v.shape:
        raise ShapeError(f"sum aggregation needs equal shapes, got {readout.shape} and {q_v.shape}")
    return add(readout, q_v)


def _as_frame(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class TMANet:
    """Parameters plus the forward pass; one instance per training context."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.seed = seed
        self.params: dict[str, Parameter] = {}
        self._build()

    # -- parameters ---------------------------------------------------------

    def _conv_params(self, name: str, c_out: int, c_in: int, k: int) -> None:
        rng = np.random.default_rng([self.seed, zlib.crc32(name.encode())])
        bound = math.sqrt(6.0 / (c_in * k * k))
        self.params[f"{name}.weight"] = Parameter(rng.uniform(-bound, bound, (c_out, c_in, k, k)), f"{name}.weight")
        self.params[f"{name}.bias"] = Parameter(np.zeros(c_out), f"{name}.bias")

    def _encoder_params(self, name: str, c_in: int, c_out: int) -> None:
        variant = self.config.encoder
        if variant == "1x1+3x3":
            self._conv_params(f"{name}.reduce", c_out, c_in, 1)
            self._conv_params(f"{name}.spatial", c_out, c_out, 3)
        elif variant == "1x1":
            self._conv_params(f"{name}.reduce", c_out, c_in, 1)
        else:
            self._conv_params(f"{name}.spatial", c_out, c_in, 3)

    def _build(self) -> None:
        cfg = self.config
        c_in = cfg.in_channels
        for i, (width, stride) in enumerate(zip(cfg.backbone_widths, cfg.backbone_strides)):
            for j in range(2 if stride == 4 else 1):
                self._conv_params(f"backbone.stage{i}.conv{j}", width, c_in, 3)
                c_in = width
        feat = cfg.backbone_widths[-1]
        if cfg.memory_length > 0:
            self._encoder_params("encoder.memory_key", feat, cfg.key_channels)
            self._encoder_params("encoder.memory_value", feat, cfg.value_channels)
            self._encoder_params("encoder.query_key", feat, cfg.key_channels)
        self._encoder_params("encoder.query_value", feat, cfg.value_channels)
        self._conv_params("head.main", cfg.num_classes, cfg.head_channels, 1)
        self._conv_params("head.aux", cfg.num_classes, cfg.backbone_widths[-2], 1)

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        unexpected = set(state) - set(self.params)
        if missing or unexpected:
            raise ContractError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(unexpected)}")
        for name, value in state.items():
            self.params[name].assign(value)

    def _conv(self, name: str, x: Tensor, stride: int = 1) -> Tensor:
        w = self.params[f"{name}.weight"]
        k = w.shape[-1]
        return conv2d(x, w, self.params[f"{name}.bias"], stride=stride, pad=k // 2)

    # -- forward pieces -----------------------------------------------------

    def backbone_forward(self, frame) -> tuple[Tensor, Tensor]:
        """Shared backbone; returns (penultimate-stage feature, final feature)."""
        cfg = self.config
        x = _as_frame(frame)
        if x.data.ndim != 3 or x.shape[0] != cfg.in_channels:
            raise ShapeError(f"frame must be {cfg.in_channels}×H×W, got {x.shape}")
        H, W = x.shape[1:]
        os_ = cfg.output_stride
        if H % os_ or W % os_:
            raise ShapeError(f"frame {H}x{W} not divisible by output stride {os_}")
        stages = []
        for i, stride in enumerate(cfg.backbone_strides):
            convs = [2, 2] if stride == 4 else [stride]
            for j, s in enumerate(convs):
                x = relu(self._conv(f"backbone.stage{i}.conv{j}", x, stride=s))
            stages.append(x)
        return stages[-2], stages[-1]

    def _encoder(self, name: str, x: Tensor) -> Tensor:
        variant = self.config.encoder
        if variant == "1x1+3x3":
            return self._conv(f"{name}.spatial", relu(self._conv(f"{name}.reduce", x)))
        if variant == "1x1":
            return self._conv(f"{name}.reduce", x)
        return self._conv(f"{name}.spatial", x)

    def encode(self, memory_feats: Sequence[Tensor], query_feat: Tensor) -> EncodedFeatures:
        q_v = self._encoder("encoder.query_value", query_feat)
        if not memory_feats:
            return EncodedFeatures(Q_K=None, Q_V=q_v)
        if self.config.memory_length == 0:
            raise ContractError("baseline model has no memory encoders")
        m_k = stack([self._encoder("encoder.memory_key", f) for f in memory_feats])
        m_v = stack([self._encoder("encoder.memory_value", f) for f in memory_feats])
        q_k = self._encoder("encoder.query_key", query_feat)
        return EncodedFeatures(Q_K=q_k, Q_V=q_v, M_K=m_k, M_V=m_v)

    def segmentation_head(self, f: Tensor, H: int, W: int) -> Tensor:
        return upsample_bilinear(self._conv("head.main", f), H, W)

    def aux_head(self, low_feat: Tensor, H: int, W: int) -> Tensor:
        return upsample_bilinear(self._conv("head.aux", low_feat), H, W)

    def forward(self, clip) -> ForwardOutput:
        cfg = self.config
        if len(clip.memory) != cfg.memory_length:
            raise ContractError(f"clip has {len(clip.memory)} memory frames, model expects {cfg.memory_length}")
        query = _as_frame(clip.query)
        H, W = query.shape[1:]
        for f in clip.memory:
            if tuple(np.shape(f.data if isinstance(f, Tensor) else f)) != query.shape:
                raise ShapeError(f"memory frame size differs from query {query.shape}")

        low, high = self.backbone_forward(query)
        mem_feats = [self.backbone_forward(f)[1] for f in clip.memory]
        enc = self.encode(mem_feats, high)
        attention = None
        if cfg.memory_length == 0:
            f = enc.Q_V
        else:
            readout, attention = temporal_memory_attention(enc, cfg)
            f = aggregate_features(readout, enc.Q_V, cfg)
        return ForwardOutput(self.segmentation_head(f, H, W), self.aux_head(low, H, W), attention, enc)

    def loss(self, clip, aux_weight: float | None = None) -> tuple[Tensor, Tensor, Tensor]:
        """(total, main, aux) cross-entropy for the clip's labeled query frame."""
        w = self.config.aux_loss_weight if aux_weight is None else aux_weight
        out = self.forward(clip)
        main = cross_entropy(out.main_logits, clip.label)
        aux = cross_entropy(out.aux_logits, clip.label)
        total = add(main, scale(aux, w)) if w != 0 else main
        return total, main, aux

    def predict(self, clip) -> np.ndarray:
        """Per-pixel argmax of the main logits; ties go to the lowest class id."""
        return np.argmax(self.forward(clip).main_logits.data, axis=0).astype(np.uint8)
