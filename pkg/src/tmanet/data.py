"""Synthetic labeled videos, memory samplers, augmentation and the TMAD format.

Scenes are colored circles and rectangles drifting over a dark background
with toroidal wraparound. The object class is carried by color alone, so
with ``occluder="occlude_query_only"`` the query frame's objects are
painted a neutral gray and their class can only be recovered from the
memory frames.
"""

from __future__ import annotations

import colorsys
import struct
from collections.abc import Iterator, Sequence
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ContractError, FormatError, SamplingError, ShapeError
from .tensor import IGNORE_INDEX, interp_matrix

BACKGROUND_COLOR = (0.08, 0.08, 0.10)
OCCLUDER_COLOR = (0.55, 0.55, 0.55)
_BASE_COLORS = [
    (0.90, 0.15, 0.15),
    (0.15, 0.80, 0.20),
    (0.20, 0.35, 0.95),
    (0.95, 0.85, 0.10),
    (0.80, 0.20, 0.85),
    (0.10, 0.85, 0.85),
]
TEST_SEED = 20201  # fixed seed for sliding-window memory sampling at test time
SAMPLERS = ("continuous", "random")
OCCLUDERS = ("none", "occlude_query_only")
_MAX_ATTEMPTS = 1000


def class_palette(num_classes: int, background_class: int = 0) -> np.ndarray:
    """RGB color in [0, 1] for each class id; the background class is dark."""
    colors = []
    k = 0
    for c in range(num_classes):
        if c == background_class:
            colors.append(BACKGROUND_COLOR)
            continue
        if k < len(_BASE_COLORS):
            colors.append(_BASE_COLORS[k])
        else:
            hue = ((k - len(_BASE_COLORS)) * 0.618034) % 1.0
            colors.append(colorsys.hsv_to_rgb(hue, 0.8, 0.9))
        k += 1
    return np.array(colors, dtype=np.float64)


@dataclass(frozen=True)
class SceneObject:
    kind: str  # "circle" or "rectangle"
    label: int
    x: int
    y: int
    half_w: int  # radius for circles
    half_h: int
    vx: int
    vy: int


@dataclass(frozen=True)
class SyntheticSceneSpec:
    num_objects: int = 1
    kinds: tuple[str, ...] = ("circle", "rectangle")
    num_classes: int = 4
    background_class: int = 0
    occluder: str = "none"
    occluder_coverage: float = 1.0
    min_size: int = 4
    max_size: int = 7
    max_speed: int = 2
    noise: float = 0.02
    seed: int = 0
    objects: tuple[SceneObject, ...] | None = None  # explicit scene, bypasses random draws

    def __post_init__(self):
        if self.occluder not in OCCLUDERS:
            raise ContractError(f"unknown occluder policy {self.occluder!r}")
        if not 0 <= self.background_class < self.num_classes:
            raise ContractError("background class must be a valid class id")
        if self.num_classes < 2:
            raise ContractError("need at least one object class besides background")
        if not 0.0 < self.occluder_coverage <= 1.0:
            raise ContractError("occluder coverage must lie in (0, 1]")


@dataclass
class Video:
    frames: np.ndarray  # (L, 3, H, W)
    labels: np.ndarray  # (L, H, W) uint8
    query_index: int
    occluded: np.ndarray  # (H, W) bool, occluder footprint on the query frame
    objects: tuple[SceneObject, ...] = ()

    def __len__(self) -> int:
        return self.frames.shape[0]


@dataclass
class VideoClip:
    memory: list[np.ndarray]
    query: np.ndarray
    label: np.ndarray
    query_index: int

    def __post_init__(self):
        if self.query.ndim != 3 or self.query.shape[0] != 3:
            raise ShapeError(f"query frame must be 3×H×W, got {self.query.shape}")
        hw = self.query.shape[1:]
        for f in self.memory:
            if f.shape != self.query.shape:
                raise ShapeError(f"memory frame {f.shape} does not match query {self.query.shape}")
        if self.label.shape != hw:
            raise ShapeError(f"label map {self.label.shape} does not match frames {hw}")

    @property
    def T(self) -> int:
        return len(self.memory)

    @property
    def size(self) -> tuple[int, int]:
        return self.query.shape[1], self.query.shape[2]


# ---------------------------------------------------------------------------
# generation


def object_position(obj: SceneObject, t: int, H: int, W: int) -> tuple[int, int]:
    return (obj.x + obj.vx * t) % W, (obj.y + obj.vy * t) % H


def object_mask(obj: SceneObject, t: int, H: int, W: int) -> np.ndarray:
    cx, cy = object_position(obj, t, H, W)
    dx = (np.arange(W) - cx + W // 2) % W - W // 2
    dy = (np.arange(H) - cy + H // 2) % H - H // 2
    DY, DX = np.meshgrid(dy, dx, indexing="ij")
    if obj.kind == "circle":
        return DX * DX + DY * DY <= obj.half_w * obj.half_w
    if obj.kind == "rectangle":
        return (np.abs(DX) <= obj.half_w) & (np.abs(DY) <= obj.half_h)
    raise ContractError(f"unknown object kind {obj.kind!r}")


def _draw_objects(spec: SyntheticSceneSpec, rng: np.random.Generator, H: int, W: int) -> tuple[SceneObject, ...]:
    fg = [c for c in range(spec.num_classes) if c != spec.background_class]
    objs = []
    for _ in range(spec.num_objects):
        kind = spec.kinds[int(rng.integers(len(spec.kinds)))]
        label = fg[int(rng.integers(len(fg)))]
        half_w = int(rng.integers(spec.min_size, spec.max_size + 1))
        half_h = half_w if kind == "circle" else int(rng.integers(spec.min_size, spec.max_size + 1))
        x, y = int(rng.integers(W)), int(rng.integers(H))
        vx, vy = (int(v) for v in rng.integers(-spec.max_speed, spec.max_speed + 1, size=2))
        objs.append(SceneObject(kind, label, x, y, half_w, half_h, vx, vy))
    return tuple(objs)


def _render(spec, objects, H, W, length):
    palette = class_palette(spec.num_classes, spec.background_class)
    labels = np.full((length, H, W), spec.background_class, dtype=np.uint8)
    for t in range(length):
        for obj in objects:  # later objects are drawn on top
            labels[t][object_mask(obj, t, H, W)] = obj.label
    frames = palette[labels].transpose(0, 3, 1, 2).copy()  # (L, 3, H, W)
    return frames, labels


def _occluder_footprint(spec, objects, labels_q, t, H, W) -> np.ndarray:
    occluded = np.zeros((H, W), dtype=bool)
    for obj in objects:
        cx, cy = object_position(obj, t, H, W)
        hx = int(np.ceil(spec.occluder_coverage * obj.half_w))
        hy = int(np.ceil(spec.occluder_coverage * obj.half_h))
        dx = (np.arange(W) - cx + W // 2) % W - W // 2
        dy = (np.arange(H) - cy + H // 2) % H - H // 2
        patch = (np.abs(dy)[:, None] <= hy) & (np.abs(dx)[None, :] <= hx)
        occluded |= patch
    # the occluder only hides objects; background pixels keep their appearance
    return occluded & (labels_q != spec.background_class)


def verify_occluder(video: Video) -> bool:
    """Every occluded class is visible, unoccluded, in some memory frame."""
    q = video.query_index
    classes = np.unique(video.labels[q][video.occluded])
    past = video.labels[:q]
    return all((past == c).any() for c in classes)


def generate_clip(spec: SyntheticSceneSpec, T: int, H: int, W: int, video_length: int) -> Video:
    """Render a fully labeled video whose last frame is the query frame."""
    if video_length <= T:
        raise ContractError(f"video_length ({video_length}) must exceed memory length T ({T})")
    if H <= 0 or W <= 0:
        raise ShapeError(f"frame extents must be positive, got {H}x{W}")
    if spec.occluder != "none" and video_length < 2:
        raise ContractError("an occluded query needs at least one earlier frame")
    for attempt in range(_MAX_ATTEMPTS):
        rng = np.random.default_rng([spec.seed, attempt])
        objects = spec.objects if spec.objects is not None else _draw_objects(spec, rng, H, W)
        frames, labels = _render(spec, objects, H, W, video_length)
        q = video_length - 1
        occluded = np.zeros((H, W), dtype=bool)
        if spec.occluder == "occlude_query_only":
            occluded = _occluder_footprint(spec, objects, labels[q], q, H, W)
            frames[q][:, occluded] = np.array(OCCLUDER_COLOR)[:, None]
        if spec.noise > 0:
            frames += spec.noise * np.random.default_rng([spec.seed, attempt, 1]).standard_normal(frames.shape)
        video = Video(frames, labels, q, occluded, tuple(objects))
        if spec.occluder == "none" or verify_occluder(video) or spec.objects is not None:
            return video
    raise SamplingError(f"no scene satisfying the occluder invariant in {_MAX_ATTEMPTS} draws (seed {spec.seed})")


def clip_from_video(video: Video, query_index: int, memory_indices: Sequence[int]) -> VideoClip:
    return VideoClip(
        memory=[video.frames[i] for i in memory_indices],
        query=video.frames[query_index],
        label=video.labels[query_index],
        query_index=query_index,
    )


def make_videos(spec: SyntheticSceneSpec, num_clips: int, H: int, W: int, length: int) -> list[Video]:
    """Independent videos with per-video seeds derived from ``spec.seed``."""
    return [
        generate_clip(replace(spec, seed=int(np.random.default_rng([spec.seed, i]).integers(2**63))), 0, H, W, length)
        for i in range(num_clips)
    ]


def make_snippets(spec: SyntheticSceneSpec, num_clips: int, H: int, W: int, length: int) -> list[VideoClip]:
    """Independent videos, each stored as all past frames plus its labeled last frame."""
    return [clip_from_video(v, v.query_index, range(v.query_index)) for v in make_videos(spec, num_clips, H, W, length)]


# ---------------------------------------------------------------------------
# memory sampling


def sample_memory(
    video,
    query_index: int,
    T: int,
    mode: str = "continuous",
    window: int = 10,
    rng: np.random.Generator | None = None,
) -> list[int]:
    """Indices of the T past frames used as memory for ``query_index``."""
    if mode not in SAMPLERS:
        raise ContractError(f"unknown sampler {mode!r}")
    if video is not None and query_index >= len(video):
        raise SamplingError(f"query index {query_index} outside video of length {len(video)}")
    if T < 0:
        raise ContractError("memory length must be nonnegative")
    if T == 0:
        return []
    if mode == "continuous":
        if query_index < T:
            raise SamplingError(f"need {T} past frames before index {query_index}")
        return list(range(query_index - T, query_index))
    if window < T:
        raise SamplingError(f"window {window} smaller than memory length {T}")
    lo = max(0, query_index - window)
    if query_index - lo < T:
        raise SamplingError(f"only {query_index - lo} past frames available for {T} random picks")
    if rng is None:
        rng = np.random.default_rng(TEST_SEED)
    picks = rng.choice(np.arange(lo, query_index), size=T, replace=False)
    return sorted(int(i) for i in picks)


def select_memory(clip: VideoClip, T: int, mode: str, window: int, rng: np.random.Generator) -> VideoClip:
    """Sub-select T memory frames from a snippet that stores all past frames."""
    idx = sample_memory(None, len(clip.memory), T, mode, window, rng) if T else []
    return VideoClip([clip.memory[i] for i in idx], clip.query, clip.label, clip.query_index)


def sliding_window_snippets(
    video: Video, T: int, mode: str = "continuous", window: int = 10, seed: int = TEST_SEED
) -> Iterator[VideoClip]:
    if len(video) <= T:
        raise ContractError(f"video of length {len(video)} has no query with {T} past frames")
    for q in range(T, len(video)):
        idx = sample_memory(video, q, T, mode, window, np.random.default_rng([seed, q]))
        yield clip_from_video(video, q, idx)


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentParams:
    resize_min: float = 0.5
    resize_max: float = 2.0
    crop: int = 32
    hflip_prob: float = 0.5


def _nearest_index(out_size: int, in_size: int) -> np.ndarray:
    src = np.floor((np.arange(out_size) + 0.5) * in_size / out_size).astype(int)
    return np.minimum(src, in_size - 1)


def _resize_frame(frame: np.ndarray, H: int, W: int) -> np.ndarray:
    Ry = interp_matrix(H, frame.shape[1])
    Rx = interp_matrix(W, frame.shape[2])
    return Ry @ frame @ Rx.T


def augment(clip: VideoClip, rng: np.random.Generator, params: AugmentParams = AugmentParams()) -> VideoClip:
    """One random resize, crop and flip, applied identically to the whole clip."""
    H, W = clip.size
    ratio = float(rng.uniform(params.resize_min, params.resize_max))
    newH, newW = max(1, int(round(H * ratio))), max(1, int(round(W * ratio)))
    crop = params.crop
    padH, padW = max(newH, crop), max(newW, crop)
    oy = int(rng.integers(0, padH - crop + 1))
    ox = int(rng.integers(0, padW - crop + 1))
    flip = bool(rng.random() < params.hflip_prob)

    ly, lx = _nearest_index(newH, H), _nearest_index(newW, W)

    def frame_op(f):
        canvas = np.zeros((3, padH, padW))
        canvas[:, :newH, :newW] = _resize_frame(f, newH, newW)
        out = canvas[:, oy : oy + crop, ox : ox + crop]
        return (out[:, :, ::-1] if flip else out).copy()

    canvas = np.full((padH, padW), IGNORE_INDEX, dtype=np.uint8)
    canvas[:newH, :newW] = clip.label[np.ix_(ly, lx)]
    label = canvas[oy : oy + crop, ox : ox + crop]
    label = (label[:, ::-1] if flip else label).copy()
    return VideoClip([frame_op(f) for f in clip.memory], frame_op(clip.query), label, clip.query_index)


# ---------------------------------------------------------------------------
# TMAD dataset files

_TMAD_MAGIC = b"TMAD"
_TMAD_VERSION = 1


def write_dataset(path: str | Path, clips: Sequence[VideoClip]) -> None:
    """Write clips as: magic, u32 version, u32 count, then per clip
    u32 T, u32 H, u32 W, T+1 frames of little-endian f64 RGB planes
    (memory frames first, query last) and H*W label bytes."""
    if not clips:
        raise ContractError("empty dataset")
    chunks = [_TMAD_MAGIC, struct.pack("<II", _TMAD_VERSION, len(clips))]
    for clip in clips:
        H, W = clip.size
        labels = np.asarray(clip.label)
        if labels.min() < 0 or labels.max() > 255:
            raise ContractError("label values must fit in one byte")
        chunks.append(struct.pack("<III", clip.T, H, W))
        for f in [*clip.memory, clip.query]:
            chunks.append(np.ascontiguousarray(f, dtype="<f8").tobytes())
        chunks.append(labels.astype(np.uint8).tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_dataset(path: str | Path) -> list[VideoClip]:
    buf = Path(path).read_bytes()
    if buf[:4] != _TMAD_MAGIC:
        raise FormatError(f"{path}: not a TMAD dataset (bad magic)")
    try:
        version, count = struct.unpack_from("<II", buf, 4)
        if version != _TMAD_VERSION:
            raise FormatError(f"{path}: unsupported TMAD version {version}")
        pos = 12
        clips = []
        for _ in range(count):
            T, H, W = struct.unpack_from("<III", buf, pos)
            pos += 12
            n = 3 * H * W
            frames = []
            for _ in range(T + 1):
                frames.append(np.frombuffer(buf, dtype="<f8", count=n, offset=pos).reshape(3, H, W).astype(np.float64))
                pos += 8 * n
            label = np.frombuffer(buf, dtype=np.uint8, count=H * W, offset=pos).reshape(H, W).copy()
            pos += H * W
            clips.append(VideoClip(frames[:T], frames[T], label, T))
    except (struct.error, ValueError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"{path}: truncated or corrupt TMAD file ({exc})") from exc
    if pos != len(buf):
        raise FormatError(f"{path}: {len(buf) - pos} trailing bytes after {count} clips")
    return clips
