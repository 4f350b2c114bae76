"""Synthetic video clips, tubelet (un)patchify and on-disk formats."""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .config import ClipShape, ConfigError

MOTION_CLASSES = ("N", "NE", "E", "SE", "S", "SW", "W", "NW")
# (dy, dx) per class in image coordinates; y grows downward
MOTION_VECTORS = {
    "N": (-1, 0), "NE": (-1, 1), "E": (0, 1), "SE": (1, 1),
    "S": (1, 0), "SW": (1, -1), "W": (0, -1), "NW": (-1, -1),
}
_ALIASES = {"up": "N", "right": "E", "down": "S", "left": "W"}

CLIP_MAGIC = b"NXTV"
CLIP_VERSION = 1
PIXEL_MEAN = 0.5
PIXEL_STD = 0.5


@dataclass
class VideoClip:
    frames: np.ndarray  # [T_raw, H, W, C] float32 in [0, 1]
    label: Optional[int] = None
    clip_id: str = ""
    source: str = "synthetic_motion"

    def __post_init__(self):
        if self.frames.ndim != 4:
            raise ValueError(f"frames must be [T, H, W, C], got shape {self.frames.shape}")
        if self.source not in ("synthetic_motion", "static_image"):
            raise ValueError(f"unknown clip source {self.source!r}")

    def check(self, shape: ClipShape) -> None:
        expect = (shape.T_raw, shape.H, shape.W, shape.C)
        if tuple(self.frames.shape) != expect:
            raise ValueError(f"clip shape {tuple(self.frames.shape)} does not match {expect}")


@dataclass
class TokenSequence:
    """Frame-major token list; may be a visible subset of the full lattice."""

    tokens: np.ndarray  # [L, D]
    time_of: np.ndarray  # [L] int
    pos_of: np.ndarray  # [L, 3] int (t, y, x)
    spatial_of: np.ndarray  # [L] int, y * cols + x
    grid: tuple[int, int]
    T: int

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def complete(self) -> bool:
        return len(self.tokens) == self.T * self.grid[0] * self.grid[1]

    def as_grid(self) -> np.ndarray:
        if not self.complete:
            raise ValueError("token sequence is not a full lattice")
        return self.tokens.reshape(self.T, self.grid[0] * self.grid[1], -1)


def resolve_class(class_id) -> int:
    if isinstance(class_id, str):
        name = _ALIASES.get(class_id.lower(), class_id.upper())
        if name not in MOTION_VECTORS:
            raise ConfigError(f"unknown motion class {class_id!r}")
        return MOTION_CLASSES.index(name)
    class_id = int(class_id)
    if not 0 <= class_id < len(MOTION_CLASSES):
        raise ConfigError(f"motion class id {class_id} out of range")
    return class_id


def render_background(seed: int, shape: ClipShape) -> np.ndarray:
    """Static textured background [H, W, C] determined by the seed."""
    rng = np.random.default_rng([seed, 0])
    base = rng.uniform(0.15, 0.45, size=shape.C)
    # coarse noise upsampled 2x gives visible texture without pixel-level aliasing
    ch, cw = -(-shape.H // 2), -(-shape.W // 2)
    coarse = rng.uniform(-0.12, 0.12, size=(ch, cw, shape.C))
    tex = np.repeat(np.repeat(coarse, 2, axis=0), 2, axis=1)[: shape.H, : shape.W]
    return np.clip(base + tex, 0.0, 1.0)


def _coverage_1d(start: float, length: float, n: int) -> np.ndarray:
    edges = np.arange(n, dtype=np.float64)
    lo = np.maximum(edges, start)
    hi = np.minimum(edges + 1.0, start + length)
    return np.clip(hi - lo, 0.0, 1.0)


def generate_synthetic_clip(seed: int, class_id, shape: ClipShape) -> VideoClip:
    """One coloured rectangle translating over a fixed textured background.

    Geometry and colours depend on ``seed`` only; ``class_id`` picks the
    compass direction of motion. Rendering uses fractional pixel coverage so
    sub-pixel velocities still move the rectangle every frame.
    """
    if not isinstance(shape, ClipShape):
        raise ConfigError("shape must be a ClipShape")
    cls = resolve_class(class_id)
    dy, dx = MOTION_VECTORS[MOTION_CLASSES[cls]]
    rng = np.random.default_rng([seed, 1])
    H, W, n = shape.H, shape.W, shape.T_raw

    rh = rng.uniform(0.2, 0.32) * H
    rw = rng.uniform(0.2, 0.32) * W
    color = rng.uniform(0.6, 1.0, size=shape.C)
    if shape.C >= 3:
        color[rng.integers(shape.C)] = rng.uniform(0.0, 0.2)
    # the whole trajectory stays inside the frame
    span_y, span_x = H - rh - 1.0, W - rw - 1.0
    frac = rng.uniform(0.5, 0.9)
    step_y = frac * span_y / max(n - 1, 1)
    step_x = frac * span_x / max(n - 1, 1)
    travel_y, travel_x = abs(dy) * step_y * (n - 1), abs(dx) * step_x * (n - 1)
    y0 = 0.5 + rng.uniform(0.0, span_y - travel_y)
    x0 = 0.5 + rng.uniform(0.0, span_x - travel_x)
    if dy < 0:
        y0 += travel_y
    if dx < 0:
        x0 += travel_x

    bg = render_background(seed, shape)
    frames = np.empty((n, H, W, shape.C), dtype=np.float32)
    for t in range(n):
        cov = np.outer(_coverage_1d(y0 + dy * step_y * t, rh, H), _coverage_1d(x0 + dx * step_x * t, rw, W))
        cov = cov[..., None]
        frames[t] = np.clip(bg * (1.0 - cov) + color * cov, 0.0, 1.0)
    return VideoClip(frames=frames, label=cls, clip_id=f"syn-{seed}-{cls}", source="synthetic_motion")


def image_to_clip(frame: np.ndarray, T_raw: int, tubelet_size: int = 2, label=None, clip_id: str = "") -> VideoClip:
    frame = np.asarray(frame, dtype=np.float32)
    if frame.ndim == 2:
        frame = frame[..., None]
    if frame.ndim != 3:
        raise ValueError(f"image must be [H, W, C], got shape {frame.shape}")
    if T_raw <= 0 or T_raw % tubelet_size:
        raise ConfigError(f"T_raw={T_raw} must be a positive multiple of tubelet_size={tubelet_size}")
    frames = np.repeat(frame[None], T_raw, axis=0)
    return VideoClip(frames=frames, label=label, clip_id=clip_id, source="static_image")


def _permute(x, axes):
    return x.permute(*axes) if hasattr(x, "permute") else x.transpose(axes)


def patchify_array(frames, shape: ClipShape):
    """[..., T_raw, H, W, C] -> [..., T, N_s, D]; works for numpy and torch.

    Per-token layout is (patch_h, patch_w, tubelet, C): the raw frames of a
    tubelet end up stacked along the channel axis of each pixel.
    """
    lead = tuple(frames.shape[:-4])
    nl = len(lead)
    T, (gh, gw) = shape.T, shape.grid
    x = frames.reshape(*lead, T, shape.tubelet_size, gh, shape.patch_h, gw, shape.patch_w, shape.C)
    axes = tuple(range(nl)) + tuple(nl + a for a in (0, 2, 4, 3, 5, 1, 6))
    x = _permute(x, axes)
    return x.reshape(*lead, T, gh * gw, shape.token_dim_raw)


def unpatchify_array(tokens, shape: ClipShape):
    """Inverse of :func:`patchify_array`."""
    lead = tuple(tokens.shape[:-3])
    nl = len(lead)
    T, (gh, gw) = shape.T, shape.grid
    x = tokens.reshape(*lead, T, gh, gw, shape.patch_h, shape.patch_w, shape.tubelet_size, shape.C)
    # current: T, gh, gw, ph, pw, tub, C  ->  T, tub, gh, ph, gw, pw, C
    axes = tuple(range(nl)) + tuple(nl + a for a in (0, 5, 1, 3, 2, 4, 6))
    x = _permute(x, axes)
    return x.reshape(*lead, shape.T_raw, shape.H, shape.W, shape.C)


def lattice(T: int, grid: tuple[int, int]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Frame-major (time_of, pos_of, spatial_of) for the full token lattice."""
    rows, cols = grid
    t, y, x = np.meshgrid(np.arange(T), np.arange(rows), np.arange(cols), indexing="ij")
    pos = np.stack([t.ravel(), y.ravel(), x.ravel()], axis=1).astype(np.int64)
    return pos[:, 0].copy(), pos, (pos[:, 1] * cols + pos[:, 2])


def patchify(clip: VideoClip, shape: ClipShape) -> TokenSequence:
    clip.check(shape)
    grid_tokens = patchify_array(clip.frames, shape)
    time_of, pos_of, spatial_of = lattice(shape.T, shape.grid)
    return TokenSequence(
        tokens=np.ascontiguousarray(grid_tokens.reshape(-1, shape.token_dim_raw)),
        time_of=time_of, pos_of=pos_of, spatial_of=spatial_of, grid=shape.grid, T=shape.T,
    )


def unpatchify(tokens: TokenSequence, shape: ClipShape) -> VideoClip:
    expect = shape.T * shape.N_s
    if len(tokens.tokens) != expect:
        raise ValueError(f"expected {expect} tokens, got {len(tokens.tokens)}")
    frames = unpatchify_array(tokens.tokens.reshape(shape.T, shape.N_s, -1), shape)
    return VideoClip(frames=np.ascontiguousarray(frames, dtype=np.float32))


def normalize(x):
    return (x - PIXEL_MEAN) / PIXEL_STD


def denormalize(x):
    return x * PIXEL_STD + PIXEL_MEAN


# ---------------------------------------------------------------- corpus


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


@dataclass(frozen=True)
class ClipRecord:
    clip_id: str
    seed: int
    class_id: int
    split: str


def corpus_records(n_train: int, n_val: int, seed: int) -> list[ClipRecord]:
    """Class-balanced records; classes cycle so each split is balanced."""
    out = []
    for split, code, n in (("train", 0, n_train), ("val", 1, n_val)):
        for i in range(n):
            s = derive_seed(seed, code, i)
            out.append(ClipRecord(f"{split}-{i:06d}", s, i % len(MOTION_CLASSES), split))
    return out


def clip_for(record: ClipRecord, shape: ClipShape) -> VideoClip:
    clip = generate_synthetic_clip(record.seed, record.class_id, shape)
    clip.clip_id = record.clip_id
    return clip


def clips_array(records: Iterable[ClipRecord], shape: ClipShape) -> tuple[np.ndarray, np.ndarray]:
    recs = list(records)
    frames = np.stack([clip_for(r, shape).frames for r in recs]) if recs else np.zeros((0, shape.T_raw, shape.H, shape.W, shape.C), np.float32)
    labels = np.array([r.class_id for r in recs], dtype=np.int64)
    return frames, labels


MANIFEST_HEADER = "# clip_id\tseed\tclass_id\tsplit"


def write_manifest(records: Iterable[ClipRecord], path: str | Path) -> None:
    lines = [MANIFEST_HEADER] + [f"{r.clip_id}\t{r.seed}\t{r.class_id}\t{r.split}" for r in records]
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path: str | Path) -> list[ClipRecord]:
    out = []
    for ln, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise ValueError(f"{path}:{ln}: expected 4 tab-separated fields")
        out.append(ClipRecord(parts[0], int(parts[1]), int(parts[2]), parts[3]))
    return out


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_clip(clip: VideoClip, path: str | Path) -> None:
    T, H, W, C = clip.frames.shape
    header = CLIP_MAGIC + struct.pack("<5I", CLIP_VERSION, T, H, W, C)
    payload = np.ascontiguousarray(clip.frames, dtype="<f4").tobytes()
    Path(path).write_bytes(header + payload)


def read_clip(path: str | Path) -> VideoClip:
    raw = Path(path).read_bytes()
    if raw[:4] != CLIP_MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:4]!r}")
    version, T, H, W, C = struct.unpack("<5I", raw[4:24])
    if version != CLIP_VERSION:
        raise ValueError(f"{path}: unsupported clip version {version}")
    expect = T * H * W * C * 4
    if len(raw) - 24 != expect:
        raise ValueError(f"{path}: payload is {len(raw) - 24} bytes, expected {expect}")
    frames = np.frombuffer(raw, dtype="<f4", offset=24).reshape(T, H, W, C).astype(np.float32)
    return VideoClip(frames=frames, clip_id=Path(path).stem)


def to_uint8(frame: np.ndarray) -> np.ndarray:
    frame = np.asarray(frame)
    if frame.ndim == 2:
        frame = frame[..., None]
    if frame.shape[-1] == 1:
        frame = np.repeat(frame, 3, axis=-1)
    return (np.clip(frame[..., :3], 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def write_ppm(frame: np.ndarray, path: str | Path) -> None:
    img = to_uint8(frame)
    h, w, _ = img.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + img.tobytes())


def read_ppm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PPM supported")
    data = parts[4]
    return np.frombuffer(data[: w * h * 3], dtype=np.uint8).reshape(h, w, 3)


def frame_grid(rows: list[list[np.ndarray]], pad: int = 1) -> np.ndarray:
    """Tile a list of frame rows into one image with ``pad`` pixels of white."""
    h, w = rows[0][0].shape[:2]
    ncols = max(len(r) for r in rows)
    out = np.ones((len(rows) * (h + pad) + pad, ncols * (w + pad) + pad, 3), dtype=np.float32)
    for i, row in enumerate(rows):
        for j, img in enumerate(row):
            img = np.asarray(img, dtype=np.float32)
            if img.ndim == 2:
                img = img[..., None]
            if img.shape[-1] == 1:
                img = np.repeat(img, 3, axis=-1)
            y, x = pad + i * (h + pad), pad + j * (w + pad)
            out[y:y + h, x:x + w] = img[..., :3]
    return out
