"""Synthetic clip generation and frame-sequence file I/O.

Clips are built from a static blocky background texture, an optional static
overlay patch (a stand-in for a broadcaster logo), and moving shapes that
translate with integer velocities and wrap toroidally.  All geometry is
integer arithmetic, so a given spec renders bit-identically everywhere.
The static overlay is drawn last and is pixel-identical across frames,
which gives the model-division tests their ground truth for shared content.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .video_model import Frame, Gop

RAW_DTYPE_TAGS = {1: np.uint8, 2: np.float32}
_RAW_HEADER = np.dtype("<u4")  # height, width, channels, dtype tag


@dataclass(frozen=True)
class MovingShape:
    """Axis-aligned rectangle or disc translating with integer velocity."""

    kind: str  # "rect" or "disc"
    x: int
    y: int
    size: int
    color: tuple[float, float, float]
    vx: int = 0
    vy: int = 0

    def __post_init__(self):
        if self.kind not in ("rect", "disc"):
            raise ValueError(f"unknown shape kind {self.kind!r}")
        if self.size < 1:
            raise ValueError("shape size must be >= 1")


@dataclass(frozen=True)
class Overlay:
    """Static overlay patch: position and size in pixels."""

    x: int
    y: int
    width: int
    height: int


@dataclass(frozen=True)
class SceneSpec:
    """Deterministic description of one synthetic clip.

    ``texture_region`` confines the background texture to a sub-rectangle
    (None textures the whole canvas); real video mixes flat and detailed
    areas, and the drop-policy experiments rely on that skew.
    """

    height: int = 64
    width: int = 64
    num_frames: int = 4
    bg_seed: int = 0
    bg_base: tuple[float, float, float] = (0.5, 0.5, 0.5)
    texture_amp: float = 0.15
    texture_cells: int = 8
    texture_region: Overlay | None = None
    overlay: Overlay | None = None
    shapes: tuple[MovingShape, ...] = ()
    noise: float = 0.0
    grain_region: Overlay | None = None
    grain_amp: float = 0.15

    def __post_init__(self):
        if self.height < 1 or self.width < 1 or self.num_frames < 1:
            raise ValueError("canvas and frame count must be positive")
        if not 0.0 <= self.noise < 0.5:
            raise ValueError("noise level must lie in [0, 0.5)")
        if not 0.0 <= self.grain_amp < 0.5:
            raise ValueError("grain amplitude must lie in [0, 0.5)")


def _background(spec: SceneSpec) -> np.ndarray:
    rng = np.random.default_rng(spec.bg_seed)
    cells = max(1, spec.texture_cells)
    grid = rng.uniform(-1.0, 1.0, size=(cells, cells, 3))
    reps_y = -(-spec.height // cells)
    reps_x = -(-spec.width // cells)
    tex = np.repeat(np.repeat(grid, reps_y, axis=0), reps_x, axis=1)
    tex = tex[: spec.height, : spec.width]
    if spec.texture_region is not None:
        mask = np.zeros((spec.height, spec.width, 1))
        r = spec.texture_region
        mask[r.y : r.y + r.height, r.x : r.x + r.width] = 1.0
        tex = tex * mask
    base = np.asarray(spec.bg_base, dtype=np.float64)
    return np.clip(base + spec.texture_amp * tex, 0.0, 1.0)


def _overlay_pattern(spec: SceneSpec) -> np.ndarray:
    ov = spec.overlay
    rng = np.random.default_rng((spec.bg_seed, 0xB10C))
    color = rng.uniform(0.0, 1.0, size=3)
    patch = np.empty((ov.height, ov.width, 3), dtype=np.float64)
    patch[:] = color
    # contrasting border plus a diagonal stripe so the patch has structure
    patch[0, :] = patch[-1, :] = patch[:, 0] = patch[:, -1] = 1.0 - color
    for i in range(min(ov.height, ov.width)):
        patch[i, i] = 1.0 - color
    return patch


def _paste_wrapped(canvas: np.ndarray, patch: np.ndarray, y: int, x: int) -> None:
    h, w = canvas.shape[:2]
    ph, pw = patch.shape[:2]
    ys = (np.arange(ph) + y) % h
    xs = (np.arange(pw) + x) % w
    canvas[np.ix_(ys, xs)] = patch


def _draw_shape(canvas: np.ndarray, shape: MovingShape, t: int) -> None:
    h, w = canvas.shape[:2]
    cy = (shape.y + t * shape.vy) % h
    cx = (shape.x + t * shape.vx) % w
    s = shape.size
    color = np.asarray(shape.color, dtype=np.float64)
    if shape.kind == "rect":
        patch = np.broadcast_to(color, (s, s, 3)).copy()
        _paste_wrapped(canvas, patch, cy, cx)
    else:
        r = s // 2
        dy, dx = np.mgrid[-r : r + 1, -r : r + 1]
        mask = dy * dy + dx * dx <= r * r
        ys = (dy[mask] + cy) % h
        xs = (dx[mask] + cx) % w
        canvas[ys, xs] = color


def generate_clip(spec: SceneSpec, rng: np.random.Generator | None = None) -> list[Frame]:
    """Render a clip: background, noise, grain patch, moving shapes, overlay.

    The overlay is drawn last, so its pixels are identical in every frame.
    The grain region gets strong per-frame dynamic noise: high-power content
    that is worthless to transmit, like sensor grain or churning water.
    Per-frame randomness comes from ``rng`` (clip identity itself is fully
    determined by the spec).
    """
    if rng is None:
        rng = np.random.default_rng(spec.bg_seed)
    bg = _background(spec)
    overlay = _overlay_pattern(spec) if spec.overlay is not None else None
    frames = []
    for t in range(spec.num_frames):
        canvas = bg.copy()
        if spec.noise > 0.0:
            canvas = canvas + rng.uniform(-spec.noise, spec.noise, size=canvas.shape)
        if spec.grain_region is not None and spec.grain_amp > 0.0:
            g = spec.grain_region
            canvas[g.y : g.y + g.height, g.x : g.x + g.width] += rng.uniform(
                -spec.grain_amp, spec.grain_amp, size=(g.height, g.width, 3)
            )
        for shape in spec.shapes:
            _draw_shape(canvas, shape, t)
        if overlay is not None:
            _paste_wrapped(canvas, overlay, spec.overlay.y, spec.overlay.x)
        frames.append(Frame(pixels=np.clip(canvas, 0.0, 1.0), index=t))
    return frames


def make_jump_gop(specs: list[SceneSpec], rng: np.random.Generator | None = None,
                  gop_id: int = 0) -> Gop:
    """GOP whose frames come from different scenes (frame i from scene i).

    With a single repeated spec this degenerates to a normal GOP.  Scenes
    are rendered once per position, so repeats reuse the same clip.
    """
    if not specs:
        raise ValueError("need at least one scene spec")
    if rng is None:
        rng = np.random.default_rng(0)
    shape = (specs[0].height, specs[0].width)
    for s in specs:
        if (s.height, s.width) != shape:
            raise ValueError("all scenes must share one canvas size")
    children = rng.spawn(len(specs))
    clips = {}
    frames = []
    for i, spec in enumerate(specs):
        key = i % len(specs)
        if key not in clips:
            clips[key] = generate_clip(spec, children[key])
        clip = clips[key]
        frames.append(Frame(pixels=clip[i % len(clip)].pixels, index=i))
    return Gop(frames=tuple(frames), gop_id=gop_id)


def random_scene(rng: np.random.Generator, height: int = 64, width: int = 64,
                 num_frames: int = 4, noise: float = 0.0) -> SceneSpec:
    """Draw a varied scene: textured background, logo overlay, moving shapes."""
    n_shapes = int(rng.integers(1, 4))
    shapes = []
    for _ in range(n_shapes):
        size = int(rng.integers(6, max(8, min(height, width) // 3)))
        shapes.append(MovingShape(
            kind=str(rng.choice(["rect", "disc"])),
            x=int(rng.integers(0, width)),
            y=int(rng.integers(0, height)),
            size=size,
            color=tuple(float(v) for v in rng.uniform(0.0, 1.0, size=3)),
            vx=int(rng.integers(-3, 4)),
            vy=int(rng.integers(-3, 4)),
        ))
    ow = int(rng.integers(10, max(12, width // 4)))
    oh = int(rng.integers(8, max(10, height // 4)))
    overlay = Overlay(
        x=int(rng.integers(0, width - ow)),
        y=int(rng.integers(0, height - oh)),
        width=ow,
        height=oh,
    )
    # texture only part of the canvas: flat areas plus detailed areas, the
    # information skew that makes importance ranking meaningful
    tw = int(rng.integers(width // 3, 2 * width // 3))
    th = int(rng.integers(height // 3, 2 * height // 3))
    texture_region = Overlay(
        x=int(rng.integers(0, width - tw)),
        y=int(rng.integers(0, height - th)),
        width=tw,
        height=th,
    )
    gw = int(rng.integers(width // 4, width // 2))
    gh = int(rng.integers(height // 4, height // 2))
    grain_region = Overlay(
        x=int(rng.integers(0, width - gw)),
        y=int(rng.integers(0, height - gh)),
        width=gw,
        height=gh,
    )
    return SceneSpec(
        height=height,
        width=width,
        num_frames=num_frames,
        bg_seed=int(rng.integers(0, 2 ** 31)),
        bg_base=tuple(float(v) for v in rng.uniform(0.25, 0.75, size=3)),
        texture_amp=float(rng.uniform(0.1, 0.25)),
        texture_cells=int(rng.integers(4, 16)),
        texture_region=texture_region,
        overlay=overlay,
        shapes=tuple(shapes),
        noise=noise,
        grain_region=grain_region,
        grain_amp=float(rng.uniform(0.1, 0.2)),
    )


class ToyVideoDataset:
    """Lazy deterministic dataset of synthetic GOPs: 2000 clips, 64x64, GOP 4.

    A little per-frame sensor noise keeps the drop policies honest: high
    power alone should not make an element worth transmitting.
    """

    def __init__(self, num_clips: int = 2000, height: int = 64, width: int = 64,
                 gop_size: int = 4, seed: int = 1234, noise: float = 0.03):
        self.num_clips = num_clips
        self.height = height
        self.width = width
        self.gop_size = gop_size
        self.seed = seed
        self.noise = noise

    def __len__(self) -> int:
        return self.num_clips

    def spec(self, index: int) -> SceneSpec:
        rng = np.random.default_rng([self.seed, index])
        return random_scene(rng, self.height, self.width, self.gop_size,
                            noise=self.noise)

    def __getitem__(self, index: int) -> Gop:
        if not 0 <= index < self.num_clips:
            raise IndexError(index)
        frames = generate_clip(self.spec(index))
        return Gop(frames=tuple(frames), gop_id=index)


def eval_video(num_gops: int = 8, height: int = 64, width: int = 64,
               gop_size: int = 4, seed: int = 777, noise: float = 0.03) -> list[Frame]:
    """Held-out synthetic frames for sweeps; seed stream disjoint from training."""
    frames = []
    for i in range(num_gops):
        rng = np.random.default_rng([seed, i])
        spec = random_scene(rng, height, width, gop_size, noise=noise)
        clip = generate_clip(spec)
        for f in clip:
            frames.append(Frame(pixels=f.pixels, index=len(frames)))
    return frames


# ---------------------------------------------------------------------------
# frame directory I/O: frame_%06d.png (8-bit RGB) or frame_%06d.raw with a
# 16-byte header of little-endian u32s (height, width, channels, dtype tag).

_FRAME_NUM = re.compile(r"(\d+)")


def write_frames(frames, dir_path, fmt: str = "png") -> None:
    """Write frames as numbered files; PNG for inspectability, raw for speed."""
    path = Path(dir_path)
    path.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(frames):
        px = np.asarray(frame.pixels)
        if fmt == "png":
            # quantize in float64: the float32 product can round up across
            # the .5 boundary and break the 1/510 error bound
            img = np.round(px.astype(np.float64) * 255.0).astype(np.uint8)
            Image.fromarray(img, mode="RGB").save(path / f"frame_{i:06d}.png")
        elif fmt == "raw":
            h, w, c = px.shape
            header = np.asarray([h, w, c, 2], dtype=_RAW_HEADER)
            with open(path / f"frame_{i:06d}.raw", "wb") as fh:
                fh.write(header.tobytes())
                fh.write(px.astype("<f4").tobytes())
        else:
            raise ValueError(f"unknown frame format {fmt!r}")


def _numeric_key(p: Path) -> int:
    match = _FRAME_NUM.findall(p.stem)
    if not match:
        raise ValueError(f"frame file {p.name} has no numeric index")
    return int(match[-1])


def read_frames(dir_path) -> list[Frame]:
    """Read a numbered frame directory in numeric (not lexicographic) order."""
    path = Path(dir_path)
    files = [p for p in path.iterdir() if p.suffix in (".png", ".raw")] if path.is_dir() else []
    if not files:
        raise ValueError(f"no frames in {dir_path}")
    files.sort(key=_numeric_key)
    frames = []
    names = []
    for i, p in enumerate(files):
        if p.suffix == ".png":
            img = np.asarray(Image.open(p).convert("RGB"), dtype=np.float64)
            px = img / 255.0
        else:
            raw = p.read_bytes()
            h, w, c, tag = np.frombuffer(raw, dtype=_RAW_HEADER, count=4)
            if tag not in RAW_DTYPE_TAGS:
                raise ValueError(f"{p.name}: unknown raw dtype tag {tag}")
            dt = np.dtype(RAW_DTYPE_TAGS[tag]).newbyteorder("<")
            px = np.frombuffer(raw, dtype=dt, offset=16).reshape(int(h), int(w), int(c))
            if tag == 1:
                px = px.astype(np.float64) / 255.0
        frames.append(Frame(pixels=px, index=i))
        names.append(p.name)
    expected = frames[0].shape
    offenders = [
        f"{name} {f.shape}" for name, f in zip(names, frames) if f.shape != expected
    ]
    if offenders:
        raise ValueError(
            f"mixed frame resolutions (expected {expected}): {', '.join(offenders)}"
        )
    return frames
