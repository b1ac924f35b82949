"""Deterministic synthetic stereo event-camera scenes with exact depth.

A scene is a set of textured rectangles translating over a slowly
drifting textured background, z-buffered by depth; a single camera
translation drives every surface at speed proportional to inverse depth. Events follow the DVS generative model:
each pixel integrates log-luminance and emits an ON/OFF event whenever
the change since its reference level reaches the threshold theta, with
linearly interpolated timestamps. The right view shifts every object
horizontally by baseline / depth pixels (disparity), and object speed
scales with inverse depth (motion parallax), so both views carry depth
cues that a network can pick up.

Ground-truth depth is analytic and emitted at a 20 Hz cadence. Everything
is reproducible from the scene seed.

File formats owned here: `.evt` event streams (see events module) and raw
depth rasters: 8-byte header (H u32, W u32, little-endian) followed by
float32 LE pixels, NaN marking invalid.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .events import EventStream, InputChunk, make_chunk, read_evt, write_evt
from .model import DepthMap

GT_PERIOD_S = 0.05  # 20 Hz ground-truth cadence


@dataclass
class RectSpec:
    """A textured rectangle at fixed depth, translating at constant velocity."""
    x0: float
    y0: float
    w: float
    h: float
    depth: float        # meters
    vx: float           # px/s, left view
    vy: float
    contrast: float     # log-luminance amplitude of the texture
    period: float       # texture period, px
    phase: float = 0.0


@dataclass
class SceneSpec:
    height: int = 64
    width: int = 64
    background_depth: float = 6.0
    rects: list[RectSpec] = field(default_factory=list)
    baseline: float = 8.0       # px * m; disparity = baseline / depth
    duration_s: float = 0.3
    theta: float = 0.2          # event threshold, log-luminance units
    frame_dt_s: float = 0.001
    seed: int = 0
    # background texture, translating with the camera-motion parallax;
    # zero contrast or zero velocity means a static (eventless) background
    bg_contrast: float = 0.0
    bg_period: float = 12.0
    bg_vx: float = 0.0          # px/s
    bg_vy: float = 0.0


def _rect_position(rect: RectSpec, t: float, view: str, baseline: float):
    x = rect.x0 + rect.vx * t
    if view == "right":
        x -= baseline / rect.depth
    return x, rect.y0 + rect.vy * t


def render_scene(spec: SceneSpec, t: float, view: str = "left"):
    """Log-luminance and depth rasters at time t, z-buffered far to near."""
    h, w = spec.height, spec.width
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    lum = np.full((h, w), 0.5)
    if spec.bg_contrast != 0.0:
        bx = xx - spec.bg_vx * t
        by = yy - spec.bg_vy * t
        if view == "right":
            bx += spec.baseline / spec.background_depth
        lum += spec.bg_contrast * np.sin(2 * np.pi * bx / spec.bg_period) \
            * np.sin(2 * np.pi * by / spec.bg_period)
    depth = np.full((h, w), spec.background_depth)
    for rect in sorted(spec.rects, key=lambda r: -r.depth):
        rx, ry = _rect_position(rect, t, view, spec.baseline)
        mask = (xx >= rx) & (xx < rx + rect.w) & (yy >= ry) & (yy < ry + rect.h)
        if not mask.any():
            continue
        # texture in object coordinates, so it translates with the rectangle
        u = xx[mask] - rx
        v = yy[mask] - ry
        tex = rect.contrast * np.sin(2 * np.pi * u / rect.period + rect.phase) \
            * np.sin(2 * np.pi * v / rect.period)
        lum[mask] = 0.5 + tex
        depth[mask] = rect.depth
    return lum, depth


def render_depth(spec: SceneSpec, t: float, view: str = "left") -> DepthMap:
    """Analytic ground-truth depth at time t (fully valid)."""
    if not 0.0 <= t <= spec.duration_s + 1e-9:
        raise ValueError(f"t={t} outside scene duration [0, {spec.duration_s}]")
    _, depth = render_scene(spec, t, view)
    return DepthMap(depth=depth, valid=np.ones_like(depth, dtype=bool))


def generate_events(spec: SceneSpec, view: str = "left") -> EventStream:
    """Simulate the DVS: threshold crossings of per-pixel log-luminance."""
    if view not in ("left", "right"):
        raise ValueError(f"view must be 'left' or 'right', got {view!r}")
    h, w = spec.height, spec.width
    theta = spec.theta
    n_steps = int(round(spec.duration_s / spec.frame_dt_s))
    lum_prev, _ = render_scene(spec, 0.0, view)
    ref = lum_prev.copy()

    ts_all, xs_all, ys_all, ps_all = [], [], [], []

    def emit(n_map, polarity, sign, lum, t_prev_us, dt_us):
        ys, xs = np.nonzero(n_map)
        if len(ys) == 0:
            return
        counts = n_map[ys, xs]
        total = int(counts.sum())
        ry = np.repeat(ys, counts)
        rx = np.repeat(xs, counts)
        j = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
        # crossing level for the (j+1)-th event; linear luminance in time
        level = ref[ry, rx] + sign * (j + 1) * theta
        d = lum[ry, rx] - lum_prev[ry, rx]
        frac = np.clip((level - lum_prev[ry, rx]) / d, 0.0, 1.0)
        t_ev = (t_prev_us + frac * dt_us).astype(np.uint64)
        ts_all.append(t_ev)
        xs_all.append(rx.astype(np.uint16))
        ys_all.append(ry.astype(np.uint16))
        ps_all.append(np.full(total, polarity, dtype=np.uint8))

    dt_us = spec.frame_dt_s * 1e6
    for k in range(1, n_steps + 1):
        t = k * spec.frame_dt_s
        lum, _ = render_scene(spec, t, view)
        d = lum - ref
        n_on = np.where(d > 0, np.floor(d / theta), 0).astype(np.int64)
        n_off = np.where(d < 0, np.floor(-d / theta), 0).astype(np.int64)
        emit(n_on, 1, +1.0, lum, (k - 1) * dt_us, dt_us)
        emit(n_off, 0, -1.0, lum, (k - 1) * dt_us, dt_us)
        ref += (n_on - n_off) * theta
        lum_prev = lum

    if not ts_all:
        return EventStream.empty(h, w)
    t_arr = np.concatenate(ts_all)
    order = np.argsort(t_arr, kind="stable")
    return EventStream(t=t_arr[order],
                       x=np.concatenate(xs_all)[order],
                       y=np.concatenate(ys_all)[order],
                       polarity=np.concatenate(ps_all)[order],
                       height=h, width=w)


def random_scene(seed: int, height: int = 64, width: int = 64,
                 duration_s: float = 0.3) -> SceneSpec:
    """Sample a training scene: fixed background, 1-2 near rectangles whose
    speed is proportional to inverse depth."""
    rng = np.random.default_rng(seed)
    # one translating camera per scene: every surface moves at
    # cam_speed / depth, so local flow magnitude is a depth cue
    cam_speed = float(rng.uniform(40, 80))  # px * m / s
    angle = float(rng.uniform(0, 2 * np.pi))
    cam_vx = cam_speed * np.cos(angle)
    cam_vy = cam_speed * np.sin(angle)
    bg_depth = 6.0
    rects = []
    for _ in range(int(rng.integers(1, 3))):
        depth = float(rng.uniform(1.0, 3.0))
        size = float(rng.uniform(18, 32))
        speed = cam_speed / depth
        margin = speed * duration_s + 2
        x0 = float(rng.uniform(margin, width - size - margin)) \
            if width - size - 2 * margin > 0 else (width - size) / 2
        y0 = float(rng.uniform(margin, height - size - margin)) \
            if height - size - 2 * margin > 0 else (height - size) / 2
        rects.append(RectSpec(
            x0=x0, y0=y0, w=size, h=size, depth=depth,
            vx=cam_vx / depth, vy=cam_vy / depth,
            contrast=float(rng.uniform(0.6, 1.0)),
            period=float(rng.uniform(4, 8)),
            phase=float(rng.uniform(0, 2 * np.pi)),
        ))
    # coarse low-contrast background texture: the slow far plane still emits
    # events, so its depth is observable, but near objects dominate the rate
    return SceneSpec(height=height, width=width, rects=rects, seed=seed,
                     duration_s=duration_s, background_depth=bg_depth,
                     bg_contrast=float(rng.uniform(0.3, 0.5)),
                     bg_period=float(rng.uniform(10, 16)),
                     bg_vx=cam_vx / bg_depth, bg_vy=cam_vy / bg_depth)


# ---------------------------------------------------------------------------
# depth raster files

def write_depth_raster(depth_map: DepthMap, path) -> None:
    d = depth_map.depth.astype("<f4").copy()
    d[~depth_map.valid] = np.nan
    with open(path, "wb") as f:
        f.write(struct.pack("<II", d.shape[0], d.shape[1]))
        f.write(d.tobytes())


def read_depth_raster(path) -> DepthMap:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 8:
        raise ValueError(f"{path}: truncated depth raster header")
    h, w = struct.unpack_from("<II", raw)
    d = np.frombuffer(raw[8:], dtype="<f4")
    if d.size != h * w:
        raise ValueError(f"{path}: depth raster size mismatch")
    d = d.reshape(h, w).astype(np.float32)
    valid = ~np.isnan(d)
    d = np.where(valid, d, 0.0).astype(np.float32)
    return DepthMap(depth=d, valid=valid)


# ---------------------------------------------------------------------------
# dataset generation and loading

def make_dataset(out_dir, count: int, seed: int = 0, height: int = 64,
                 width: int = 64, duration_s: float = 0.3,
                 train_fraction: float = 0.8) -> dict:
    """Generate `count` scenes (left/right `.evt` pairs plus 20 Hz depth
    rasters) and a JSON manifest with a seeded 80/20 train/test split.
    Byte-identical for a fixed seed."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    samples = []
    n_gt = int(round(duration_s / GT_PERIOD_S))
    for i in range(count):
        scene = random_scene(seed * 1_000_003 + i, height, width, duration_s)
        name = f"sample_{i:04d}"
        left = generate_events(scene, "left")
        right = generate_events(scene, "right")
        write_evt(left, out / f"{name}_left.evt")
        write_evt(right, out / f"{name}_right.evt")
        depth_files = []
        for k in range(1, n_gt + 1):
            t = k * GT_PERIOD_S
            fname = f"{name}_depth_{k:02d}.raw"
            write_depth_raster(render_depth(scene, t), out / fname)
            depth_files.append(fname)
        samples.append({
            "name": name,
            "left": f"{name}_left.evt",
            "right": f"{name}_right.evt",
            "depth": depth_files,
        })
    rng = np.random.default_rng(seed)
    order = rng.permutation(count)
    n_train = int(round(count * train_fraction))
    manifest = {
        "height": height,
        "width": width,
        "duration_s": duration_s,
        "gt_period_s": GT_PERIOD_S,
        "seed": seed,
        "samples": samples,
        "train": sorted(int(i) for i in order[:n_train]),
        "test": sorted(int(i) for i in order[n_train:]),
    }
    with open(out / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
    return manifest


@dataclass
class Sample:
    name: str
    left: InputChunk
    right: InputChunk
    gt: DepthMap


@dataclass
class Dataset:
    height: int
    width: int
    train: list[Sample]
    test: list[Sample]


def load_dataset(data_dir, n_frames: int = 5, frame_ms: float = 50.0) -> Dataset:
    """Load a generated dataset: bin each stream into one input chunk of
    n_frames x frame_ms starting at t=0, paired with the ground-truth
    depth raster closest to the chunk end."""
    data_dir = Path(data_dir)
    with open(data_dir / "manifest.json") as f:
        manifest = json.load(f)
    dt_us = int(round(frame_ms * 1000))
    chunk_end_s = n_frames * frame_ms / 1000.0
    gt_period = manifest.get("gt_period_s", GT_PERIOD_S)

    def load_sample(idx: int) -> Sample:
        info = manifest["samples"][idx]
        left = make_chunk(read_evt(data_dir / info["left"]), 0, n_frames, dt_us)
        right = make_chunk(read_evt(data_dir / info["right"]), 0, n_frames, dt_us)
        gt_idx = int(round(chunk_end_s / gt_period)) - 1
        gt_idx = min(max(gt_idx, 0), len(info["depth"]) - 1)
        gt = read_depth_raster(data_dir / info["depth"][gt_idx])
        return Sample(name=info["name"], left=left, right=right, gt=gt)

    return Dataset(
        height=manifest["height"], width=manifest["width"],
        train=[load_sample(i) for i in manifest["train"]],
        test=[load_sample(i) for i in manifest["test"]],
    )
