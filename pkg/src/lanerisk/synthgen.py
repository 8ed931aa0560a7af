"""Synthetic lane-change clips with known latent risk.

Each clip shows a textured road, an ego lane mark sweeping sideways during
the lane change and one lead vehicle drawn as a rectangle. The vehicle's
apparent width follows a linear trajectory ``w0 -> w1`` over the clip:

* ``closing``  small to large (the ego closes in fast): the risky kind
* ``opening``  large to small, the exact time reversal of ``closing``
* ``cruising`` a modest drift in either direction

Latent risk is ``r = rate * proximity`` where ``rate`` is the peak per-frame
width growth relative to a full small-to-large sweep over the clip (clipped
to ``[0, 1]``, so receding vehicles score 0) and ``proximity`` is the peak
width rescaled to ``[0, 1]`` over the allowed width range. ``r`` is
nondecreasing in closing rate and in nearness, and is 0 for a clip with no
closing motion.

``mirror_fraction`` is the overlap parameter: opening clips reuse the
closing width range with the lane-change drift mirrored, so each one is a
frame-for-frame time reversal of a possible closing clip. Any classifier
that scores frames independently and pools them symmetrically cannot tell
the two kinds apart; only the ordering carries the risk.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .datapipe import (
    AnnotationSet,
    SegmentationRecord,
    ensure_dir,
    frame_path,
    write_annotations,
    write_frame,
    write_masks,
)
from .errors import ConfigError
from .tensor import save_tensor

KINDS = ("closing", "opening", "cruising")
VEHICLE_CLASSES = ("car", "truck")

# Apparent vehicle width bounds as fractions of the frame width.
MIN_WIDTH = 0.12
MAX_WIDTH = 0.5
HORIZON = 0.3
ROAD_LEVEL = 105.0
ROAD_TEXTURE = 14.0
SENSOR_NOISE = 3.0


@dataclass(frozen=True)
class SceneParams:
    n_clips: int = 200
    height: int = 32
    width: int = 32
    n_frames: int = 60
    seed: int = 0
    risk_fraction: float = 0.05
    n_annotators: int = 10
    annotator_noise: float = 0.05
    annotator_spread: bool = True
    mirror_fraction: float = 0.45
    feature_dim: int = 64
    fps: float = 29.4

    def __post_init__(self):
        if self.n_clips < 1:
            raise ConfigError(f"n_clips must be >= 1, got {self.n_clips}")
        if self.height < 16 or self.width < 16:
            raise ConfigError(f"frames must be at least 16x16, got {self.height}x{self.width}")
        if self.n_frames < 2:
            raise ConfigError(f"n_frames must be >= 2, got {self.n_frames}")
        if not 0.0 <= self.risk_fraction <= 1.0 or not 0.0 <= self.mirror_fraction <= 1.0:
            raise ConfigError("risk_fraction and mirror_fraction must lie in [0, 1]")
        if self.risk_fraction + self.mirror_fraction > 1.0:
            raise ConfigError("risk_fraction + mirror_fraction must not exceed 1")
        if self.n_annotators < 1:
            raise ConfigError("need at least one annotator")
        if self.annotator_noise < 0:
            raise ConfigError("annotator_noise must be >= 0")
        if self.feature_dim < 1:
            raise ConfigError("feature_dim must be >= 1")


@dataclass
class ClipTruth:
    clip_id: str
    kind: str
    vehicle: str
    w0: float
    w1: float
    direction: int
    latent_risk: float


def clip_ids(n: int) -> list[str]:
    width = max(4, len(str(n - 1)))
    return [f"lc{i:0{width}d}" for i in range(n)]


def assign_kinds(params: SceneParams) -> list[str]:
    n = params.n_clips
    n_closing = math.floor(params.risk_fraction * n + 1e-9)
    n_opening = min(round(params.mirror_fraction * n), n - n_closing)
    kinds = ["closing"] * n_closing + ["opening"] * n_opening
    kinds += ["cruising"] * (n - len(kinds))
    order = np.random.default_rng([params.seed, 2]).permutation(n)
    return [kinds[i] for i in order]


def latent_risk(w0: float, w1: float, width: int, n_frames: int) -> float:
    """Risk of a linear width trajectory; see the module docstring."""
    w_lo, w_hi = MIN_WIDTH * width, MAX_WIDTH * width
    span = w_hi - w_lo
    full_rate = span / (n_frames - 1)
    peak_rate = (w1 - w0) / (n_frames - 1)
    rate = min(max(peak_rate / full_rate, 0.0), 1.0)
    proximity = min(max((max(w0, w1) - w_lo) / span, 0.0), 1.0)
    return rate * proximity


def draw_trajectory(kind: str, rng: np.random.Generator, width: int) -> tuple[float, float]:
    w_lo, w_hi = MIN_WIDTH * width, MAX_WIDTH * width
    span = w_hi - w_lo
    if kind in ("closing", "opening"):
        small = w_lo + rng.uniform(0.0, 0.1) * span
        large = w_hi - rng.uniform(0.0, 0.1) * span
        return (small, large) if kind == "closing" else (large, small)
    w0 = w_lo + rng.uniform(0.05, 0.6) * span
    w1 = float(np.clip(w0 + rng.uniform(-0.3, 0.3) * span, w_lo, w_hi))
    return w0, w1


def _vehicle_box(w, tau, direction, height, width, aspect):
    w_lo, w_hi = MIN_WIDTH * width, MAX_WIDTH * width
    horizon = HORIZON * height
    near = (w - w_lo) / (w_hi - w_lo)
    bottom = horizon + 3 + near * 0.6 * (height - horizon - 4)
    centre = width / 2 - direction * 0.2 * width * (2 * tau - 1)
    x0 = int(np.clip(round(centre - w / 2), 0, width - 1))
    x1 = int(np.clip(round(centre + w / 2), x0 + 1, width))
    y1 = int(np.clip(round(bottom), 1, height))
    y0 = int(np.clip(round(bottom - aspect * w), 0, y1 - 1))
    return x0, y0, x1 - x0, y1 - y0


def render_clip(params: SceneParams, index: int, kind: str):
    """Render one clip; returns ``(frames, records, truth)``."""
    h, w, n = params.height, params.width, params.n_frames
    rng = np.random.default_rng([params.seed, 0, index])
    vehicle = VEHICLE_CLASSES[index % 2]
    direction = int(rng.choice([-1, 1]))
    w0, w1 = draw_trajectory(kind, rng, w)
    aspect = 0.6 if vehicle == "car" else 0.9
    shade = -55.0 if vehicle == "car" else -40.0
    tint = rng.normal(0.0, 6.0, size=3)
    horizon = int(round(HORIZON * h))

    background = np.empty((h, w, 3))
    background[:horizon] = 165.0 + rng.normal(0.0, 6.0, size=(horizon, w, 3))
    road = ROAD_LEVEL + rng.normal(0.0, ROAD_TEXTURE, size=(h - horizon, w, 1))
    background[horizon:] = road + rng.normal(0.0, 3.0, size=(h - horizon, w, 3))
    body_texture = rng.normal(0.0, 6.0, size=(h, w, 1))
    rows = np.arange(horizon, h)
    depth = (rows - horizon + 1) / (h - horizon)

    frames = np.empty((n, h, w, 3), dtype=np.uint8)
    records = []
    for t in range(n):
        tau = t / (n - 1)
        img = background.copy()
        base_x = w / 2 + direction * 0.3 * w * (2 * tau - 1)
        mark_x = np.round(w / 2 + (base_x - w / 2) * depth).astype(int)
        ok = (mark_x >= 0) & (mark_x < w)
        img[rows[ok], mark_x[ok]] = 225.0
        width_t = w0 + (w1 - w0) * tau
        bx, by, bw, bh = _vehicle_box(width_t, tau, direction, h, w, aspect)
        body = ROAD_LEVEL + shade + tint + body_texture[by : by + bh, bx : bx + bw]
        img[by : by + bh, bx : bx + bw] = body
        img += rng.normal(0.0, SENSOR_NOISE, size=img.shape)
        frames[t] = np.clip(np.round(img), 0, 255).astype(np.uint8)
        records.append(
            SegmentationRecord(
                frame=t,
                cls=vehicle,
                bbox=(bx, by, bw, bh),
                confidence=round(float(rng.uniform(0.8, 0.99)), 4),
            )
        )
    truth = ClipTruth(
        clip_id="",
        kind=kind,
        vehicle=vehicle,
        w0=w0,
        w1=w1,
        direction=direction,
        latent_risk=latent_risk(w0, w1, w, n),
    )
    return frames, records, truth


def simulate_ratings(params: SceneParams, risks) -> np.ndarray:
    """Ratings ``clamp(round(1 + 4 * (scale * r + bias + noise)), 1, 5)``."""
    risks = np.asarray(risks, dtype=np.float64)
    out = np.empty((params.n_annotators, len(risks)))
    for a in range(params.n_annotators):
        rng = np.random.default_rng([params.seed, 1, a])
        if params.annotator_spread:
            bias, scale = rng.uniform(-0.1, 0.1), rng.uniform(0.8, 1.2)
        else:
            bias, scale = 0.0, 1.0
        noise = rng.normal(0.0, params.annotator_noise, size=len(risks))
        raw = 1.0 + 4.0 * (scale * risks + bias + noise)
        out[a] = np.clip(np.floor(raw + 0.5), 1, 5)
    return out


def feature_projection(params: SceneParams) -> np.ndarray:
    n_in = params.height * params.width * 3
    rng = np.random.default_rng([params.seed, 3])
    return rng.standard_normal((n_in, params.feature_dim)) / math.sqrt(n_in)


def frame_features(frames, projection) -> np.ndarray:
    """Stand-in for a truncated backbone: fixed random projection + tanh."""
    flat = frames.reshape(len(frames), -1) / 255.0 - 0.5
    return np.tanh(2.0 * flat @ projection)


def _write_clip(args):
    root, params, index, cid, kind, projection = args
    frames, records, truth = render_clip(params, index, kind)
    ensure_dir(Path(root) / "clips" / cid)
    for t, frame in enumerate(frames):
        write_frame(frame_path(root, cid, t), frame)
    write_masks(Path(root) / "masks" / f"{cid}.jsonl", records)
    save_tensor(Path(root) / "features" / f"{cid}.tnsr", frame_features(frames, projection))
    truth.clip_id = cid
    return truth


def generate(params: SceneParams, root, jobs=1) -> list[ClipTruth]:
    """Write a full dataset tree under ``root`` and return per-clip truth."""
    root = ensure_dir(root)
    for sub in ("clips", "masks", "features"):
        ensure_dir(root / sub)
    ids = clip_ids(params.n_clips)
    kinds = assign_kinds(params)
    projection = feature_projection(params)
    work = [(root, params, i, cid, kinds[i], projection) for i, cid in enumerate(ids)]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            truths = list(pool.map(_write_clip, work))
    else:
        truths = [_write_clip(w) for w in work]

    risks = [t.latent_risk for t in truths]
    ratings = simulate_ratings(params, risks)
    ann_ids = [f"a{a:02d}" for a in range(params.n_annotators)]
    write_annotations(root / "annotations.csv", AnnotationSet(ids, ann_ids, ratings))
    with open(root / "ground_truth.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["clip_id", "latent_risk", "is_risky"])
        for t in truths:
            writer.writerow([t.clip_id, repr(t.latent_risk), int(t.kind == "closing")])
    return truths
