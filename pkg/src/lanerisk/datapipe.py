"""Clip ingestion, temporal subsampling, mask compositing, features and labels.

Dataset directory layout::

    clips/<id>/frame_000000.png ...   RGB frames, 8-bit
    masks/<id>.jsonl                  one segmentation record per line
    annotations.csv                   clip_id,annotator_id,rating
    features/<id>.tnsr                optional [N x d] raw tensor per clip
    ground_truth.csv                  optional, written by the generator
"""

from __future__ import annotations

import csv
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, DataError, DimensionError, FormatError, InputError
from .tensor import load_tensor

NOMINAL_FPS = 29.4
DEFAULT_ALPHA = 0.7
RISK_QUANTILE_PERCENT = 5

# Bright, unnatural colours so masked regions stand out from road scenes.
DEFAULT_PALETTE = {
    "car": (0, 255, 255),
    "truck": (255, 0, 255),
    "other": (255, 255, 0),
    "bus": (0, 255, 0),
    "person": (255, 128, 0),
    "motorcycle": (128, 0, 255),
    "bicycle": (255, 0, 128),
}


@dataclass
class SegmentationRecord:
    """One detected object on one frame.

    ``bbox`` is ``(x, y, w, h)`` in pixels; a ``polygon`` (list of ``(x, y)``
    vertices) takes precedence over the box when present.
    """

    frame: int
    cls: str
    bbox: tuple[int, int, int, int] | None = None
    polygon: list[tuple[float, float]] | None = None
    confidence: float = 1.0

    def validate(self, height, width, n_frames=None):
        if self.frame < 0 or (n_frames is not None and self.frame >= n_frames):
            raise DataError(f"record frame {self.frame} outside clip of {n_frames} frames")
        if not 0.0 <= self.confidence <= 1.0:
            raise DataError(f"confidence {self.confidence} outside [0, 1]")
        if self.bbox is None and not self.polygon:
            raise DataError("record has neither bbox nor polygon")
        if self.bbox is not None:
            x, y, w, h = self.bbox
            if w < 1 or h < 1 or x < 0 or y < 0 or x + w > width or y + h > height:
                raise DataError(f"bbox {self.bbox} outside {width}x{height} frame")
        if self.polygon:
            pts = np.asarray(self.polygon, dtype=np.float64)
            if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 3:
                raise DataError("polygon needs at least three (x, y) vertices")
            if pts.min() < 0 or pts[:, 0].max() > width or pts[:, 1].max() > height:
                raise DataError(f"polygon outside {width}x{height} frame")

    def to_json(self) -> str:
        rec = {"frame": self.frame, "class": self.cls}
        if self.bbox is not None:
            rec["bbox"] = [int(v) for v in self.bbox]
        if self.polygon:
            rec["polygon"] = [[float(a), float(b)] for a, b in self.polygon]
        rec["confidence"] = self.confidence
        return json.dumps(rec, separators=(",", ":"))

    @classmethod
    def from_dict(cls, rec):
        bbox = rec.get("bbox")
        polygon = rec.get("polygon")
        return cls(
            frame=int(rec["frame"]),
            cls=str(rec["class"]),
            bbox=tuple(int(v) for v in bbox) if bbox is not None else None,
            polygon=[tuple(p) for p in polygon] if polygon else None,
            confidence=float(rec.get("confidence", 1.0)),
        )


@dataclass
class Clip:
    id: str
    frames: np.ndarray  # (N, H, W, 3) uint8
    fps: float = NOMINAL_FPS
    records: list[SegmentationRecord] = field(default_factory=list)

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        if self.frames.ndim != 4 or len(self.frames) < 1:
            raise DataError(f"clip {self.id}: frames must be (N>=1, H, W, C), got {self.frames.shape}")

    def __len__(self):
        return len(self.frames)


@dataclass
class AnnotationSet:
    """Raw ratings in ``1..5``, one row per annotator, one column per clip."""

    clip_ids: list[str]
    annotator_ids: list[str]
    ratings: np.ndarray

    def __post_init__(self):
        self.ratings = np.asarray(self.ratings, dtype=np.float64)
        if self.ratings.shape != (len(self.annotator_ids), len(self.clip_ids)):
            raise DataError(
                f"ratings shape {self.ratings.shape} != "
                f"({len(self.annotator_ids)} annotators, {len(self.clip_ids)} clips)"
            )
        if np.isnan(self.ratings).any():
            raise DataError("every annotator must rate every clip")


@dataclass
class Sample:
    x: np.ndarray
    y: np.ndarray
    clip_id: str


@dataclass
class Labels:
    clip_ids: list[str]
    scores: np.ndarray
    is_risky: np.ndarray

    def as_dict(self) -> dict[str, bool]:
        return dict(zip(self.clip_ids, self.is_risky.tolist()))


# -- subsampling --------------------------------------------------------------


def subsample_indices(n: int, t: int) -> list[int]:
    """Evenly spaced indices ``round(j * (n-1) / (t-1))``, rounding half up.

    ``t == 1`` picks the middle frame ``n // 2``.
    """
    if t < 1:
        raise InputError(f"T must be >= 1, got {t}")
    if t > n:
        raise InputError(f"cannot pick {t} frames from a clip of {n}")
    if t == 1:
        return [n // 2]
    # floor(j*(n-1)/(t-1) + 1/2) in exact integer arithmetic
    return [(2 * j * (n - 1) + (t - 1)) // (2 * (t - 1)) for j in range(t)]


def subsample_uniform(frames, t: int):
    """Select ``t`` evenly spaced frames (or feature rows) from a sequence."""
    if isinstance(frames, Clip):
        frames = frames.frames
    idx = subsample_indices(len(frames), t)
    if isinstance(frames, np.ndarray):
        return frames[idx]
    return [frames[i] for i in idx]


# -- mask compositing ---------------------------------------------------------


def polygon_mask(polygon, height, width) -> np.ndarray:
    """Pixels whose centres fall inside ``polygon`` (even-odd rule)."""
    pts = np.asarray(polygon, dtype=np.float64)
    ys, xs = np.mgrid[0:height, 0:width]
    px = xs + 0.5
    py = ys + 0.5
    inside = np.zeros((height, width), dtype=bool)
    x0, y0 = pts[:, 0], pts[:, 1]
    x1, y1 = np.roll(x0, -1), np.roll(y0, -1)
    for ax, ay, bx, by in zip(x0, y0, x1, y1):
        if ay == by:
            continue
        crosses = (ay > py) != (by > py)
        xint = ax + (py - ay) * (bx - ax) / (by - ay)
        inside ^= crosses & (px < xint)
    return inside


def region_mask(record: SegmentationRecord, height, width) -> np.ndarray:
    if record.polygon:
        return polygon_mask(record.polygon, height, width)
    x, y, w, h = record.bbox
    mask = np.zeros((height, width), dtype=bool)
    mask[y : y + h, x : x + w] = True
    return mask


def overlay_masks(frame, records, palette=None, alpha=DEFAULT_ALPHA) -> np.ndarray:
    """Composite class-coloured regions over an 8-bit RGB frame.

    Each covered channel becomes ``round(alpha * colour + (1 - alpha) * pixel)``
    with halves rounded up. Records are drawn in descending confidence, each
    over the result of the previous ones.
    """
    palette = DEFAULT_PALETTE if palette is None else palette
    frame = np.asarray(frame)
    if frame.ndim != 3 or frame.shape[2] != 3:
        raise DimensionError(f"overlay expects an (H, W, 3) frame, got {frame.shape}")
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must lie in [0, 1], got {alpha}")
    h, w = frame.shape[:2]
    a = Fraction(alpha).limit_denominator(1 << 20)
    num, den = a.numerator, a.denominator
    out = frame.astype(np.int64)
    ordered = sorted(records, key=lambda r: -r.confidence)
    for rec in ordered:
        if rec.cls not in palette:
            raise ConfigError(f"no palette colour for class {rec.cls!r}")
        rec.validate(h, w)
        mask = region_mask(rec, h, w)
        colour = np.asarray(palette[rec.cls], dtype=np.int64)
        blend = num * colour + (den - num) * out[mask]
        out[mask] = (2 * blend + den) // (2 * den)
    return out.astype(np.uint8)


def overlay_clip(clip: Clip, records=None, palette=None, alpha=DEFAULT_ALPHA) -> np.ndarray:
    records = clip.records if records is None else records
    by_frame: dict[int, list] = {}
    for rec in records:
        if not 0 <= rec.frame < len(clip):
            raise DataError(f"clip {clip.id}: record frame {rec.frame} outside {len(clip)} frames")
        by_frame.setdefault(rec.frame, []).append(rec)
    out = clip.frames.copy()
    for idx, recs in by_frame.items():
        out[idx] = overlay_masks(clip.frames[idx], recs, palette, alpha)
    return out


# -- labels -------------------------------------------------------------------


def one_hot(is_risky: bool) -> np.ndarray:
    return np.array([0.0, 1.0]) if is_risky else np.array([1.0, 0.0])


def positive_count(n: int) -> int:
    return (RISK_QUANTILE_PERCENT * n) // 100


def build_labels(annotations: AnnotationSet) -> Labels:
    """Z-score each annotator, average per clip, flag the riskiest 5 percent.

    Ties at the threshold go to the smaller clip id.
    """
    r = annotations.ratings
    n_ann, n = r.shape
    if n_ann < 1 or n < 2:
        raise DataError(f"need >= 1 annotator and >= 2 clips, got {n_ann} x {n}")
    mean = r.mean(axis=1, keepdims=True)
    std = r.std(axis=1, keepdims=True)
    for a, s in zip(annotations.annotator_ids, std[:, 0]):
        if s == 0:
            raise DataError(f"annotator {a!r} gave identical ratings to every clip")
    scores = ((r - mean) / std).mean(axis=0)
    order = sorted(range(n), key=lambda j: (-scores[j], annotations.clip_ids[j]))
    risky = np.zeros(n, dtype=bool)
    risky[order[: positive_count(n)]] = True
    return Labels(list(annotations.clip_ids), scores, risky)


def read_annotations(path) -> AnnotationSet:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"clip_id", "annotator_id", "rating"} - set(reader.fieldnames or ())
        if missing:
            raise DataError(f"{path}: missing columns {sorted(missing)}")
        for row in reader:
            rows.append((row["clip_id"], row["annotator_id"], float(row["rating"])))
    clip_ids = sorted({r[0] for r in rows})
    ann_ids = sorted({r[1] for r in rows})
    ci = {c: i for i, c in enumerate(clip_ids)}
    ai = {a: i for i, a in enumerate(ann_ids)}
    ratings = np.full((len(ann_ids), len(clip_ids)), np.nan)
    for c, a, v in rows:
        ratings[ai[a], ci[c]] = v
    return AnnotationSet(clip_ids, ann_ids, ratings)


def write_annotations(path, annotations: AnnotationSet) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["clip_id", "annotator_id", "rating"])
        for j, c in enumerate(annotations.clip_ids):
            for i, a in enumerate(annotations.annotator_ids):
                writer.writerow([c, a, int(annotations.ratings[i, j])])


# -- features and frames ------------------------------------------------------


def load_features(path, clip_id=None) -> np.ndarray:
    """Load an ``[N x d]`` feature tensor.

    ``path`` is either the ``.tnsr`` file or a directory holding
    ``<clip_id>.tnsr``.
    """
    path = Path(path)
    if path.is_dir():
        path = path / f"{clip_id}.tnsr"
    arr = load_tensor(path)
    if arr.ndim != 2:
        raise FormatError(f"{path}: features must be rank 2, got rank {arr.ndim}", 6)
    return arr


def resize_bilinear(image, height, width) -> np.ndarray:
    """Bilinear resampling with half-pixel centres and edge clamping."""
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape[:2]
    if (h, w) == (height, width):
        return img.copy()

    def axis(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0, n_in - 1)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    y0, y1, fy = axis(h, height)
    x0, x1, fx = axis(w, width)
    fy = fy[:, None, None] if img.ndim == 3 else fy[:, None]
    fx = fx[None, :, None] if img.ndim == 3 else fx[None, :]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def prepare_frames(frames, resolution) -> np.ndarray:
    """Resize 8-bit frames to ``resolution`` and map channels to ``[-0.5, 0.5]``.

    Zero-centred inputs keep the wide sigmoid layer behind the linear conv
    trunk from saturating in the first few Adam steps.
    """
    if isinstance(resolution, int):
        resolution = (resolution, resolution)
    h, w = resolution
    return np.stack([resize_bilinear(f, h, w) / 255.0 - 0.5 for f in frames])


# -- on-disk datasets ---------------------------------------------------------


def frame_path(root, clip_id, index) -> Path:
    return Path(root) / "clips" / clip_id / f"frame_{index:06d}.png"


def read_masks(path) -> list[SegmentationRecord]:
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(SegmentationRecord.from_dict(json.loads(line)))
            except (KeyError, ValueError, TypeError) as exc:
                raise DataError(f"{path}:{lineno}: bad mask record ({exc})") from None
    return records


def write_masks(path, records) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(rec.to_json() + "\n")


def read_frames(directory) -> np.ndarray:
    files = sorted(Path(directory).glob("frame_*.png"))
    if not files:
        raise DataError(f"no frames in {directory}")
    return np.stack([np.asarray(Image.open(f).convert("RGB")) for f in files])


def write_frame(path, frame) -> None:
    Image.fromarray(np.asarray(frame, dtype=np.uint8), "RGB").save(path, optimize=False)


class Dataset:
    """Read-only view over a dataset directory."""

    def __init__(self, root, jobs=1):
        self.root = Path(root)
        if not (self.root / "clips").is_dir():
            raise InputError(f"{self.root} is not a dataset directory (no clips/)")
        self.jobs = max(1, int(jobs))
        self.clip_ids = sorted(p.name for p in (self.root / "clips").iterdir() if p.is_dir())
        if not self.clip_ids:
            raise DataError(f"{self.root}: no clips")
        self._labels = None
        self._frames: dict[str, np.ndarray] = {}

    def __len__(self):
        return len(self.clip_ids)

    @property
    def labels(self) -> Labels:
        if self._labels is None:
            ann = read_annotations(self.root / "annotations.csv")
            if ann.clip_ids != self.clip_ids:
                raise DataError("annotations.csv does not cover exactly the clips on disk")
            self._labels = build_labels(ann)
        return self._labels

    def frames(self, clip_id) -> np.ndarray:
        if clip_id not in self._frames:
            self._frames[clip_id] = read_frames(self.root / "clips" / clip_id)
        return self._frames[clip_id]

    def masks(self, clip_id) -> list[SegmentationRecord]:
        path = self.root / "masks" / f"{clip_id}.jsonl"
        if not path.exists():
            raise InputError(f"missing masks file {path}")
        return read_masks(path)

    def clip(self, clip_id) -> Clip:
        return Clip(clip_id, self.frames(clip_id))

    def features(self, clip_id) -> np.ndarray:
        return load_features(self.root / "features", clip_id)

    def feature_dim(self) -> int:
        return self.features(self.clip_ids[0]).shape[1]

    def ground_truth(self) -> dict[str, float]:
        out = {}
        with open(self.root / "ground_truth.csv", newline="") as fh:
            for row in csv.DictReader(fh):
                out[row["clip_id"]] = float(row["latent_risk"])
        return out

    def sample(self, clip_id, t, input_mode="raw", resolution=(32, 32), alpha=DEFAULT_ALPHA) -> Sample:
        risky = bool(self.labels.as_dict()[clip_id])
        if input_mode == "features":
            x = subsample_uniform(self.features(clip_id), t)
        else:
            frames = self.frames(clip_id)
            idx = subsample_indices(len(frames), t)
            if input_mode == "masked":
                chosen = set(idx)
                recs = [r for r in self.masks(clip_id) if r.frame in chosen]
                clip = Clip(clip_id, frames)
                frames = overlay_clip(clip, recs, alpha=alpha)
            elif input_mode != "raw":
                raise ConfigError(f"unknown input mode {input_mode!r}")
            x = prepare_frames(frames[idx], resolution)
        return Sample(np.ascontiguousarray(x), one_hot(risky), clip_id)

    def samples(self, t, input_mode="raw", resolution=(32, 32), alpha=DEFAULT_ALPHA, clip_ids=None):
        """Samples for ``clip_ids`` (default: all), merged in clip-id order."""
        ids = self.clip_ids if clip_ids is None else sorted(clip_ids)
        if self.jobs == 1:
            return [self.sample(c, t, input_mode, resolution, alpha) for c in ids]
        with ThreadPoolExecutor(self.jobs) as pool:
            return list(pool.map(lambda c: self.sample(c, t, input_mode, resolution, alpha), ids))


def ensure_dir(path) -> Path:
    path = Path(path)
    os.makedirs(path, exist_ok=True)
    return path
