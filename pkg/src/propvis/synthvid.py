"""Deterministic moving-shape videos with instance ground truth.

Shapes are rasterised at 4x supersampling over a fixed noise background and
composited back to front, so an occluded pixel belongs to the nearer shape.
Ground truth lives on the mask grid (``image_size / patch`` cells per side);
a cell belongs to the instance covering at least half of it.

On disk a clip is a directory of ``frame_XXX.ppm`` images plus ``gt.json``
with run-length encoded masks.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import ConfigError

KINDS = ("disc", "square", "triangle")
SUPERSAMPLE = 4


@dataclass(frozen=True)
class ShapeSpec:
    kind: str
    size: float  # diameter / side as a fraction of the frame
    start: tuple[float, float]
    velocity: tuple[float, float]  # per frame
    color: tuple[float, float, float]
    depth: int  # larger is nearer the camera
    wobble: tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)  # ax, ay, angular freq, phase

    @property
    def class_id(self) -> int:
        return KINDS.index(self.kind)

    def centre(self, t: float) -> tuple[float, float]:
        ax, ay, freq, phase = self.wobble
        s = np.sin(freq * t + phase)
        return (
            self.start[0] + self.velocity[0] * t + ax * s,
            self.start[1] + self.velocity[1] * t + ay * s,
        )

    def coverage(self, t: float, size_px: int) -> np.ndarray:
        """Fraction of each pixel covered, from a regular sub-pixel grid."""
        n = size_px * SUPERSAMPLE
        u = (np.arange(n) + 0.5) / n
        y, x = np.meshgrid(u, u, indexing="ij")
        cx, cy = self.centre(t)
        half = self.size / 2.0
        if self.kind == "disc":
            inside = (x - cx) ** 2 + (y - cy) ** 2 <= half**2
        elif self.kind == "square":
            inside = (np.abs(x - cx) <= half) & (np.abs(y - cy) <= half)
        else:
            top = cy - half
            inside = (y >= top) & (y <= cy + half) & (np.abs(x - cx) <= (y - top) / 2.0)
        return inside.reshape(size_px, SUPERSAMPLE, size_px, SUPERSAMPLE).mean(axis=(1, 3))


@dataclass
class FrameGT:
    instances: list[tuple[int, int, np.ndarray]] = field(default_factory=list)  # (id, class, mask)

    @property
    def ids(self) -> list[int]:
        return [i for i, _, _ in self.instances]

    def instance(self, iid: int) -> tuple[int, np.ndarray]:
        for i, cls, mask in self.instances:
            if i == iid:
                return cls, mask
        raise KeyError(iid)


ClipGroundTruth = list[FrameGT]


@dataclass(frozen=True)
class ClipConfig:
    image_size: int = 32
    patch: int = 4
    num_frames: int = 4
    num_instances: int = 3
    max_instances: int = 8
    background: float = 0.08

    def __post_init__(self):
        if self.image_size % self.patch:
            raise ConfigError(f"image size {self.image_size} is not divisible by patch {self.patch}")
        if not 1 <= self.num_instances <= self.max_instances:
            raise ConfigError(f"{self.num_instances} instances do not fit in {self.max_instances} queries")
        if self.num_frames < 1:
            raise ConfigError("a clip needs at least one frame")

    @property
    def mask_size(self) -> int:
        return self.image_size // self.patch


def _quantise(x: np.ndarray) -> np.ndarray:
    return np.round(np.clip(x, 0.0, 1.0) * 255.0) / 255.0


def _random_color(rng: np.random.Generator) -> tuple[float, float, float]:
    return tuple(float(v) for v in rng.uniform(0.55, 1.0, size=3) * rng.permutation([1.0, 0.7, 0.25]))


def render(shapes: Sequence[ShapeSpec], cfg: ClipConfig, seed: int) -> tuple[list[np.ndarray], ClipGroundTruth]:
    """Rasterise shapes into frames and mask-grid ground truth; instance ids are 1-based list positions."""
    rng = np.random.default_rng([seed, 7])
    s = cfg.image_size
    bg = 0.35 + cfg.background * rng.standard_normal((3, s, s))
    order = sorted(range(len(shapes)), key=lambda i: shapes[i].depth)
    frames: list[np.ndarray] = []
    gt: ClipGroundTruth = []
    m, p = cfg.mask_size, cfg.patch
    for t in range(cfg.num_frames):
        img = bg.copy()
        labels = np.full((s, s), -1)
        for i in order:
            covered = shapes[i].coverage(t, s) >= 0.5
            labels[covered] = i
            img[:, covered] = np.asarray(shapes[i].color)[:, None]
        frames.append(_quantise(img))
        blocks = labels.reshape(m, p, m, p).transpose(0, 2, 1, 3).reshape(m, m, p * p)
        counts = np.stack([(blocks == i).sum(axis=2) for i in range(len(shapes))])
        depth = np.array([shapes[i].depth for i in range(len(shapes))])
        # ties go to the nearer shape
        score = counts * (len(shapes) + 1) + np.argsort(np.argsort(depth))[:, None, None]
        owner = np.argmax(score, axis=0)
        owned = np.take_along_axis(counts, owner[None], axis=0)[0] * 2 >= p * p
        frame_gt = FrameGT()
        for i, shape in enumerate(shapes):
            mask = owned & (owner == i)
            if mask.any():
                frame_gt.instances.append((i + 1, shape.class_id, mask))
        gt.append(frame_gt)
    return frames, gt


def generate_clip(cfg: ClipConfig, seed: int) -> tuple[list[np.ndarray], ClipGroundTruth]:
    """Randomly placed shapes drifting in random directions."""
    rng = np.random.default_rng([seed, 1])
    shapes = []
    for depth in range(cfg.num_instances):
        shapes.append(
            ShapeSpec(
                kind=KINDS[rng.integers(len(KINDS))],
                size=float(rng.uniform(0.26, 0.4)),
                start=tuple(rng.uniform(0.2, 0.8, size=2)),
                velocity=tuple(rng.uniform(-0.1, 0.1, size=2)),
                color=_random_color(rng),
                depth=depth,
            )
        )
    return render(shapes, cfg, seed)


def _easy(cfg: ClipConfig, rng: np.random.Generator) -> list[ShapeSpec]:
    n = cfg.num_instances
    lane = 1.0 / n
    shapes = []
    for i in range(n):
        size = float(rng.uniform(0.6, 0.8) * lane)
        y0 = float(rng.uniform(0.3, 0.7))
        vy = float(rng.uniform(-0.05, 0.05))
        shapes.append(
            ShapeSpec(KINDS[rng.integers(3)], size, ((i + 0.5) * lane, y0), (0.0, vy), _random_color(rng), i)
        )
    return shapes


def _crossing(cfg: ClipConfig, rng: np.random.Generator) -> list[ShapeSpec]:
    if cfg.num_frames < 2:
        raise ConfigError("the crossing scenario needs at least two frames")
    span = max(cfg.num_frames - 1, 1)
    y = float(rng.uniform(0.4, 0.6))
    x0, x1 = float(rng.uniform(0.12, 0.2)), float(rng.uniform(0.8, 0.88))
    kind = KINDS[rng.integers(3)]
    flip = rng.random() < 0.5
    a = ShapeSpec(kind, float(rng.uniform(0.3, 0.36)), (x0, y), ((x1 - x0) / span, 0.0), _random_color(rng), 1)
    b = ShapeSpec(
        KINDS[rng.integers(3)] if rng.random() < 0.5 else kind,
        float(rng.uniform(0.3, 0.36)),
        (x1, y + float(rng.uniform(-0.04, 0.04))),
        ((x0 - x1) / span, 0.0),
        _random_color(rng),
        0 if flip else 2,
    )
    shapes = [a, b]
    for i in range(2, cfg.num_instances):
        band = 0.16 if i % 2 == 0 else 0.84
        shapes.append(
            ShapeSpec(
                KINDS[rng.integers(3)],
                float(rng.uniform(0.22, 0.28)),
                (float(rng.uniform(0.2, 0.8)), band),
                (float(rng.uniform(-0.05, 0.05)), 0.0),
                _random_color(rng),
                3 + i,
            )
        )
    return shapes


def _exit_reentry(cfg: ClipConfig, rng: np.random.Generator) -> list[ShapeSpec]:
    if cfg.num_frames < 3:
        raise ConfigError("the exit_reentry scenario needs at least three frames")
    span = cfg.num_frames - 1
    freq = np.pi / span
    peak = max(np.sin(freq * t) for t in range(cfg.num_frames))
    leaver = ShapeSpec(
        KINDS[rng.integers(3)],
        float(rng.uniform(0.26, 0.3)),
        (0.5, float(rng.uniform(0.35, 0.65))),
        (0.0, 0.0),
        _random_color(rng),
        0,
        wobble=(0.72 / peak, 0.0, freq, 0.0),
    )
    shapes = [leaver]
    for i in range(1, cfg.num_instances):
        band = 0.15 if i % 2 else 0.85
        shapes.append(
            ShapeSpec(
                KINDS[rng.integers(3)],
                float(rng.uniform(0.22, 0.26)),
                (float(rng.uniform(0.2, 0.6)), band),
                (float(rng.uniform(-0.04, 0.04)), 0.0),
                _random_color(rng),
                i,
            )
        )
    return shapes


SCENARIOS = {"easy": _easy, "crossing": _crossing, "exit_reentry": _exit_reentry}


def scenario(name: str, seed: int, cfg: ClipConfig | None = None) -> tuple[list[np.ndarray], ClipGroundTruth]:
    """Curated clip: ``easy`` (disjoint lanes), ``crossing`` (mutual occlusion), ``exit_reentry``."""
    if name not in SCENARIOS:
        raise ConfigError(f"unknown scenario {name!r}; choose from {sorted(SCENARIOS)}")
    cfg = cfg or ClipConfig()
    rng = np.random.default_rng([seed, 2, list(SCENARIOS).index(name)])
    return render(SCENARIOS[name](cfg, rng), cfg, seed)


def scenario_shapes(name: str, seed: int, cfg: ClipConfig | None = None) -> list[ShapeSpec]:
    cfg = cfg or ClipConfig()
    rng = np.random.default_rng([seed, 2, list(SCENARIOS).index(name)])
    return SCENARIOS[name](cfg, rng)


# ---------------------------------------------------------------- storage


def rle_encode(mask: np.ndarray) -> dict:
    """Row-major run lengths, starting with a (possibly empty) run of zeros."""
    flat = np.asarray(mask, dtype=bool).reshape(-1)
    change = np.flatnonzero(np.diff(flat.astype(np.int8))) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    counts = np.diff(bounds).tolist()
    if flat.size and flat[0]:
        counts = [0] + counts
    return {"shape": list(mask.shape), "counts": counts}


def rle_decode(rle: dict) -> np.ndarray:
    values = np.zeros(len(rle["counts"]), dtype=bool)
    values[1::2] = True
    flat = np.repeat(values, rle["counts"])
    return flat.reshape(rle["shape"])


def write_ppm(path: Path, image: np.ndarray) -> None:
    """``[3, H, W]`` floats in [0, 1] -> binary PPM (P6, 8 bit)."""
    _, h, w = image.shape
    pixels = np.round(np.clip(image, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + pixels.tobytes())


def read_ppm(path: Path) -> np.ndarray:
    buf = Path(path).read_bytes()
    fields_, pos = [], 0
    while len(fields_) < 4:
        while buf[pos : pos + 1].isspace():
            pos += 1
        if buf[pos : pos + 1] == b"#":
            pos = buf.index(b"\n", pos) + 1
            continue
        end = pos
        while not buf[end : end + 1].isspace():
            end += 1
        fields_.append(buf[pos:end])
        pos = end
    if fields_[0] != b"P6" or fields_[3] != b"255":
        raise ValueError(f"{path}: only 8-bit binary PPM is supported")
    w, h = int(fields_[1]), int(fields_[2])
    pixels = np.frombuffer(buf, dtype=np.uint8, count=w * h * 3, offset=pos + 1)
    return pixels.reshape(h, w, 3).transpose(2, 0, 1) / 255.0


def gt_to_json(gt: ClipGroundTruth) -> dict:
    return {
        "frames": [
            {"instances": [{"id": int(i), "class": int(c), "mask": rle_encode(m)} for i, c, m in f.instances]}
            for f in gt
        ]
    }


def gt_from_json(doc: dict) -> ClipGroundTruth:
    return [
        FrameGT([(d["id"], d["class"], rle_decode(d["mask"])) for d in frame["instances"]]) for frame in doc["frames"]
    ]


def write_clip(path: str | Path, frames: Sequence[np.ndarray], gt: ClipGroundTruth) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for t, frame in enumerate(frames):
        write_ppm(path / f"frame_{t:03d}.ppm", frame)
    (path / "gt.json").write_text(json.dumps(gt_to_json(gt), sort_keys=True, separators=(",", ":")) + "\n")


def iter_frames(path: str | Path):
    """Yield frames of a stored clip one at a time."""
    for f in sorted(Path(path).glob("frame_*.ppm")):
        yield read_ppm(f)


def read_clip(path: str | Path) -> tuple[list[np.ndarray], ClipGroundTruth]:
    path = Path(path)
    frames = list(iter_frames(path))
    gt_file = path / "gt.json"
    gt = gt_from_json(json.loads(gt_file.read_text())) if gt_file.exists() else []
    return frames, gt
