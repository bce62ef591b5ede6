"""Synthetic street-scene simulator with exact blockage ground truth.

Rectangular objects spawn as a Poisson process, traverse the frame on linear
horizontal trajectories, and block the link whenever their box overlaps a
configured line-of-sight corridor region. Every frame therefore has a
closed-form label, a known box list for oracle detection, and a renderable
image, which makes the whole pipeline testable without any real recordings.

Determinism: all randomness derives from the config seed via independent
spawn-keyed streams (one for the arrival process, one per object, one per
frame for pixel noise, one per frame for detection noise), so simulation,
rendering, and noisy detection are reproducible and safe to parallelize.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .coredata import LinkStatus, Sample, Scenario, TimeOfDay, write_manifest
from .detection import (
    BoundingBox,
    DEFAULT_MIN_CONFIDENCE,
    DEFAULT_RELEVANT_CLASSES,
    DetectionResult,
    DetectorBackend,
    GroundTruthDetector,
)
from .enhancement import save_image
from .errors import ConfigError

# spawn_key prefixes for the independent RNG streams
_ARRIVALS, _OBJECTS, _PIXEL_NOISE, _DETECT_NOISE = 0, 1, 2, 3

_SIM_CLASSES = (0, 1, 2, 3, 5, 7)

BACKGROUND_LEVEL = 0.75


@dataclass(frozen=True)
class SceneConfig:
    image_size: tuple[int, int] = (64, 48)  # (W, H) pixels
    los_corridor: tuple[float, float, float, float] = (0.45, 0.20, 0.55, 0.80)
    object_rate: float = 0.2  # expected spawns per second
    speed_range: tuple[float, float] = (0.06, 0.18)  # normalized units / s
    size_range: tuple[float, float] = (0.08, 0.22)  # box width/height bounds
    night_fraction: float = 0.0
    duration_s: float = 60.0
    sample_rate_hz: float = 10.0
    seed: int = 0
    scenario_id: str = "synth"
    night_luma_scale: float = 0.12
    noise_std: float = 0.0

    def __post_init__(self):
        x1, y1, x2, y2 = self.los_corridor
        if not (0 <= x1 < x2 <= 1 and 0 <= y1 < y2 <= 1):
            raise ConfigError(f"los_corridor must be a region inside [0,1]^2, got {self.los_corridor}")
        if self.image_size[0] < 4 or self.image_size[1] < 4:
            raise ConfigError(f"image_size too small: {self.image_size}")
        if self.object_rate < 0:
            raise ConfigError(f"object_rate must be >= 0, got {self.object_rate}")
        for name, rng_ in (("speed_range", self.speed_range), ("size_range", self.size_range)):
            if not (0 < rng_[0] <= rng_[1]):
                raise ConfigError(f"{name} must satisfy 0 < low <= high, got {rng_}")
        if self.size_range[1] >= 1.0:
            raise ConfigError("size_range upper bound must be < 1")
        if not 0 <= self.night_fraction <= 1:
            raise ConfigError(f"night_fraction must be in [0, 1], got {self.night_fraction}")
        if self.duration_s <= 0 or self.sample_rate_hz <= 0:
            raise ConfigError("duration_s and sample_rate_hz must be > 0")
        if self.noise_std < 0:
            raise ConfigError(f"noise_std must be >= 0, got {self.noise_std}")


@dataclass(frozen=True)
class MovingObject:
    """Constant-velocity rectangle; x1 is the left box edge at time t."""

    spawn_time: float
    y0: float  # bottom edge, constant
    width: float
    height: float
    speed: float  # magnitude, normalized units / s
    direction: int  # +1 rightward, -1 leftward
    class_id: int
    color: tuple[float, float, float]

    def x1_at(self, t: float) -> float:
        dt = t - self.spawn_time
        if self.direction > 0:
            return -self.width + self.speed * dt
        return 1.0 - self.speed * dt

    def box_at(self, t: float) -> tuple[float, float, float, float] | None:
        """Unclipped box (x1, y1, x2, y2) while any part is on-frame, else None."""
        if t < self.spawn_time:
            return None
        x1 = self.x1_at(t)
        x2 = x1 + self.width
        if x2 <= 0.0 or x1 >= 1.0:
            return None
        return (x1, self.y0, x2, self.y0 + self.height)


def _stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=key))


def _spawn_objects(cfg: SceneConfig) -> list[MovingObject]:
    # Arrivals start one full crossing before t=0 so occupancy is already in
    # steady state when the recording begins.
    warmup = (1.0 + cfg.size_range[1]) / cfg.speed_range[0]
    span = warmup + cfg.duration_s
    arrivals_rng = _stream(cfg.seed, _ARRIVALS)
    count = int(arrivals_rng.poisson(cfg.object_rate * span))
    spawn_times = np.sort(arrivals_rng.uniform(-warmup, cfg.duration_s, size=count))
    objects = []
    for i, t0 in enumerate(spawn_times):
        rng = _stream(cfg.seed, _OBJECTS, i)
        width = rng.uniform(*cfg.size_range)
        height = rng.uniform(*cfg.size_range)
        objects.append(
            MovingObject(
                spawn_time=float(t0),
                y0=float(rng.uniform(0.0, 1.0 - height)),
                width=float(width),
                height=float(height),
                speed=float(rng.uniform(*cfg.speed_range)),
                direction=1 if rng.random() < 0.5 else -1,
                class_id=int(rng.choice(_SIM_CLASSES)),
                color=tuple(rng.uniform(0.2, 0.95, size=3)),
            )
        )
    return objects


def _boxes_intersect(a: tuple[float, float, float, float], b: tuple[float, float, float, float]) -> bool:
    return a[0] < b[2] and a[2] > b[0] and a[1] < b[3] and a[3] > b[1]


@dataclass
class SimScenario:
    """A rendered-on-demand scenario plus its exact ground truth."""

    scenario: Scenario
    config: SceneConfig
    objects: list[MovingObject]
    frame_boxes: list[list[BoundingBox]]  # clipped to the frame, confidence 1.0
    occlusion: list[int]  # b[t] per frame

    @property
    def n_frames(self) -> int:
        return len(self.scenario.samples)

    def frame_time(self, index: int) -> float:
        return index / self.config.sample_rate_hz

    def is_night(self, index: int) -> bool:
        return index >= self.n_frames * (1.0 - self.config.night_fraction)

    def frame_image(self, index: int) -> np.ndarray:
        """Render frame `index`: flat-shaded rectangles, night scaling, noise."""
        if not 0 <= index < self.n_frames:
            raise IndexError(f"frame {index} out of range [0, {self.n_frames})")
        w, h = self.config.image_size
        img = np.full((h, w, 3), BACKGROUND_LEVEL, dtype=np.float64)
        t = self.frame_time(index)
        for obj in self.objects:
            box = obj.box_at(t)
            if box is None:
                continue
            x1, y1, x2, y2 = box
            c0 = max(0, int(round(x1 * w)))
            c1 = min(w, int(round(x2 * w)))
            r0 = max(0, int(round((1.0 - y2) * h)))
            r1 = min(h, int(round((1.0 - y1) * h)))
            if c1 > c0 and r1 > r0:
                img[r0:r1, c0:c1] = obj.color
        if self.is_night(index):
            img *= self.config.night_luma_scale
        if self.config.noise_std > 0:
            rng = _stream(self.config.seed, _PIXEL_NOISE, index)
            img += rng.normal(0.0, self.config.noise_std, size=img.shape)
        return np.clip(img, 0.0, 1.0)


def _frame_ground_truth(
    cfg: SceneConfig, objects: Sequence[MovingObject], t: float
) -> tuple[list[BoundingBox], int]:
    boxes = []
    blocked = 0
    for obj in objects:
        box = obj.box_at(t)
        if box is None:
            continue
        if _boxes_intersect(box, cfg.los_corridor):
            blocked = 1
        x1, y1, x2, y2 = box
        boxes.append(
            BoundingBox(
                x1=max(0.0, x1),
                y1=max(0.0, y1),
                x2=min(1.0, x2),
                y2=min(1.0, y2),
                class_id=obj.class_id,
                confidence=1.0,
            )
        )
    return boxes, blocked


def simulate_objects(cfg: SceneConfig, objects: Sequence[MovingObject]) -> SimScenario:
    """Build a SimScenario from explicitly given objects (no random spawning)."""
    n_frames = int(round(cfg.duration_s * cfg.sample_rate_hz))
    frame_boxes = []
    occlusion = []
    samples = []
    for i in range(n_frames):
        t = i / cfg.sample_rate_hz
        boxes, blocked = _frame_ground_truth(cfg, objects, t)
        frame_boxes.append(boxes)
        occlusion.append(blocked)
        samples.append(
            Sample(
                scenario_id=cfg.scenario_id,
                seq_index=i,
                timestamp=t,
                image_ref=f"frames/frame_{i:05d}.png",
                link_status=LinkStatus(blocked),
            )
        )
    if cfg.night_fraction == 0:
        tod = TimeOfDay.DAY
    elif cfg.night_fraction == 1:
        tod = TimeOfDay.NIGHT
    else:
        tod = TimeOfDay.MIXED
    scenario = Scenario(
        scenario_id=cfg.scenario_id,
        samples=samples,
        sample_rate_hz=cfg.sample_rate_hz,
        time_of_day=tod,
    )
    return SimScenario(
        scenario=scenario,
        config=cfg,
        objects=list(objects),
        frame_boxes=frame_boxes,
        occlusion=occlusion,
    )


def simulate(cfg: SceneConfig) -> SimScenario:
    """Generate a full synthetic scenario under the config seed."""
    return simulate_objects(cfg, _spawn_objects(cfg))


def oracle_detect(sim: SimScenario, frame: int) -> DetectionResult:
    """Exact ground-truth boxes for one frame, confidence 1.0."""
    if not 0 <= frame < sim.n_frames:
        raise IndexError(f"frame {frame} out of range [0, {sim.n_frames})")
    return DetectionResult(boxes=list(sim.frame_boxes[frame]), image_size=sim.config.image_size)


@dataclass(frozen=True)
class NoiseConfig:
    jitter_std: float = 0.0
    miss_prob: float = 0.0
    false_positive_rate: float = 0.0  # expected spurious boxes per frame

    def __post_init__(self):
        if self.jitter_std < 0 or not 0 <= self.miss_prob <= 1 or self.false_positive_rate < 0:
            raise ConfigError(f"invalid noise config: {self}")

    def canonical_dict(self) -> dict:
        return {
            "jitter_std": self.jitter_std,
            "miss_prob": self.miss_prob,
            "false_positive_rate": self.false_positive_rate,
        }


def _perturb_detections(
    det: DetectionResult, noise: NoiseConfig, rng: np.random.Generator
) -> DetectionResult:
    out = []
    for b in det.boxes:
        if noise.miss_prob > 0 and rng.random() < noise.miss_prob:
            continue
        if noise.jitter_std > 0:
            jit = rng.normal(0.0, noise.jitter_std, size=4)
            x1, x2 = sorted(np.clip([b.x1 + jit[0], b.x2 + jit[2]], 0.0, 1.0))
            y1, y2 = sorted(np.clip([b.y1 + jit[1], b.y2 + jit[3]], 0.0, 1.0))
            conf = float(np.clip(1.0 - abs(rng.normal(0.0, noise.jitter_std)), 0.0, 1.0))
            out.append(
                BoundingBox(x1=float(x1), y1=float(y1), x2=float(x2), y2=float(y2),
                            class_id=b.class_id, confidence=conf)
            )
        else:
            out.append(b)
    if noise.false_positive_rate > 0:
        for _ in range(int(rng.poisson(noise.false_positive_rate))):
            cx, cy = rng.uniform(0.0, 1.0, size=2)
            fw, fh = rng.uniform(0.02, 0.10, size=2)
            out.append(
                BoundingBox(
                    x1=float(max(0.0, cx - fw / 2)),
                    y1=float(max(0.0, cy - fh / 2)),
                    x2=float(min(1.0, cx + fw / 2)),
                    y2=float(min(1.0, cy + fh / 2)),
                    class_id=int(rng.choice(_SIM_CLASSES)),
                    confidence=float(rng.uniform(0.5, 0.9)),
                )
            )
    return DetectionResult(boxes=out, image_size=det.image_size)


def noisy_detect(sim: SimScenario, frame: int, noise: NoiseConfig, seed: int) -> DetectionResult:
    """Oracle boxes with seeded jitter, misses, and false positives."""
    det = oracle_detect(sim, frame)
    return _perturb_detections(det, noise, _stream(seed, _DETECT_NOISE, frame))


def oracle_backend(
    sim: SimScenario,
    relevant_classes: frozenset[int] = DEFAULT_RELEVANT_CLASSES,
    min_confidence: float = DEFAULT_MIN_CONFIDENCE,
) -> GroundTruthDetector:
    """Detector backend serving this simulation's exact ground truth."""
    boxes = {
        (sim.scenario.scenario_id, i): sim.frame_boxes[i] for i in range(sim.n_frames)
    }
    return GroundTruthDetector(
        boxes,
        image_size=sim.config.image_size,
        relevant_classes=relevant_classes,
        min_confidence=min_confidence,
        tag=f"oracle:sim:{sim.config.seed}",
    )


class NoisyDetector(DetectorBackend):
    """Wraps another backend and perturbs its output, seeded per frame."""

    def __init__(self, base: DetectorBackend, noise: NoiseConfig, seed: int):
        self.base = base
        self.noise = noise
        self.seed = seed
        self.needs_pixels = base.needs_pixels
        self.relevant_classes = base.relevant_classes
        self.min_confidence = base.min_confidence

    def raw_detect(self, img, sample=None) -> DetectionResult:
        det = self.base.raw_detect(img, sample)
        if sample is None:
            raise ConfigError("noisy detector needs the frame identity for seeding")
        rng = _stream(self.seed, _DETECT_NOISE, sample.seq_index)
        return _perturb_detections(det, self.noise, rng)

    def fingerprint(self) -> str:
        return (
            f"noisy(seed={self.seed},"
            f"{json.dumps(self.noise.canonical_dict(), sort_keys=True)}):"
            f"{self.base.fingerprint()}"
        )


def ground_truth_lines(sim: SimScenario) -> list[str]:
    """ground_truth.jsonl records: per-frame boxes and the occlusion flag."""
    lines = []
    for i in range(sim.n_frames):
        lines.append(
            json.dumps(
                {
                    "scenario_id": sim.scenario.scenario_id,
                    "seq_index": i,
                    "blocked": sim.occlusion[i],
                    "image_size": list(sim.config.image_size),
                    "boxes": [
                        {
                            "x1": b.x1, "y1": b.y1, "x2": b.x2, "y2": b.y2,
                            "class_id": b.class_id, "confidence": b.confidence,
                        }
                        for b in sim.frame_boxes[i]
                    ],
                },
                separators=(",", ":"),
            )
        )
    return lines


def write_scenario(sim: SimScenario, out_dir: str | Path, *, write_frames: bool = True) -> Path:
    """Materialize a simulation: manifest.csv, ground_truth.jsonl, frames/*.png.

    Returns the manifest path. The emitted scenario loads back through the
    standard manifest reader.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if write_frames:
        frames_dir = out_dir / "frames"
        frames_dir.mkdir(exist_ok=True)
        for i in range(sim.n_frames):
            save_image(sim.frame_image(i), frames_dir / f"frame_{i:05d}.png")
    (out_dir / "ground_truth.jsonl").write_text(
        "\n".join(ground_truth_lines(sim)) + "\n", encoding="utf-8"
    )
    manifest_path = out_dir / "manifest.csv"
    write_manifest(sim.scenario, manifest_path)
    return manifest_path
