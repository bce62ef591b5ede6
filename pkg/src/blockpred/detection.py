"""Object detection contract and bounding-box feature extraction.

Each frame becomes a fixed-length vector of normalized box corner
coordinates: detections are filtered to the relevant classes, sorted by
descending confidence (ties: larger area first, then smaller x1), their
[x1, y1, x2, y2] quadruples concatenated, truncated to the highest-confidence
boxes if over budget, and zero-padded to the configured length.

Coordinates are normalized to [0, 1] with the origin at the image's
bottom-left corner: (x1, y1) is the bottom-left corner of a box and (x2, y2)
the top-right. Adapters for top-left-origin detectors must flip y
(y -> 1 - y, swapping the pair so y1 <= y2 still holds).
"""

from __future__ import annotations

import hashlib
import json
import logging
import subprocess
import threading
from abc import ABC, abstractmethod
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .coredata import Sample, Scenario
from .enhancement import (
    EnhancementConfig,
    EnhancerBackend,
    ImageTensor,
    as_image_tensor,
    encode_png,
    enhance_with_config,
    load_image,
)
from .errors import (
    BackendError,
    ConfigError,
    FeatureExtractionError,
    ValidationError,
)

logger = logging.getLogger(__name__)

# COCO class ids for the moving blockers of interest:
# person, bicycle, car, motorcycle, bus, truck.
DEFAULT_RELEVANT_CLASSES = frozenset({0, 1, 2, 3, 5, 7})
DEFAULT_MIN_CONFIDENCE = 0.5
DEFAULT_FEATURE_LEN = 28


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box, normalized, bottom-left origin."""

    x1: float
    y1: float
    x2: float
    y2: float
    class_id: int
    confidence: float

    def __post_init__(self):
        if not (0.0 <= self.x1 <= self.x2 <= 1.0):
            raise ValidationError(f"need 0 <= x1 <= x2 <= 1, got x1={self.x1}, x2={self.x2}")
        if not (0.0 <= self.y1 <= self.y2 <= 1.0):
            raise ValidationError(f"need 0 <= y1 <= y2 <= 1, got y1={self.y1}, y2={self.y2}")
        if not (0.0 <= self.confidence <= 1.0):
            raise ValidationError(f"confidence must be in [0, 1], got {self.confidence}")

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def coords(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)


def flip_y(x1: float, y1_top: float, x2: float, y2_top: float) -> tuple[float, float, float, float]:
    """Convert a top-left-origin normalized box to bottom-left origin."""
    return (x1, 1.0 - y2_top, x2, 1.0 - y1_top)


@dataclass
class DetectionResult:
    boxes: list[BoundingBox]
    image_size: tuple[int, int]  # (W, H)


def _box_order_key(b: BoundingBox):
    return (-b.confidence, -b.area, b.x1)


class DetectorBackend(ABC):
    """Contract every detector plugs into.

    ``relevant_classes`` and ``min_confidence`` configure the filtering that
    detect() applies on top of the raw backend output. Backends that read
    ground truth rather than pixels set ``needs_pixels = False`` so the
    pipeline can skip image loading entirely.
    """

    relevant_classes: frozenset[int] = DEFAULT_RELEVANT_CLASSES
    min_confidence: float = DEFAULT_MIN_CONFIDENCE
    needs_pixels: bool = True

    @abstractmethod
    def raw_detect(self, img: ImageTensor | None, sample: Sample | None = None) -> DetectionResult:
        """Return unfiltered detections for one frame."""

    @abstractmethod
    def fingerprint(self) -> str:
        """Stable identity string folded into the feature-cache key."""


def detect(
    img: ImageTensor | None,
    backend: DetectorBackend,
    sample: Sample | None = None,
) -> DetectionResult:
    """Run the backend and keep relevant, confident boxes, confidence-sorted."""
    raw = backend.raw_detect(img, sample)
    kept = [
        b
        for b in raw.boxes
        if b.class_id in backend.relevant_classes and b.confidence >= backend.min_confidence
    ]
    kept.sort(key=_box_order_key)
    return DetectionResult(boxes=kept, image_size=raw.image_size)


@dataclass
class FeatureVector:
    """Length-Z vector of concatenated box coordinates, zero-padded."""

    values: np.ndarray
    n_active: int


def features_from_detections(det: DetectionResult, feature_len: int = DEFAULT_FEATURE_LEN) -> FeatureVector:
    """Concatenate, truncate to the highest-confidence boxes, and zero-pad.

    feature_len must be a positive multiple of 4 (four coordinates per box).
    """
    if feature_len < 4 or feature_len % 4 != 0:
        raise ConfigError(f"feature length must be a positive multiple of 4, got {feature_len}")
    max_boxes = feature_len // 4
    boxes = sorted(det.boxes, key=_box_order_key)[:max_boxes]
    values = np.zeros(feature_len, dtype=np.float64)
    for i, b in enumerate(boxes):
        values[4 * i : 4 * i + 4] = b.coords()
    return FeatureVector(values=values, n_active=4 * len(boxes))


def normalize_feature_len(requested: int) -> int:
    """Round a requested feature length down to a multiple of 4, warning if needed."""
    if requested < 4:
        raise ConfigError(f"feature length must be >= 4, got {requested}")
    if requested % 4 != 0:
        rounded = (requested // 4) * 4
        logger.warning(
            "feature length %d is not a multiple of 4 (4 coordinates per box); using %d",
            requested,
            rounded,
        )
        return rounded
    return requested


class GroundTruthDetector(DetectorBackend):
    """Oracle backend serving known per-frame boxes, keyed by (scenario_id, seq_index)."""

    needs_pixels = False

    def __init__(
        self,
        boxes_by_frame: Mapping[tuple[str, int], Sequence[BoundingBox]],
        image_size: tuple[int, int] = (0, 0),
        relevant_classes: frozenset[int] = DEFAULT_RELEVANT_CLASSES,
        min_confidence: float = DEFAULT_MIN_CONFIDENCE,
        tag: str = "oracle",
    ):
        self.boxes_by_frame = dict(boxes_by_frame)
        self.image_size = image_size
        self.relevant_classes = frozenset(relevant_classes)
        self.min_confidence = min_confidence
        self.tag = tag

    @classmethod
    def from_files(cls, paths: Sequence[str | Path], **kwargs) -> "GroundTruthDetector":
        """Load per-frame ground truth from ground_truth.jsonl side files."""
        boxes: dict[tuple[str, int], list[BoundingBox]] = {}
        image_size = (0, 0)
        for path in paths:
            for line in Path(path).read_text(encoding="utf-8").splitlines():
                if not line.strip():
                    continue
                rec = json.loads(line)
                key = (rec["scenario_id"], int(rec["seq_index"]))
                boxes[key] = [
                    BoundingBox(
                        x1=b["x1"], y1=b["y1"], x2=b["x2"], y2=b["y2"],
                        class_id=int(b["class_id"]), confidence=float(b["confidence"]),
                    )
                    for b in rec["boxes"]
                ]
                if "image_size" in rec:
                    image_size = tuple(rec["image_size"])
        tag = "oracle:" + ",".join(sorted(Path(p).name for p in paths))
        return cls(boxes, image_size=image_size, tag=tag, **kwargs)

    @classmethod
    def from_file(cls, path: str | Path, **kwargs) -> "GroundTruthDetector":
        return cls.from_files([path], **kwargs)

    def raw_detect(self, img, sample: Sample | None = None) -> DetectionResult:
        if sample is None:
            raise BackendError("ground-truth detector needs the frame identity")
        key = (sample.scenario_id, sample.seq_index)
        if key not in self.boxes_by_frame:
            raise BackendError(f"no ground truth for frame {key}")
        return DetectionResult(boxes=list(self.boxes_by_frame[key]), image_size=self.image_size)

    def fingerprint(self) -> str:
        return self.tag


class SubprocessDetector(DetectorBackend):
    """Detector spoken to over stdin/stdout.

    Protocol: ``argv + ["detect"]`` reads a PNG on stdin and writes a JSON
    array of {"x1","y1","x2","y2","class_id","confidence"} objects
    (normalized, bottom-left origin) to stdout.
    """

    def __init__(
        self,
        argv: list[str],
        timeout_s: float = 30.0,
        relevant_classes: frozenset[int] = DEFAULT_RELEVANT_CLASSES,
        min_confidence: float = DEFAULT_MIN_CONFIDENCE,
    ):
        self.argv = list(argv)
        self.timeout_s = timeout_s
        self.relevant_classes = frozenset(relevant_classes)
        self.min_confidence = min_confidence

    def raw_detect(self, img, sample: Sample | None = None) -> DetectionResult:
        arr = as_image_tensor(img)
        payload = _run_detector_subprocess(self.argv + ["detect"], encode_png(arr), self.timeout_s)
        boxes = _parse_backend_boxes(payload, source=self.argv[0])
        h, w = arr.shape[:2]
        return DetectionResult(boxes=boxes, image_size=(w, h))

    def fingerprint(self) -> str:
        return f"subprocess:{' '.join(self.argv)}"


class HTTPDetector(DetectorBackend):
    """Detector behind an HTTP endpoint: POST {url}/detect with a PNG body."""

    def __init__(
        self,
        url: str,
        timeout_s: float = 30.0,
        relevant_classes: frozenset[int] = DEFAULT_RELEVANT_CLASSES,
        min_confidence: float = DEFAULT_MIN_CONFIDENCE,
    ):
        import requests

        self._requests = requests
        self.url = url.rstrip("/")
        self.timeout_s = timeout_s
        self.relevant_classes = frozenset(relevant_classes)
        self.min_confidence = min_confidence

    def raw_detect(self, img, sample: Sample | None = None) -> DetectionResult:
        arr = as_image_tensor(img)
        try:
            resp = self._requests.post(
                f"{self.url}/detect",
                data=encode_png(arr),
                headers={"Content-Type": "image/png"},
                timeout=self.timeout_s,
            )
            resp.raise_for_status()
        except Exception as e:
            raise BackendError(f"detector call to {self.url} failed: {e}")
        boxes = _parse_backend_boxes(resp.content, source=self.url)
        h, w = arr.shape[:2]
        return DetectionResult(boxes=boxes, image_size=(w, h))

    def fingerprint(self) -> str:
        return f"http:{self.url}"


def _run_detector_subprocess(argv: list[str], stdin: bytes, timeout_s: float) -> bytes:
    try:
        proc = subprocess.run(argv, input=stdin, capture_output=True, timeout=timeout_s)
    except FileNotFoundError as e:
        raise BackendError(f"detector command not found: {e}")
    except subprocess.TimeoutExpired:
        raise BackendError(f"detector {argv[0]} timed out after {timeout_s}s")
    if proc.returncode != 0:
        tail = proc.stderr.decode("utf-8", "replace")[-400:]
        raise BackendError(f"detector {argv[0]} exited {proc.returncode}: {tail}")
    return proc.stdout


def _parse_backend_boxes(payload: bytes, source: str) -> list[BoundingBox]:
    try:
        raw = json.loads(payload.decode("utf-8"))
        if not isinstance(raw, list):
            raise ValueError("expected a JSON array")
        return [
            BoundingBox(
                x1=float(b["x1"]), y1=float(b["y1"]),
                x2=float(b["x2"]), y2=float(b["y2"]),
                class_id=int(b["class_id"]), confidence=float(b["confidence"]),
            )
            for b in raw
        ]
    except (ValueError, KeyError, TypeError, ValidationError) as e:
        raise BackendError(f"detector {source} returned malformed boxes: {e}")


class FeatureCache:
    """Per-frame feature memo, keyed by (scenario_id, seq_index, config hash).

    Thread-safe; concurrent writers of the same key are last-writer-wins,
    which is harmless because values for identical keys are identical.
    Persisted as JSON-lines with the vector stored in decimal text.
    """

    def __init__(self):
        self._store: dict[tuple[str, int, str], np.ndarray] = {}
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self._store)

    def get(self, key: tuple[str, int, str]) -> np.ndarray | None:
        with self._lock:
            return self._store.get(key)

    def put(self, key: tuple[str, int, str], values: np.ndarray) -> None:
        with self._lock:
            self._store[key] = np.asarray(values, dtype=np.float64)

    def load(self, path: str | Path) -> int:
        """Merge records from a cache file; returns the number loaded."""
        count = 0
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            rec = json.loads(line)
            key = (rec["scenario_id"], int(rec["seq_index"]), rec["config_hash"])
            self.put(key, np.array(rec["values"], dtype=np.float64))
            count += 1
        return count

    def save(self, path: str | Path) -> None:
        """Write all records, sorted by key so output is deterministic."""
        with self._lock:
            items = sorted(self._store.items())
        lines = [
            json.dumps(
                {
                    "scenario_id": sid,
                    "seq_index": idx,
                    "config_hash": h,
                    "values": [float(v) for v in vec],
                },
                separators=(",", ":"),
            )
            for (sid, idx, h), vec in items
        ]
        Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


class FramePipeline:
    """enhance -> detect -> features for single frames, memoized per frame.

    Scenarios must be registered before their sequences are featurized so
    that relative image references resolve and frames can be looked up by
    anchor position.
    """

    def __init__(
        self,
        detector: DetectorBackend,
        enhancement: EnhancementConfig | None = None,
        feature_len: int = DEFAULT_FEATURE_LEN,
        enhancer_backend: EnhancerBackend | None = None,
        cache: FeatureCache | None = None,
        image_loader: Callable[[Scenario, Sample], ImageTensor] | None = None,
    ):
        if feature_len < 4 or feature_len % 4 != 0:
            raise ConfigError(f"feature length must be a positive multiple of 4, got {feature_len}")
        self.detector = detector
        self.enhancement = enhancement or EnhancementConfig()
        self.feature_len = feature_len
        self.enhancer_backend = enhancer_backend
        self.cache = cache if cache is not None else FeatureCache()
        self._scenarios: dict[str, Scenario] = {}
        self._image_loader = image_loader or (
            lambda scenario, sample: load_image(scenario.resolve_image_path(sample))
        )

    @property
    def config_hash(self) -> str:
        spec = {
            "enhancement": self.enhancement.canonical_dict(),
            "enhancer": self.enhancer_backend.fingerprint() if self.enhancer_backend else None,
            "detector": self.detector.fingerprint(),
            "relevant_classes": sorted(self.detector.relevant_classes),
            "min_confidence": self.detector.min_confidence,
            "feature_len": self.feature_len,
        }
        blob = json.dumps(spec, sort_keys=True, separators=(",", ":")).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:16]

    def register(self, scenario: Scenario) -> None:
        self._scenarios[scenario.scenario_id] = scenario

    def scenario(self, scenario_id: str) -> Scenario:
        if scenario_id not in self._scenarios:
            raise ValidationError(f"scenario {scenario_id!r} not registered with the pipeline")
        return self._scenarios[scenario_id]

    def frame_features(self, scenario: Scenario, position: int) -> np.ndarray:
        """Feature vector for the frame at list position `position`."""
        sample = scenario.samples[position]
        key = (scenario.scenario_id, sample.seq_index, self.config_hash)
        cached = self.cache.get(key)
        if cached is not None:
            return cached
        try:
            img = None
            if self.detector.needs_pixels:
                img = self._image_loader(scenario, sample)
                img = enhance_with_config(img, self.enhancement, self.enhancer_backend)
            det = detect(img, self.detector, sample)
            values = features_from_detections(det, self.feature_len).values
        except Exception as e:
            raise FeatureExtractionError(scenario.scenario_id, sample.seq_index, e) from e
        self.cache.put(key, values)
        return values

    def sequence_features(self, seq) -> np.ndarray:
        """(r, Z) feature matrix for one observation window, oldest frame first."""
        scenario = self.scenario(seq.scenario_id)
        r = len(seq.observation)
        start = seq.anchor_index - r + 1
        rows = [self.frame_features(scenario, start + i) for i in range(r)]
        return np.stack(rows, axis=0)


def assemble_sequence_features(seq, pipeline: FramePipeline) -> np.ndarray:
    """Feature matrix for a SequenceSample via the given frame pipeline."""
    return pipeline.sequence_features(seq)
