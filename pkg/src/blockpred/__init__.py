"""Vision-aided mmWave LOS blockage prediction pipeline.

Builds labeled observation/future-window datasets from camera+wireless
scenario recordings, turns frames into padded bounding-box feature sequences
through a pluggable object detector, trains a two-layer gated recurrent
classifier, and reports top-1 accuracy / F1 / confusion matrices across
future-window sweeps. A synthetic scene simulator with exact ground truth
makes every stage testable without real recordings.
"""

from .coredata import (
    LinkStatus,
    Sample,
    Scenario,
    ScenarioStats,
    TimeOfDay,
    load_manifest,
    scenario_stats,
    write_manifest,
)
from .detection import (
    BoundingBox,
    DetectionResult,
    DetectorBackend,
    FeatureCache,
    FeatureVector,
    FramePipeline,
    GroundTruthDetector,
    detect,
    features_from_detections,
)
from .enhancement import (
    EnhancementConfig,
    EnhancerBackend,
    enhance,
    enhance_external,
    estimate_brightness,
)
from .evaluation import (
    ConfusionMatrix,
    MetricsReport,
    confusion,
    evaluate_sweep,
    f1,
    precision,
    recall,
    top1_accuracy,
)
from .predictor import (
    Checkpoint,
    ModelConfig,
    RecurrentClassifier,
    TrainConfig,
    forward_probs,
    predict,
    train,
)
from .synthsim import (
    NoiseConfig,
    SceneConfig,
    SimScenario,
    noisy_detect,
    oracle_detect,
    simulate,
    write_scenario,
)
from .windowing import (
    DatasetSplit,
    SequenceSample,
    WindowConfig,
    balance,
    build_windows,
    future_label,
    split,
    sweep_datasets,
)

__version__ = "0.1.0"
