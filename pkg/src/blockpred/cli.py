"""Pipeline orchestration: simulate, build-dataset, extract-features, train,
evaluate, and sweep, driven by a single JSON config file with flag overrides.

Stage artifacts are plain files so stages can be re-run and inspected
independently:

    <out>/run_config.json      resolved config written by every command
    <out>/listing_r<k>.jsonl   dataset listing per future window
    <out>/dataset_summary.json sequence counts per scenario and future window
    <cache>/features_<hash>.jsonl   per-frame feature cache
    <out>/model_r<k>.npz       checkpoint per future window
    <out>/train_log_r<k>.csv   per-epoch training log
    <out>/report.json, *.png   metrics and plots

Exit codes: 0 success, 2 config/input error, 3 missing prerequisite,
4 backend failure.
"""

from __future__ import annotations

import copy
import functools
import json
import logging
import os
import re
from contextlib import contextmanager
from pathlib import Path

import click
import numpy as np

from . import windowing
from .coredata import Scenario, load_manifest
from .detection import (
    FeatureCache,
    FramePipeline,
    GroundTruthDetector,
    HTTPDetector,
    SubprocessDetector,
    normalize_feature_len,
)
from .enhancement import EnhancementConfig, HTTPEnhancer, SubprocessEnhancer
from .errors import BackendError, BlockpredError, ConfigError, FeatureExtractionError
from .evaluation import evaluate_sweep
from .predictor import Checkpoint, ModelConfig, TrainConfig, train as train_model, write_train_log
from .synthsim import NoiseConfig, NoisyDetector, SceneConfig, simulate, write_scenario
from .windowing import WindowConfig, listing_sha256, read_listing, split_from_listing

logger = logging.getLogger(__name__)

ENV_CACHE_DIR = "BLOCKPRED_CACHE_DIR"
ENV_BACKEND_URL = "BLOCKPRED_BACKEND_URL"

EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_BACKEND = 4

DEFAULT_CONFIG = {
    "seed": 0,
    "out_dir": "out",
    "cache_dir": "cache",
    "scenarios": [],
    "window": {"r": 8, "stride": 1, "r_prime_values": list(range(1, 11))},
    "split_fractions": [0.7, 0.2, 0.1],
    "features": {"length": 28},
    "enhancement": {
        "mode": "auto",
        "brightness_threshold": 0.25,
        "gamma": 0.45,
        "clip_percentiles": [1.0, 99.0],
    },
    "enhancer_backend": {"url": None, "cmd": None, "timeout_s": 30.0},
    "detector": {
        "kind": "oracle",
        "min_confidence": 0.5,
        "relevant_classes": [0, 1, 2, 3, 5, 7],
        "noise": {"jitter_std": 0.0, "miss_prob": 0.0, "false_positive_rate": 0.0},
        "url": None,
        "cmd": None,
        "timeout_s": 30.0,
    },
    "model": {"hidden_dim": 128, "num_layers": 2},
    "train": {"learning_rate": 1e-3, "batch_size": 128, "epochs": 100},
    "simulate": {},
}


class MissingPrerequisite(BlockpredError):
    """A required stage artifact is absent; run the earlier stage first."""


def _deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(config_path: str, **overrides) -> dict:
    """Defaults < config file < environment < CLI flags."""
    path = Path(config_path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        file_cfg = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}")
    cfg = _deep_merge(DEFAULT_CONFIG, file_cfg)
    cfg["_config_dir"] = str(path.parent.resolve())
    if os.environ.get(ENV_CACHE_DIR):
        cfg["cache_dir"] = os.environ[ENV_CACHE_DIR]
    if overrides.get("seed") is not None:
        cfg["seed"] = overrides["seed"]
        cfg["simulate"]["seed"] = overrides["seed"]
    if overrides.get("out_override"):
        cfg["out_dir"] = overrides["out_override"]
    if overrides.get("detector_override"):
        cfg["detector"]["kind"] = overrides["detector_override"]
    if overrides.get("enhance_override"):
        cfg["enhancement"]["mode"] = overrides["enhance_override"]
    if overrides.get("scenario_filter"):
        cfg["_scenario_filter"] = overrides["scenario_filter"]
    return cfg


def _resolve(cfg: dict, p: str | Path) -> Path:
    p = Path(p)
    return p if p.is_absolute() else Path(cfg["_config_dir"]) / p


def _out_dir(cfg: dict) -> Path:
    return _resolve(cfg, cfg["out_dir"])


def _cache_dir(cfg: dict) -> Path:
    return _resolve(cfg, cfg["cache_dir"])


def _write_resolved_config(cfg: dict, out_dir: Path) -> None:
    resolved = {k: v for k, v in cfg.items() if not k.startswith("_")}
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "run_config.json").write_text(
        json.dumps(resolved, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


@contextmanager
def output_lock(out_dir: Path):
    """One writer per output directory; stale locks must be removed by hand."""
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / ".blockpred.lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ConfigError(
            f"output directory {out_dir} is locked by another run "
            f"(remove {lock} if stale)"
        )
    try:
        os.write(fd, f"{os.getpid()}\n".encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def _scenario_entries(cfg: dict) -> list[tuple[Path, Path]]:
    """(manifest path, ground-truth path) per configured scenario entry."""
    entries = []
    for raw in cfg["scenarios"]:
        p = _resolve(cfg, raw)
        if p.is_dir():
            entries.append((p / "manifest.csv", p / "ground_truth.jsonl"))
        else:
            entries.append((p, p.parent / "ground_truth.jsonl"))
    return entries


def _load_scenarios(cfg: dict) -> dict[str, Scenario]:
    entries = _scenario_entries(cfg)
    if not entries:
        raise ConfigError("config lists no scenarios")
    scenarios: dict[str, Scenario] = {}
    for manifest, _ in entries:
        if not manifest.exists():
            raise ConfigError(f"manifest not found: {manifest}")
        sc = load_manifest(manifest)
        scenarios[sc.scenario_id] = sc
    wanted = cfg.get("_scenario_filter")
    if wanted:
        if wanted not in scenarios:
            raise ConfigError(f"--scenario {wanted!r} not among {sorted(scenarios)}")
        scenarios = {wanted: scenarios[wanted]}
    return scenarios


def _build_detector(cfg: dict):
    det = cfg["detector"]
    classes = frozenset(det["relevant_classes"])
    min_conf = float(det["min_confidence"])
    kind = det["kind"]
    if kind in ("oracle", "noisy"):
        gt_paths = [gt for _, gt in _scenario_entries(cfg)]
        missing = [str(p) for p in gt_paths if not p.exists()]
        if missing:
            raise MissingPrerequisite(
                f"ground truth files missing for detector kind {kind!r}: {missing}; "
                f"run `blockpred simulate` first"
            )
        base = GroundTruthDetector.from_files(
            gt_paths, relevant_classes=classes, min_confidence=min_conf
        )
        if kind == "oracle":
            return base
        noise = NoiseConfig(**det["noise"])
        return NoisyDetector(base, noise, seed=int(cfg["seed"]))
    if kind == "external":
        url = det.get("url") or os.environ.get(ENV_BACKEND_URL)
        if det.get("cmd"):
            return SubprocessDetector(
                det["cmd"], timeout_s=det["timeout_s"],
                relevant_classes=classes, min_confidence=min_conf,
            )
        if url:
            return HTTPDetector(
                url, timeout_s=det["timeout_s"],
                relevant_classes=classes, min_confidence=min_conf,
            )
        raise ConfigError(
            "detector kind 'external' needs detector.cmd, detector.url, "
            f"or {ENV_BACKEND_URL}"
        )
    raise ConfigError(f"unknown detector kind {kind!r}")


def _build_enhancer(cfg: dict):
    if cfg["enhancement"]["mode"] != "external":
        return None
    eb = cfg["enhancer_backend"]
    if eb.get("cmd"):
        return SubprocessEnhancer(eb["cmd"], timeout_s=eb["timeout_s"])
    url = eb.get("url") or os.environ.get(ENV_BACKEND_URL)
    if url:
        return HTTPEnhancer(url, timeout_s=eb["timeout_s"])
    raise ConfigError(
        f"enhancement mode 'external' needs enhancer_backend.cmd, .url, or {ENV_BACKEND_URL}"
    )


def _build_pipeline(cfg: dict, scenarios: dict[str, Scenario], cache: FeatureCache) -> FramePipeline:
    pipeline = FramePipeline(
        detector=_build_detector(cfg),
        enhancement=EnhancementConfig(
            brightness_threshold=cfg["enhancement"]["brightness_threshold"],
            gamma=cfg["enhancement"]["gamma"],
            clip_percentiles=tuple(cfg["enhancement"]["clip_percentiles"]),
            mode=cfg["enhancement"]["mode"],
        ),
        feature_len=normalize_feature_len(int(cfg["features"]["length"])),
        enhancer_backend=_build_enhancer(cfg),
        cache=cache,
    )
    for sc in scenarios.values():
        pipeline.register(sc)
    return pipeline


def _cache_file(cfg: dict, pipeline: FramePipeline) -> Path:
    return _cache_dir(cfg) / f"features_{pipeline.config_hash}.jsonl"


def _listing_path(out_dir: Path, r_prime: int) -> Path:
    return out_dir / f"listing_r{r_prime}.jsonl"


def _checkpoint_path(out_dir: Path, r_prime: int) -> Path:
    return out_dir / f"model_r{r_prime}.npz"


def _load_split(cfg: dict, out_dir: Path, r_prime: int, scenarios: dict[str, Scenario]):
    listing = _listing_path(out_dir, r_prime)
    if not listing.exists():
        raise MissingPrerequisite(
            f"dataset listing {listing} not found; run `blockpred build-dataset` first"
        )
    rows = read_listing(listing)
    return split_from_listing(rows, scenarios, seed=int(cfg["seed"]))


def _cached_feature_fn(cfg: dict, pipeline: FramePipeline, r: int):
    """Feature provider that only serves already-extracted frames."""
    config_hash = pipeline.config_hash

    def features(seq):
        scenario = pipeline.scenario(seq.scenario_id)
        rows = []
        for pos in range(seq.anchor_index - r + 1, seq.anchor_index + 1):
            sample = scenario.samples[pos]
            vec = pipeline.cache.get((seq.scenario_id, sample.seq_index, config_hash))
            if vec is None:
                raise MissingPrerequisite(
                    f"no cached features for scenario {seq.scenario_id!r} "
                    f"seq_index {sample.seq_index}; run `blockpred extract-features` first"
                )
            rows.append(vec)
        return np.stack(rows)

    return features


def _handle_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except MissingPrerequisite as e:
            _fail(EXIT_MISSING, str(e))
        except BackendError as e:
            _fail(EXIT_BACKEND, str(e))
        except FeatureExtractionError as e:
            # keep the backend exit code when the per-frame failure was one
            code = EXIT_BACKEND if isinstance(e.__cause__, BackendError) else EXIT_CONFIG
            _fail(code, str(e))
        except (BlockpredError, OSError) as e:
            _fail(EXIT_CONFIG, str(e))

    return wrapper


def _fail(code: int, message: str) -> None:
    click.echo(f"error: {message}", err=True)
    raise SystemExit(code)


def common_options(fn):
    fn = click.option("--enhance", "enhance_override",
                      type=click.Choice(["auto", "always", "never", "external"]),
                      default=None, help="Override the enhancement mode.")(fn)
    fn = click.option("--detector", "detector_override",
                      type=click.Choice(["oracle", "noisy", "external"]),
                      default=None, help="Override the detector kind.")(fn)
    fn = click.option("--scenario", "scenario_filter", default=None,
                      help="Restrict the run to one scenario id.")(fn)
    fn = click.option("--out", "out_override", type=click.Path(), default=None,
                      help="Override the output directory.")(fn)
    fn = click.option("--seed", type=int, default=None, help="Override the run seed.")(fn)
    fn = click.option("--config", "config_path", type=click.Path(), required=True,
                      help="Path to the JSON run config.")(fn)
    return fn


@click.group()
def main():
    """Vision-aided LOS blockage prediction pipeline."""
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")


@main.command("simulate")
@common_options
@_handle_errors
def simulate_cmd(config_path, seed, out_override, scenario_filter, detector_override, enhance_override):
    """Generate a synthetic scenario: frames, manifest, ground truth."""
    cfg = load_config(config_path, seed=seed, out_override=out_override,
                      detector_override=detector_override, enhance_override=enhance_override,
                      scenario_filter=scenario_filter)
    sim_kwargs = dict(cfg["simulate"])
    if scenario_filter:
        sim_kwargs["scenario_id"] = scenario_filter
    sim_kwargs.setdefault("seed", int(cfg["seed"]))
    if "image_size" in sim_kwargs:
        sim_kwargs["image_size"] = tuple(sim_kwargs["image_size"])
    if "los_corridor" in sim_kwargs:
        sim_kwargs["los_corridor"] = tuple(sim_kwargs["los_corridor"])
    for key in ("speed_range", "size_range"):
        if key in sim_kwargs:
            sim_kwargs[key] = tuple(sim_kwargs[key])
    write_frames = bool(sim_kwargs.pop("write_frames", True))
    scene = SceneConfig(**sim_kwargs)
    out_dir = _out_dir(cfg)
    with output_lock(out_dir):
        _write_resolved_config(cfg, out_dir)
        sim = simulate(scene)
        scenario_dir = out_dir / scene.scenario_id
        manifest = write_scenario(sim, scenario_dir, write_frames=write_frames)
    stats_blocked = sum(sim.occlusion)
    click.echo(
        f"simulated {sim.n_frames} frames ({stats_blocked} blocked) -> {manifest}"
    )


@main.command("build-dataset")
@common_options
@_handle_errors
def build_dataset(config_path, seed, out_override, scenario_filter, detector_override, enhance_override):
    """Window, balance, and split every scenario for each future window length."""
    cfg = load_config(config_path, seed=seed, out_override=out_override,
                      detector_override=detector_override, enhance_override=enhance_override,
                      scenario_filter=scenario_filter)
    scenarios = _load_scenarios(cfg)
    out_dir = _out_dir(cfg)
    w = cfg["window"]
    fractions = tuple(cfg["split_fractions"])
    summary = []
    with output_lock(out_dir):
        _write_resolved_config(cfg, out_dir)
        for r_prime in w["r_prime_values"]:
            wcfg = WindowConfig(r=int(w["r"]), r_prime=int(r_prime), stride=int(w["stride"]))
            parts = []
            for sid in scenarios:
                sc = scenarios[sid]
                windows = windowing.build_windows(sc, wcfg)
                balanced = windowing.balance(windows, int(cfg["seed"]))
                part = windowing.split(balanced, fractions, int(cfg["seed"]))
                parts.append(part)
                summary.append(
                    {
                        "scenario_id": sid,
                        "r_prime": int(r_prime),
                        "train": len(part.train),
                        "val": len(part.val),
                        "test": len(part.test),
                        "time_of_day": sc.time_of_day.value,
                    }
                )
            merged = windowing.merge_splits(parts)
            windowing.write_listing(_listing_path(out_dir, r_prime), merged, wcfg)
        (out_dir / "dataset_summary.json").write_text(
            json.dumps(summary, indent=2) + "\n", encoding="utf-8"
        )
    click.echo(f"{'scenario':<12}{'r_prime':>8}{'train':>8}{'val':>7}{'test':>7}  time_of_day")
    for row in summary:
        click.echo(
            f"{row['scenario_id']:<12}{row['r_prime']:>8}{row['train']:>8}"
            f"{row['val']:>7}{row['test']:>7}  {row['time_of_day']}"
        )


@main.command("extract-features")
@common_options
@_handle_errors
def extract_features(config_path, seed, out_override, scenario_filter, detector_override, enhance_override):
    """Compute and cache the feature vector of every frame referenced by a listing."""
    cfg = load_config(config_path, seed=seed, out_override=out_override,
                      detector_override=detector_override, enhance_override=enhance_override,
                      scenario_filter=scenario_filter)
    scenarios = _load_scenarios(cfg)
    out_dir = _out_dir(cfg)
    listings = sorted(out_dir.glob("listing_r*.jsonl"))
    if not listings:
        raise MissingPrerequisite(
            f"no dataset listings under {out_dir}; run `blockpred build-dataset` first"
        )
    cache = FeatureCache()
    pipeline = _build_pipeline(cfg, scenarios, cache)
    cache_file = _cache_file(cfg, pipeline)
    with output_lock(out_dir):
        if cache_file.exists():
            n = cache.load(cache_file)
            logger.info("resuming from %d cached frame features in %s", n, cache_file)
        positions: dict[str, set[int]] = {sid: set() for sid in scenarios}
        for listing in listings:
            for row in read_listing(listing):
                sid = row["scenario_id"]
                if sid not in scenarios:
                    continue
                r = int(row["r"])
                t = int(row["anchor_index"])
                positions[sid].update(range(t - r + 1, t + 1))
        computed = 0
        for sid, pos_set in positions.items():
            sc = scenarios[sid]
            for pos in sorted(pos_set):
                pipeline.frame_features(sc, pos)
                computed += 1
        cache_file.parent.mkdir(parents=True, exist_ok=True)
        cache.save(cache_file)
        _write_resolved_config(cfg, out_dir)
    click.echo(f"cached features for {computed} frames -> {cache_file}")


@main.command("train")
@common_options
@click.option("--r-prime", type=int, required=True, help="Future window length to train for.")
@_handle_errors
def train_cmd(config_path, seed, out_override, scenario_filter, detector_override,
              enhance_override, r_prime):
    """Train the recurrent classifier for one future window length."""
    cfg = load_config(config_path, seed=seed, out_override=out_override,
                      detector_override=detector_override, enhance_override=enhance_override,
                      scenario_filter=scenario_filter)
    out_dir = _out_dir(cfg)
    with output_lock(out_dir):
        ckpt = _train_one(cfg, out_dir, r_prime)
    meta = ckpt.metadata
    click.echo(
        f"r_prime={r_prime}: best epoch {meta['best_epoch']} "
        f"val_acc={meta['val_acc']:.4f} val_f1={meta['val_f1']:.4f}"
    )


def _train_one(cfg: dict, out_dir: Path, r_prime: int) -> Checkpoint:
    scenarios = _load_scenarios(cfg)
    splits, wcfg = _load_split(cfg, out_dir, r_prime, scenarios)
    cache = FeatureCache()
    pipeline = _build_pipeline(cfg, scenarios, cache)
    cache_file = _cache_file(cfg, pipeline)
    if cache_file.exists():
        cache.load(cache_file)
    feature_len = pipeline.feature_len
    mcfg = ModelConfig(
        input_dim=feature_len,
        hidden_dim=int(cfg["model"]["hidden_dim"]),
        num_layers=int(cfg["model"]["num_layers"]),
        seq_len=wcfg.r,
    )
    tcfg = TrainConfig(
        learning_rate=float(cfg["train"]["learning_rate"]),
        batch_size=int(cfg["train"]["batch_size"]),
        epochs=int(cfg["train"]["epochs"]),
        seed=int(cfg["seed"]),
    )
    ckpt = train_model(
        splits,
        _cached_feature_fn(cfg, pipeline, wcfg.r),
        mcfg,
        tcfg,
        dataset_hash=listing_sha256(splits, wcfg),
    )
    ckpt.save(_checkpoint_path(out_dir, r_prime))
    write_train_log(ckpt.metadata["history"], out_dir / f"train_log_r{r_prime}.csv")
    _write_resolved_config(cfg, out_dir)
    return ckpt


@main.command("evaluate")
@common_options
@_handle_errors
def evaluate_cmd(config_path, seed, out_override, scenario_filter, detector_override, enhance_override):
    """Compute test-split metrics and plots for every trained future window."""
    cfg = load_config(config_path, seed=seed, out_override=out_override,
                      detector_override=detector_override, enhance_override=enhance_override,
                      scenario_filter=scenario_filter)
    out_dir = _out_dir(cfg)
    with output_lock(out_dir):
        reports = _evaluate_all(cfg, out_dir)
    for rep in reports:
        click.echo(
            f"{rep.scenario_id:<12} r_prime={rep.r_prime:<3} "
            f"acc={rep.top1_accuracy:.4f} f1={rep.f1:.4f} "
            f"precision={rep.precision:.4f} recall={rep.recall:.4f} U={rep.U}"
        )
    click.echo(f"report written to {out_dir / 'report.json'}")


def _evaluate_all(cfg: dict, out_dir: Path):
    ckpt_paths = sorted(out_dir.glob("model_r*.npz"))
    if not ckpt_paths:
        raise MissingPrerequisite(
            f"no checkpoints under {out_dir}; run `blockpred train` first"
        )
    scenarios = _load_scenarios(cfg)
    cache = FeatureCache()
    pipeline = _build_pipeline(cfg, scenarios, cache)
    cache_file = _cache_file(cfg, pipeline)
    if cache_file.exists():
        cache.load(cache_file)
    ckpts = {}
    splits = {}
    r = None
    for path in ckpt_paths:
        m = re.fullmatch(r"model_r(\d+)\.npz", path.name)
        if not m:
            continue
        r_prime = int(m.group(1))
        ckpts[r_prime] = Checkpoint.load(path)
        splits[r_prime], wcfg = _load_split(cfg, out_dir, r_prime, scenarios)
        r = wcfg.r
    features = _cached_feature_fn(cfg, pipeline, r)
    reports = evaluate_sweep(ckpts, splits, features, out_dir=out_dir)
    _write_resolved_config(cfg, out_dir)
    return reports


@main.command("sweep")
@common_options
@click.option("--r-prime", "r_prime_only", type=int, default=None,
              help="Limit the sweep to one future window length.")
@_handle_errors
def sweep_cmd(config_path, seed, out_override, scenario_filter, detector_override,
              enhance_override, r_prime_only):
    """Train and evaluate across all configured future window lengths."""
    cfg = load_config(config_path, seed=seed, out_override=out_override,
                      detector_override=detector_override, enhance_override=enhance_override,
                      scenario_filter=scenario_filter)
    out_dir = _out_dir(cfg)
    values = cfg["window"]["r_prime_values"]
    if r_prime_only is not None:
        values = [r_prime_only]
    with output_lock(out_dir):
        for r_prime in values:
            ckpt = _train_one(cfg, out_dir, int(r_prime))
            click.echo(
                f"r_prime={r_prime}: best epoch {ckpt.metadata['best_epoch']} "
                f"val_f1={ckpt.metadata['val_f1']:.4f}"
            )
        reports = _evaluate_all(cfg, out_dir)
    for rep in reports:
        click.echo(
            f"{rep.scenario_id:<12} r_prime={rep.r_prime:<3} "
            f"acc={rep.top1_accuracy:.4f} f1={rep.f1:.4f}"
        )


if __name__ == "__main__":
    main()
