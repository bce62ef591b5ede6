"""Recurrent blockage classifier: two stacked GRU layers whose final hidden
state feeds a linear two-class head, trained with Adam on cross-entropy.

Everything runs in float64 on CPU. Combined with seeded initialization and a
seeded epoch shuffle this makes training runs bit-reproducible: the same
data, configs, and seeds yield byte-identical checkpoints.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import (
    ConfigError,
    ConfigMismatchError,
    DivergenceError,
    EmptySplitError,
    ShapeError,
)
from .evaluation import confusion, f1, top1_accuracy
from .windowing import DatasetSplit, SequenceSample

CHECKPOINT_FORMAT_VERSION = 1
_ARRAY_DTYPE = "<f8"  # little-endian float64, declared so files are portable


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int = 28
    hidden_dim: int = 128
    num_layers: int = 2
    num_classes: int = 2
    seq_len: int = 8

    def __post_init__(self):
        for name in ("input_dim", "hidden_dim", "num_layers", "num_classes", "seq_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.num_classes != 2:
            raise ConfigError(f"num_classes must be 2, got {self.num_classes}")

    def as_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_dim": self.hidden_dim,
            "num_layers": self.num_layers,
            "num_classes": self.num_classes,
            "seq_len": self.seq_len,
        }


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 128
    epochs: int = 100
    seed: int = 0

    def __post_init__(self):
        # learning_rate 0 is allowed: it turns training into a no-op pass,
        # which is useful for pipeline checks.
        if self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")


class RecurrentClassifier(nn.Module):
    """Stacked GRU + linear head over the last time step's top-layer state."""

    def __init__(self, cfg: ModelConfig, init_seed: int | None = 0):
        super().__init__()
        self.cfg = cfg
        self.gru = nn.GRU(
            input_size=cfg.input_dim,
            hidden_size=cfg.hidden_dim,
            num_layers=cfg.num_layers,
            batch_first=True,
        )
        self.head = nn.Linear(cfg.hidden_dim, cfg.num_classes)
        self.double()
        if init_seed is not None:
            self.reset_parameters(init_seed)

    def reset_parameters(self, seed: int) -> None:
        """Weights uniform in [-1/sqrt(hidden), 1/sqrt(hidden)], biases zero."""
        gen = torch.Generator().manual_seed(int(seed) & 0x7FFFFFFFFFFFFFFF)
        bound = 1.0 / math.sqrt(self.cfg.hidden_dim)
        with torch.no_grad():
            for name, p in self.named_parameters():
                if "bias" in name:
                    p.zero_()
                else:
                    p.uniform_(-bound, bound, generator=gen)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out, _ = self.gru(x)
        return self.head(out[:, -1, :])


def _check_feature_array(arr: np.ndarray, input_dim: int) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim not in (2, 3):
        raise ShapeError(f"expected (r, Z) or (B, r, Z) features, got shape {arr.shape}")
    if arr.shape[-1] != input_dim:
        raise ShapeError(f"feature dim {arr.shape[-1]} != model input_dim {input_dim}")
    return arr


def forward_probs(model: RecurrentClassifier, features: np.ndarray) -> np.ndarray:
    """Class probabilities (p_los, p_blocked) for one sequence or a batch."""
    arr = _check_feature_array(features, model.cfg.input_dim)
    single = arr.ndim == 2
    if single:
        arr = arr[None]
    with torch.no_grad():
        probs = torch.softmax(model(torch.from_numpy(arr)), dim=1).numpy()
    return probs[0] if single else probs


def _decide(probs: np.ndarray) -> np.ndarray:
    # Exact ties go to LOS: only p_blocked strictly above 0.5 predicts blockage.
    return (probs[:, 1] > probs[:, 0]).astype(np.int64)


@dataclass
class Checkpoint:
    """Self-describing parameter container, reloadable to bit-identical outputs."""

    model_config: ModelConfig
    arrays: dict[str, np.ndarray]
    metadata: dict = field(default_factory=dict)

    def build_model(self) -> RecurrentClassifier:
        model = RecurrentClassifier(self.model_config, init_seed=None)
        expected = [name for name, _ in model.named_parameters()]
        if list(self.arrays.keys()) != expected:
            raise ConfigMismatchError(
                f"checkpoint parameters {list(self.arrays)} do not match model {expected}"
            )
        with torch.no_grad():
            for name, p in model.named_parameters():
                arr = self.arrays[name]
                if tuple(arr.shape) != tuple(p.shape):
                    raise ConfigMismatchError(
                        f"parameter {name}: checkpoint shape {arr.shape} != model {tuple(p.shape)}"
                    )
                p.copy_(torch.from_numpy(np.ascontiguousarray(arr)))
        model.eval()
        return model

    def save(self, path: str | Path) -> None:
        """Write a zip of .npy arrays plus meta.json, with fixed zip timestamps
        so identical checkpoints are byte-identical files."""
        meta = {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "dtype": _ARRAY_DTYPE,
            "model_config": self.model_config.as_dict(),
            "param_names": list(self.arrays.keys()),
            "metadata": self.metadata,
        }
        with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
            zf.writestr(
                zipfile.ZipInfo("meta.json", date_time=(1980, 1, 1, 0, 0, 0)),
                json.dumps(meta, sort_keys=True, separators=(",", ":")),
            )
            for name, arr in self.arrays.items():
                buf = io.BytesIO()
                np.lib.format.write_array(
                    buf, np.ascontiguousarray(arr, dtype=_ARRAY_DTYPE), allow_pickle=False
                )
                zf.writestr(
                    zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0)),
                    buf.getvalue(),
                )

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        with zipfile.ZipFile(path) as zf:
            meta = json.loads(zf.read("meta.json").decode("utf-8"))
            if meta["format_version"] != CHECKPOINT_FORMAT_VERSION:
                raise ConfigMismatchError(
                    f"unsupported checkpoint format version {meta['format_version']}"
                )
            arrays = {}
            for name in meta["param_names"]:
                arrays[name] = np.lib.format.read_array(
                    io.BytesIO(zf.read(f"{name}.npy")), allow_pickle=False
                )
        return cls(
            model_config=ModelConfig(**meta["model_config"]),
            arrays=arrays,
            metadata=meta.get("metadata", {}),
        )


def _snapshot(model: RecurrentClassifier) -> dict[str, np.ndarray]:
    return {
        name: p.detach().numpy().copy() for name, p in model.named_parameters()
    }


def split_fingerprint(split: DatasetSplit) -> str:
    """Hash of the split content, recorded in checkpoints for provenance."""
    rows = []
    for name, seqs in zip(("train", "val", "test"), (split.train, split.val, split.test)):
        for s in seqs:
            rows.append((s.scenario_id, s.anchor_index, int(s.label), name))
    blob = json.dumps(rows, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def _gather(
    seqs: Sequence[SequenceSample],
    features: Callable[[SequenceSample], np.ndarray],
    mcfg: ModelConfig,
) -> tuple[np.ndarray, np.ndarray]:
    xs = np.stack([_check_feature_array(features(s), mcfg.input_dim) for s in seqs])
    ys = np.array([int(s.label) for s in seqs], dtype=np.int64)
    return xs, ys


def train(
    split: DatasetSplit,
    features: Callable[[SequenceSample], np.ndarray],
    mcfg: ModelConfig,
    tcfg: TrainConfig,
    *,
    dataset_hash: str | None = None,
) -> Checkpoint:
    """Mini-batch training with per-epoch seeded shuffling.

    Records train loss and validation top-1/F1 per epoch in the checkpoint
    metadata and returns the parameters of the best-validation-F1 epoch
    (earliest epoch wins ties).
    """
    if not split.train or not split.val:
        raise EmptySplitError(
            f"need non-empty train and val sets, got {len(split.train)}/{len(split.val)}"
        )
    x_train, y_train = _gather(split.train, features, mcfg)
    x_val, y_val = _gather(split.val, features, mcfg)

    model = RecurrentClassifier(mcfg, init_seed=tcfg.seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=tcfg.learning_rate)
    shuffle_rng = np.random.default_rng(tcfg.seed)

    xt = torch.from_numpy(x_train)
    yt = torch.from_numpy(y_train)

    history: list[dict] = []
    best: dict | None = None
    n = len(split.train)
    for epoch in range(1, tcfg.epochs + 1):
        model.train()
        perm = shuffle_rng.permutation(n)
        total_loss = 0.0
        for start in range(0, n, tcfg.batch_size):
            idx = torch.from_numpy(perm[start : start + tcfg.batch_size])
            logits = model(xt[idx])
            loss = F.cross_entropy(logits, yt[idx])
            loss_value = float(loss.item())
            if not math.isfinite(loss_value):
                raise DivergenceError(f"training loss became non-finite at epoch {epoch}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total_loss += loss_value * len(idx)
        train_loss = total_loss / n

        model.eval()
        val_probs = forward_probs(model, x_val)
        val_preds = _decide(val_probs)
        val_acc = top1_accuracy(val_preds.tolist(), y_val.tolist())
        val_f1 = f1(confusion(val_preds.tolist(), y_val.tolist()))
        history.append(
            {"epoch": epoch, "train_loss": train_loss, "val_acc": val_acc, "val_f1": val_f1}
        )
        if best is None or val_f1 > best["val_f1"]:
            best = {
                "epoch": epoch,
                "val_f1": val_f1,
                "val_acc": val_acc,
                "arrays": _snapshot(model),
            }

    metadata = {
        "best_epoch": best["epoch"],
        "val_f1": best["val_f1"],
        "val_acc": best["val_acc"],
        "epochs": tcfg.epochs,
        "learning_rate": tcfg.learning_rate,
        "batch_size": tcfg.batch_size,
        "seed": tcfg.seed,
        "dataset_hash": dataset_hash or split_fingerprint(split),
        "history": history,
    }
    return Checkpoint(model_config=mcfg, arrays=best["arrays"], metadata=metadata)


def predict(
    ckpt: Checkpoint,
    sequences: Sequence[np.ndarray] | np.ndarray,
    *,
    batch_size: int = 1024,
) -> list[tuple[int, float]]:
    """(predicted status, blockage probability) per sequence, deterministic."""
    if isinstance(sequences, np.ndarray) and sequences.ndim == 3:
        arr = np.asarray(sequences, dtype=np.float64)
    else:
        seq_list = list(sequences)
        if not seq_list:
            return []
        arr = np.stack([np.asarray(s, dtype=np.float64) for s in seq_list])
    if arr.ndim != 3:
        raise ShapeError(f"expected (B, r, Z) sequences, got shape {arr.shape}")
    if arr.shape[-1] != ckpt.model_config.input_dim:
        raise ConfigMismatchError(
            f"feature dim {arr.shape[-1]} != checkpoint input_dim {ckpt.model_config.input_dim}"
        )
    model = ckpt.build_model()
    out: list[tuple[int, float]] = []
    for start in range(0, len(arr), batch_size):
        probs = forward_probs(model, arr[start : start + batch_size])
        preds = _decide(probs)
        out.extend((int(p), float(pb)) for p, pb in zip(preds, probs[:, 1]))
    return out


def write_train_log(history: Sequence[dict], path: str | Path) -> None:
    """Per-epoch CSV: epoch, train_loss, val_acc, val_f1."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "train_loss", "val_acc", "val_f1"])
        for row in history:
            writer.writerow([row["epoch"], row["train_loss"], row["val_acc"], row["val_f1"]])
