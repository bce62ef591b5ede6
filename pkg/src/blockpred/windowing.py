"""Sliding-window dataset construction: observation/future-label pairs,
class balancing, and train/val/test splitting.

An anchor position t yields the observation window of samples at positions
t-r+1 .. t and a binary label that is 1 iff any of the r' samples at
positions t+1 .. t+r' is blocked. Anchor positions index into the ordered
sample list of a scenario.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .coredata import LinkStatus, Sample, Scenario
from .errors import (
    ConfigError,
    EmptyClassError,
    FractionError,
    InsufficientDataError,
    LengthError,
    ValidationError,
)

DEFAULT_FRACTIONS = (0.70, 0.20, 0.10)
SPLIT_NAMES = ("train", "val", "test")


@dataclass(frozen=True)
class WindowConfig:
    """r past samples observed, r' future samples labelled, anchors every `stride`."""

    r: int = 8
    r_prime: int = 1
    stride: int = 1

    def __post_init__(self):
        if self.r < 1 or self.r_prime < 1 or self.stride < 1:
            raise ConfigError(
                f"r, r_prime, stride must all be >= 1, got "
                f"({self.r}, {self.r_prime}, {self.stride})"
            )


@dataclass(slots=True)
class SequenceSample:
    """One observation window plus its future blockage label."""

    scenario_id: str
    anchor_index: int
    observation: tuple[Sample, ...]
    label: LinkStatus


@dataclass
class DatasetSplit:
    train: list[SequenceSample]
    val: list[SequenceSample]
    test: list[SequenceSample]
    split_fractions: tuple[float, float, float] = DEFAULT_FRACTIONS
    seed: int = 0

    def __len__(self) -> int:
        return len(self.train) + len(self.val) + len(self.test)

    def as_dict(self) -> dict[str, list[SequenceSample]]:
        return {"train": self.train, "val": self.val, "test": self.test}


def future_label(statuses: Sequence[LinkStatus | int], r_prime: int) -> LinkStatus:
    """Label for a future window: blocked iff any of the r' statuses is blocked."""
    if len(statuses) != r_prime:
        raise LengthError(f"expected {r_prime} future statuses, got {len(statuses)}")
    return LinkStatus.BLOCKED if any(int(s) == 1 for s in statuses) else LinkStatus.LOS


def window_count(n_samples: int, cfg: WindowConfig) -> int:
    """Number of valid anchors for a scenario of n_samples samples (0 if too short)."""
    if n_samples < cfg.r + cfg.r_prime:
        return 0
    return (n_samples - cfg.r - cfg.r_prime) // cfg.stride + 1


def build_windows(scenario: Scenario, cfg: WindowConfig) -> list[SequenceSample]:
    """Slide the window over a scenario, one SequenceSample per valid anchor."""
    samples = scenario.samples
    n = len(samples)
    if window_count(n, cfg) == 0:
        raise InsufficientDataError(
            f"scenario {scenario.scenario_id!r} has {n} samples; "
            f"need at least r + r' = {cfg.r + cfg.r_prime}"
        )
    blocked = np.fromiter((int(s.link_status) for s in samples), dtype=np.int8, count=n)
    anchors = range(cfg.r - 1, n - cfg.r_prime, cfg.stride)
    # Label = OR over the future window; a windowed max computes it in bulk.
    future = np.lib.stride_tricks.sliding_window_view(blocked, cfg.r_prime).max(axis=1)
    out = []
    r = cfg.r
    sid = scenario.scenario_id
    for t in anchors:
        out.append(
            SequenceSample(
                scenario_id=sid,
                anchor_index=t,
                observation=tuple(samples[t - r + 1 : t + 1]),
                label=LinkStatus(int(future[t + 1])),
            )
        )
    return out


def balance(dataset: Sequence[SequenceSample], seed: int) -> list[SequenceSample]:
    """Down-sample the majority class to the minority count, preserving order.

    The survivors of the majority class are drawn uniformly at random under
    the given seed. Already balanced input is returned as-is (copied).
    """
    los_idx = [i for i, s in enumerate(dataset) if s.label == LinkStatus.LOS]
    blk_idx = [i for i, s in enumerate(dataset) if s.label == LinkStatus.BLOCKED]
    if not los_idx or not blk_idx:
        raise EmptyClassError(
            f"cannot balance: {len(los_idx)} LOS vs {len(blk_idx)} blocked sequences"
        )
    if len(los_idx) == len(blk_idx):
        return list(dataset)
    majority, minority = (los_idx, blk_idx) if len(los_idx) > len(blk_idx) else (blk_idx, los_idx)
    rng = np.random.default_rng(seed)
    kept = rng.choice(len(majority), size=len(minority), replace=False)
    keep = set(minority) | {majority[i] for i in kept}
    return [s for i, s in enumerate(dataset) if i in keep]


def _cut_points(n: int, fractions: Sequence[float]) -> tuple[int, int]:
    # floor(f*n) with a small epsilon so exact decimal products do not round
    # down (0.7*V may land a hair under the true multiple in binary floats).
    c1 = math.floor(fractions[0] * n + 1e-9)
    c2 = math.floor((fractions[0] + fractions[1]) * n + 1e-9)
    return c1, c2


def split(
    dataset: Sequence[SequenceSample],
    fractions: tuple[float, float, float] = DEFAULT_FRACTIONS,
    seed: int = 0,
) -> DatasetSplit:
    """Shuffle under the seed and cut into train/val/test at the fraction marks."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise FractionError(f"fractions {fractions} do not sum to 1")
    if any(f < 0 for f in fractions):
        raise FractionError(f"fractions {fractions} must be non-negative")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(dataset))
    shuffled = [dataset[i] for i in perm]
    c1, c2 = _cut_points(len(dataset), fractions)
    return DatasetSplit(
        train=shuffled[:c1],
        val=shuffled[c1:c2],
        test=shuffled[c2:],
        split_fractions=tuple(fractions),
        seed=seed,
    )


def sweep_datasets(
    scenario: Scenario,
    r: int = 8,
    r_prime_values: Iterable[int] = range(1, 11),
    stride: int = 1,
    fractions: tuple[float, float, float] = DEFAULT_FRACTIONS,
    seed: int = 0,
) -> dict[int, DatasetSplit]:
    """One balanced, split dataset per future-window length, all under one seed."""
    out: dict[int, DatasetSplit] = {}
    for r_prime in r_prime_values:
        cfg = WindowConfig(r=r, r_prime=r_prime, stride=stride)
        windows = build_windows(scenario, cfg)
        out[r_prime] = split(balance(windows, seed), fractions, seed)
    return out


def listing_lines(splits: DatasetSplit, cfg: WindowConfig) -> list[str]:
    """Serialize a split as JSON-lines rows (canonical key order, LF-joined)."""
    lines = []
    for split_name, seqs in zip(SPLIT_NAMES, (splits.train, splits.val, splits.test)):
        for s in seqs:
            lines.append(
                json.dumps(
                    {
                        "scenario_id": s.scenario_id,
                        "anchor_index": s.anchor_index,
                        "r": cfg.r,
                        "r_prime": cfg.r_prime,
                        "label": int(s.label),
                        "split": split_name,
                    },
                    separators=(",", ":"),
                )
            )
    return lines


def write_listing(path: str | Path, splits: DatasetSplit, cfg: WindowConfig) -> None:
    Path(path).write_text("\n".join(listing_lines(splits, cfg)) + "\n", encoding="utf-8")


def read_listing(path: str | Path) -> list[dict]:
    rows = []
    for i, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rows.append(json.loads(line))
        except json.JSONDecodeError as e:
            raise ValidationError(f"{path}: bad listing row at line {i}: {e}")
    return rows


def split_from_listing(
    rows: Sequence[Mapping],
    scenarios: Mapping[str, Scenario],
    *,
    seed: int = 0,
) -> tuple[DatasetSplit, WindowConfig]:
    """Rebuild a DatasetSplit from listing rows plus the loaded scenarios."""
    if not rows:
        raise ValidationError("empty listing")
    r = int(rows[0]["r"])
    r_prime = int(rows[0]["r_prime"])
    buckets: dict[str, list[SequenceSample]] = {name: [] for name in SPLIT_NAMES}
    for row in rows:
        if int(row["r"]) != r or int(row["r_prime"]) != r_prime:
            raise ValidationError("listing mixes window configs")
        sid = row["scenario_id"]
        if sid not in scenarios:
            raise ValidationError(f"listing references unknown scenario {sid!r}")
        samples = scenarios[sid].samples
        t = int(row["anchor_index"])
        if t - r + 1 < 0 or t >= len(samples):
            raise ValidationError(f"anchor_index {t} out of bounds for scenario {sid!r}")
        buckets[row["split"]].append(
            SequenceSample(
                scenario_id=sid,
                anchor_index=t,
                observation=tuple(samples[t - r + 1 : t + 1]),
                label=LinkStatus(int(row["label"])),
            )
        )
    return (
        DatasetSplit(train=buckets["train"], val=buckets["val"], test=buckets["test"], seed=seed),
        WindowConfig(r=r, r_prime=r_prime),
    )


def listing_sha256(splits: DatasetSplit, cfg: WindowConfig) -> str:
    payload = "\n".join(listing_lines(splits, cfg)).encode("utf-8")
    return hashlib.sha256(payload).hexdigest()


def merge_splits(parts: Sequence[DatasetSplit]) -> DatasetSplit:
    """Concatenate per-scenario splits bucket-wise into a combined split."""
    if not parts:
        raise ValidationError("no splits to merge")
    return DatasetSplit(
        train=[s for p in parts for s in p.train],
        val=[s for p in parts for s in p.val],
        test=[s for p in parts for s in p.test],
        split_fractions=parts[0].split_fractions,
        seed=parts[0].seed,
    )
