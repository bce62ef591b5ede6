"""Canonical data model for scenario recordings and manifest ingestion.

A scenario is an ordered stream of timestamped samples; each sample pairs an
RGB image reference with a manually labelled binary link status and an
optional receive-power vector. Scenarios are serialized as CSV manifests with
a single JSON header line prefixed ``#``:

    #{"version": 1, "scenario_id": "s17", "sample_rate_hz": 12.0, ...}
    0,0.0,frames/frame_00000.png,0
    1,0.0833,frames/frame_00001.png,0,-62.1,-60.4,...

Row layout is ``seq_index,timestamp,image_ref,label`` optionally followed by
exactly M power columns. Timestamps may be left empty, in which case they are
synthesized as ``seq_index / sample_rate_hz``. Labels are never inferred from
power readings; they are ingested as given.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from pathlib import Path
from typing import Iterable

from .errors import ParseError, ValidationError

MANIFEST_VERSION = 1
DEFAULT_CODEBOOK_SIZE = 64
DEFAULT_ANTENNA_COUNT = 16

_REQUIRED_HEADER_KEYS = ("version", "sample_rate_hz", "M", "power_units", "time_of_day")


class LinkStatus(IntEnum):
    """Binary link status: 0 keeps line of sight, 1 means the path is blocked."""

    LOS = 0
    BLOCKED = 1


class TimeOfDay(str, Enum):
    DAY = "day"
    NIGHT = "night"
    MIXED = "mixed"


@dataclass(frozen=True)
class Sample:
    """One timestamped record of a scenario recording.

    ``power_vector`` is pass-through metadata (units declared in the manifest
    header); nothing downstream of ingestion reads it.
    """

    scenario_id: str
    seq_index: int
    timestamp: float
    image_ref: str
    link_status: LinkStatus
    power_vector: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.seq_index < 0:
            raise ValidationError(f"seq_index must be >= 0, got {self.seq_index}")
        if self.link_status not in (0, 1):
            raise ValidationError(f"link_status must be 0 or 1, got {self.link_status}")
        if not self.image_ref:
            raise ValidationError("image_ref must be non-empty")


@dataclass
class Scenario:
    """An ordered, validated recording with its acquisition metadata."""

    scenario_id: str
    samples: list[Sample]
    sample_rate_hz: float
    time_of_day: TimeOfDay = TimeOfDay.DAY
    M: int = DEFAULT_CODEBOOK_SIZE
    N: int = DEFAULT_ANTENNA_COUNT
    power_units: str = "dbm"
    # Directory image_refs are resolved against; not part of value identity.
    base_dir: Path | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.sample_rate_hz <= 0:
            raise ValidationError(f"sample_rate_hz must be > 0, got {self.sample_rate_hz}")
        if not isinstance(self.time_of_day, TimeOfDay):
            self.time_of_day = TimeOfDay(self.time_of_day)
        prev_index = None
        prev_ts = None
        for s in self.samples:
            if s.scenario_id != self.scenario_id:
                raise ValidationError(
                    f"sample scenario_id {s.scenario_id!r} != {self.scenario_id!r}"
                )
            if prev_index is not None and s.seq_index <= prev_index:
                raise ValidationError(
                    f"seq_index not strictly increasing at {s.seq_index} (after {prev_index})"
                )
            if prev_ts is not None and s.timestamp < prev_ts:
                raise ValidationError(
                    f"timestamp decreases at seq_index {s.seq_index}: {s.timestamp} < {prev_ts}"
                )
            if s.power_vector is not None and len(s.power_vector) != self.M:
                raise ValidationError(
                    f"power vector at seq_index {s.seq_index} has {len(s.power_vector)} "
                    f"entries, expected M={self.M}"
                )
            prev_index = s.seq_index
            prev_ts = s.timestamp

    def resolve_image_path(self, sample: Sample) -> Path:
        p = Path(sample.image_ref)
        if p.is_absolute() or self.base_dir is None:
            return p
        return self.base_dir / p

    @property
    def link_statuses(self) -> list[LinkStatus]:
        return [s.link_status for s in self.samples]


@dataclass(frozen=True)
class ScenarioStats:
    n_samples: int
    n_blocked: int
    n_los: int
    duration_s: float


def scenario_stats(scenario: Scenario) -> ScenarioStats:
    """Count blocked/LOS samples and measure the recording span."""
    n = len(scenario.samples)
    if n == 0:
        return ScenarioStats(0, 0, 0, 0.0)
    n_blocked = sum(1 for s in scenario.samples if s.link_status == LinkStatus.BLOCKED)
    duration = scenario.samples[-1].timestamp - scenario.samples[0].timestamp
    return ScenarioStats(n, n_blocked, n - n_blocked, duration)


def _parse_header(line: str, path: Path) -> dict:
    if not line.startswith("#"):
        raise ParseError(f"{path}: expected '#' header line, got {line[:40]!r}", line_no=1)
    try:
        header = json.loads(line[1:])
    except json.JSONDecodeError as e:
        raise ParseError(f"{path}: header is not valid JSON: {e}", line_no=1)
    if not isinstance(header, dict):
        raise ParseError(f"{path}: header must be a JSON object", line_no=1)
    missing = [k for k in _REQUIRED_HEADER_KEYS if k not in header]
    if missing:
        raise ParseError(f"{path}: header missing keys {missing}", line_no=1)
    return header


def _parse_row(
    row: list[str], line_no: int, scenario_id: str, sample_rate_hz: float, m: int
) -> Sample:
    if len(row) not in (4, 4 + m):
        raise ParseError(
            f"expected 4 or {4 + m} fields, got {len(row)}", line_no=line_no
        )
    try:
        seq_index = int(row[0])
    except ValueError:
        raise ParseError(f"bad seq_index {row[0]!r}", line_no=line_no)
    if row[1].strip() == "":
        timestamp = seq_index / sample_rate_hz
    else:
        try:
            timestamp = float(row[1])
        except ValueError:
            raise ParseError(f"bad timestamp {row[1]!r}", line_no=line_no)
    image_ref = row[2]
    if not image_ref:
        raise ParseError("empty image_ref", line_no=line_no)
    try:
        label = int(row[3])
    except ValueError:
        raise ParseError(f"bad label {row[3]!r}", line_no=line_no)
    if label not in (0, 1):
        raise ValidationError(f"line {line_no}: label {label} outside {{0,1}}")
    power = None
    if len(row) == 4 + m:
        try:
            power = tuple(float(v) for v in row[4:])
        except ValueError:
            raise ParseError("bad power value", line_no=line_no)
    return Sample(
        scenario_id=scenario_id,
        seq_index=seq_index,
        timestamp=timestamp,
        image_ref=image_ref,
        link_status=LinkStatus(label),
        power_vector=power,
    )


def load_manifest(path: str | Path, *, check_images: bool = True) -> Scenario:
    """Load and validate a scenario manifest.

    Relative image references are resolved against the manifest's directory.
    Raises ParseError for malformed content (with line number), ValidationError
    for invariant violations, and OSError if the file cannot be read.
    """
    path = Path(path)
    with open(path, encoding="utf-8", newline="") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ParseError(f"{path}: empty manifest", line_no=1)
    header = _parse_header(lines[0], path)
    scenario_id = str(header.get("scenario_id", path.stem))
    sample_rate_hz = float(header["sample_rate_hz"])
    if sample_rate_hz <= 0:
        raise ValidationError(f"{path}: sample_rate_hz must be > 0")
    m = int(header["M"])

    samples = []
    reader = csv.reader(lines[1:])
    for offset, row in enumerate(reader):
        if not row:
            continue
        samples.append(_parse_row(row, offset + 2, scenario_id, sample_rate_hz, m))

    scenario = Scenario(
        scenario_id=scenario_id,
        samples=samples,
        sample_rate_hz=sample_rate_hz,
        time_of_day=TimeOfDay(header["time_of_day"]),
        M=m,
        N=int(header.get("N", DEFAULT_ANTENNA_COUNT)),
        power_units=str(header["power_units"]),
        base_dir=path.parent,
    )
    if check_images:
        for s in scenario.samples:
            if "://" in s.image_ref:
                continue
            if not scenario.resolve_image_path(s).exists():
                raise ValidationError(
                    f"{path}: image_ref {s.image_ref!r} (seq_index {s.seq_index}) not found"
                )
    return scenario


def write_manifest(scenario: Scenario, path: str | Path) -> None:
    """Write a scenario as a manifest (UTF-8, LF endings, '.' decimals)."""
    path = Path(path)
    header = {
        "version": MANIFEST_VERSION,
        "scenario_id": scenario.scenario_id,
        "sample_rate_hz": scenario.sample_rate_hz,
        "M": scenario.M,
        "N": scenario.N,
        "power_units": scenario.power_units,
        "time_of_day": scenario.time_of_day.value,
    }
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("#" + json.dumps(header, separators=(", ", ": ")) + "\n")
        writer = csv.writer(fh, lineterminator="\n")
        for s in scenario.samples:
            row = [s.seq_index, s.timestamp, s.image_ref, int(s.link_status)]
            if s.power_vector is not None:
                row.extend(s.power_vector)
            writer.writerow(row)


def load_scenarios(paths: Iterable[str | Path], *, check_images: bool = True) -> dict[str, Scenario]:
    """Load several manifests, keyed by scenario_id."""
    out: dict[str, Scenario] = {}
    for p in paths:
        sc = load_manifest(p, check_images=check_images)
        if sc.scenario_id in out:
            raise ValidationError(f"duplicate scenario_id {sc.scenario_id!r}")
        out[sc.scenario_id] = sc
    return out
