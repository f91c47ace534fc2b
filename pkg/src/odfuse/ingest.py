"""Data ingest: CSV parsing, feature building, dataset assembly, synthesis.

File formats (UTF-8, ISO-8601 hour timestamps):

* tollbooth CSV header:
  ``timestamp,station,direction,c_under5_6,c_5_6_7_6,c_7_6_12_5,c_12_5_16_0,c_16_0_24_0,c_over24_0,total``
* routing CSV header: ``timestamp,node,people_flow,road_tag`` where
  ``people_flow`` is a non-negative integer or the censor sentinel
  (default ``<T``).
* difference table: ``node,hour_of_day,mean_diff``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from datetime import timedelta
from pathlib import Path

import numpy as np

from .core import (
    CATEGORY_ORDER,
    CountsByCategory,
    Direction,
    HourKey,
    NodeId,
    NodeKind,
    RoadTag,
    RoutingReportObservation,
    TollboothObservation,
    make_hour_key,
)
from .errors import ConfigError, DataError
from .network import NetworkConfig

__all__ = [
    "FEATURE_NAMES",
    "TARGET_NAMES",
    "CENSOR_SENTINEL",
    "FeatureVector",
    "FusionDataset",
    "BiasProfile",
    "feature_vector",
    "read_tollbooth_csv",
    "read_routing_csv",
    "write_tollbooth_csv",
    "write_routing_csv",
    "build_dataset",
    "generate_synthetic",
    "difference_series",
    "write_difference_csv",
]

TOLLBOOTH_HEADER = [
    "timestamp",
    "station",
    "direction",
    "c_under5_6",
    "c_5_6_7_6",
    "c_7_6_12_5",
    "c_12_5_16_0",
    "c_16_0_24_0",
    "c_over24_0",
    "total",
]
ROUTING_HEADER = ["timestamp", "node", "people_flow", "road_tag"]

CENSOR_SENTINEL = "<T"

FEATURE_NAMES = (
    "people_flow",
    "hour_of_day",
    "day_of_week",
    "is_weekend",
    "tag_primary",
    "tag_trunk",
    "tag_secondary",
)

# Model targets: the aggregate volume plus the six length bands.
TARGET_NAMES = ("total",) + tuple(cat.key for cat in CATEGORY_ORDER)

_TAG_ONEHOT = {
    RoadTag.PRIMARY: (1.0, 0.0, 0.0),
    RoadTag.TRUNK: (0.0, 1.0, 0.0),
    RoadTag.SECONDARY: (0.0, 0.0, 1.0),
}


@dataclass(frozen=True)
class FeatureVector:
    """Model input features for one (node, hour) routing report."""

    people_flow: float
    hour_of_day: int
    day_of_week: int
    is_weekend: int
    road_tag: RoadTag

    def to_array(self) -> np.ndarray:
        onehot = _TAG_ONEHOT[self.road_tag]
        return np.array(
            [
                self.people_flow,
                float(self.hour_of_day),
                float(self.day_of_week),
                float(self.is_weekend),
                *onehot,
            ],
            dtype=np.float64,
        )


def feature_vector(obs: RoutingReportObservation) -> FeatureVector:
    return FeatureVector(
        people_flow=float(obs.people_flow),
        hour_of_day=obs.hour.hour_of_day,
        day_of_week=obs.hour.day_of_week,
        is_weekend=int(obs.hour.is_weekend),
        road_tag=obs.road_tag,
    )


@dataclass
class FusionDataset:
    """Joined, model-ready rows with a chronological train/valid split.

    Rows are sorted by (timestamp, node key); ``split_index`` is the first
    validation row. Feature columns follow FEATURE_NAMES, target columns
    TARGET_NAMES.
    """

    X: np.ndarray
    Y: np.ndarray
    node_keys: list[str]
    hours: list[HourKey]
    split_index: int

    @property
    def n_rows(self) -> int:
        return self.X.shape[0]

    @property
    def X_train(self) -> np.ndarray:
        return self.X[: self.split_index]

    @property
    def X_valid(self) -> np.ndarray:
        return self.X[self.split_index :]

    @property
    def Y_train(self) -> np.ndarray:
        return self.Y[: self.split_index]

    @property
    def Y_valid(self) -> np.ndarray:
        return self.Y[self.split_index :]


def _parse_int_field(raw: str, line: int, field: str) -> int:
    try:
        value = int(raw)
    except ValueError as exc:
        raise DataError(f"unparseable integer {raw!r} at line {line}, field {field!r}") from exc
    if value < 0:
        raise DataError(f"negative count at line {line}, field {field!r}")
    return value


def _check_header(row: list[str] | None, expected: list[str], path: Path) -> None:
    if row is None:
        raise DataError(f"{path}: empty file, expected header {','.join(expected)}")
    if row != expected:
        raise DataError(
            f"{path}: bad header {','.join(row)!r}, expected {','.join(expected)!r}"
        )


def read_tollbooth_csv(path: str | Path, network: NetworkConfig | None = None) -> list[TollboothObservation]:
    """Parse an hourly ground-truth counts file.

    Node kinds resolve from ``network`` when given, otherwise default to
    main tollbooths. Rows whose reported total disagrees with the category
    sum by more than 1% come back with ``counts.total_mismatch`` set.
    """
    p = Path(path)
    if not p.exists():
        raise DataError(f"tollbooth file not found: {p}")
    out: list[TollboothObservation] = []
    with open(p, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        _check_header(header, TOLLBOOTH_HEADER, p)
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(TOLLBOOTH_HEADER):
                raise DataError(f"{p}: line {line} has {len(row)} fields, expected {len(TOLLBOOTH_HEADER)}")
            try:
                hour = make_hour_key(row[0])
            except DataError as exc:
                raise DataError(f"{p}: line {line}, field 'timestamp': {exc}") from exc
            name = row[1]
            if not name:
                raise DataError(f"{p}: line {line}: empty station name")
            direction = Direction.parse(row[2])
            counts = {
                cat: float(_parse_int_field(row[3 + i], line, TOLLBOOTH_HEADER[3 + i]))
                for i, cat in enumerate(CATEGORY_ORDER)
            }
            total = _parse_int_field(row[9], line, "total")
            kind = NodeKind.MAIN_TOLLBOOTH
            if network is not None:
                try:
                    kind = network.node_named(name).node.kind
                except ConfigError:
                    pass
            out.append(
                TollboothObservation(
                    node=NodeId(name=name, kind=kind),
                    direction=direction,
                    hour=hour,
                    counts=CountsByCategory.with_reported_total(counts, float(total)),
                )
            )
    return out


def read_routing_csv(
    path: str | Path,
    network: NetworkConfig | None = None,
    sentinel: str = CENSOR_SENTINEL,
) -> list[RoutingReportObservation]:
    """Parse an aggregated mobility file; sentinel flow values mark censoring."""
    p = Path(path)
    if not p.exists():
        raise DataError(f"routing file not found: {p}")
    out: list[RoutingReportObservation] = []
    with open(p, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        _check_header(header, ROUTING_HEADER, p)
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(ROUTING_HEADER):
                raise DataError(f"{p}: line {line} has {len(row)} fields, expected {len(ROUTING_HEADER)}")
            try:
                hour = make_hour_key(row[0])
            except DataError as exc:
                raise DataError(f"{p}: line {line}, field 'timestamp': {exc}") from exc
            name = row[1]
            if not name:
                raise DataError(f"{p}: line {line}: empty node name")
            censored = row[2] == sentinel
            flow = 0 if censored else _parse_int_field(row[2], line, "people_flow")
            try:
                tag = RoadTag.parse(row[3])
            except DataError as exc:
                raise DataError(f"{p}: line {line}: {exc}") from exc
            kind = NodeKind.INFERRED_DESTINATION
            if network is not None:
                base = name.split("|", 1)[0]
                try:
                    kind = network.node_named(base).node.kind
                except ConfigError:
                    pass
            out.append(
                RoutingReportObservation(
                    node=NodeId(name=name, kind=kind),
                    hour=hour,
                    people_flow=float(flow),
                    road_tag=tag,
                    censored=censored,
                )
            )
    return out


def write_tollbooth_csv(path: str | Path, observations: list[TollboothObservation]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(TOLLBOOTH_HEADER)
        for obs in observations:
            writer.writerow(
                [
                    obs.hour.isoformat(),
                    obs.node.name,
                    obs.direction.value,
                    *(int(obs.counts.counts[cat]) for cat in CATEGORY_ORDER),
                    int(obs.counts.total),
                ]
            )


def write_routing_csv(
    path: str | Path,
    observations: list[RoutingReportObservation],
    sentinel: str = CENSOR_SENTINEL,
) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(ROUTING_HEADER)
        for obs in observations:
            flow = sentinel if obs.censored else str(int(obs.people_flow))
            writer.writerow([obs.hour.isoformat(), obs.node.name, flow, obs.road_tag.value])


def _join_rows(
    tollbooth: list[TollboothObservation],
    routing: list[RoutingReportObservation],
) -> list[tuple[TollboothObservation, RoutingReportObservation]]:
    """Inner join on (node key, hour), censored routing rows dropped."""
    index: dict[tuple[str, object], RoutingReportObservation] = {}
    for obs in routing:
        key = (obs.node.name, obs.hour.timestamp)
        if key in index:
            raise DataError(f"duplicate routing row for node {obs.node.name!r} at {obs.hour.isoformat()}")
        index[key] = obs
    pairs = []
    for tb in tollbooth:
        rt = index.get((tb.join_key(), tb.hour.timestamp))
        if rt is not None and not rt.censored:
            pairs.append((tb, rt))
    pairs.sort(key=lambda pair: (pair[0].hour.timestamp, pair[0].join_key()))
    return pairs


def build_dataset(
    tollbooth: list[TollboothObservation],
    routing: list[RoutingReportObservation],
    valid_fraction: float = 0.2,
) -> FusionDataset:
    """Join the two sources and split chronologically.

    Censored routing rows never enter the dataset: a suppressed flow is not
    a usable supervised example and would distort validation metrics the
    same way it would distort training. The final ``valid_fraction`` of the
    distinct timestamps forms the validation partition.
    """
    if not 0 < valid_fraction < 1:
        raise ConfigError(f"valid_fraction must be in (0, 1), got {valid_fraction}")
    pairs = _join_rows(tollbooth, routing)
    if not pairs:
        raise DataError("no overlapping (node, hour) pairs between tollbooth and routing data")
    timestamps = sorted({tb.hour.timestamp for tb, _ in pairs})
    n_valid_ts = max(1, round(valid_fraction * len(timestamps)))
    n_train_ts = len(timestamps) - n_valid_ts
    if n_train_ts < 1:
        raise DataError(f"dataset spans too few hours ({len(timestamps)}) for the requested split")
    cutoff = timestamps[n_train_ts]
    X = np.empty((len(pairs), len(FEATURE_NAMES)), dtype=np.float64)
    Y = np.empty((len(pairs), len(TARGET_NAMES)), dtype=np.float64)
    node_keys: list[str] = []
    hours: list[HourKey] = []
    split_index = 0
    for i, (tb, rt) in enumerate(pairs):
        X[i] = feature_vector(rt).to_array()
        Y[i, 0] = tb.counts.total
        for j, cat in enumerate(CATEGORY_ORDER):
            Y[i, 1 + j] = tb.counts.counts[cat]
        node_keys.append(tb.join_key())
        hours.append(tb.hour)
        if tb.hour.timestamp < cutoff:
            split_index = i + 1
    return FusionDataset(X=X, Y=Y, node_keys=node_keys, hours=hours, split_index=split_index)


@dataclass(frozen=True)
class BiasProfile:
    """Systematic distortion applied to synthetic mobility reports.

    ``gains`` scales the latent vehicle total per road tag (values above 1
    overrepresent that road class), ``noise_scale`` sets the additive noise
    sigma as a fraction of the scaled flow, and flows below
    ``censor_threshold`` are suppressed to zero.
    """

    gains: dict[RoadTag, float]
    noise_scale: float = 0.0
    censor_threshold: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        for tag in RoadTag:
            gain = self.gains.get(tag)
            if gain is None:
                raise ConfigError(f"bias profile missing gain for {tag.value}")
            if gain <= 0:
                raise ConfigError(f"gain for {tag.value} must be positive, got {gain}")
        if self.noise_scale < 0:
            raise ConfigError("noise_scale must be non-negative")
        if self.censor_threshold < 0:
            raise ConfigError("censor_threshold must be non-negative")

    @classmethod
    def identity(cls, seed: int = 0) -> "BiasProfile":
        return cls(gains={tag: 1.0 for tag in RoadTag}, seed=seed)


# Fixed per-node length-band compositions: mostly short vehicles, with the
# heavy-traffic mix varying a little from node to node.
_BASE_COMPOSITION = np.array([0.78, 0.075, 0.065, 0.03, 0.035, 0.015])

_SYNTH_START = "2023-11-06T00:00"  # a Monday


def _node_composition(index: int) -> np.ndarray:
    tilt = 1.0 + 0.25 * math.sin(1.7 * index)
    comp = _BASE_COMPOSITION.copy()
    comp[1:] *= tilt
    comp[0] = 1.0 - comp[1:].sum()
    return comp


def _diurnal_shape(hour: int, weekend: bool) -> float:
    if weekend:
        return 0.24 + 0.36 * math.exp(-(((hour - 13.5) / 3.8) ** 2))
    morning = 0.55 * math.exp(-(((hour - 8.0) / 2.1) ** 2))
    evening = 0.70 * math.exp(-(((hour - 16.5) / 2.7) ** 2))
    return 0.30 + morning + evening


def generate_synthetic(
    network: NetworkConfig,
    days: int,
    profile: BiasProfile,
) -> tuple[list[TollboothObservation], list[RoutingReportObservation]]:
    """Generate paired synthetic datasets with a known bias structure.

    Stations produce tollbooth counts plus a routing report; inferred
    destinations produce routing reports only. Counts follow a smooth
    diurnal/weekly profile scaled per node; mobility flows are the biased,
    noisy, censored view of the same latent traffic. Deterministic given
    ``profile.seed``.
    """
    if days < 1:
        raise ConfigError(f"days must be >= 1, got {days}")
    rng = np.random.default_rng(profile.seed)
    start = make_hour_key(_SYNTH_START).timestamp
    hours = [make_hour_key(start + timedelta(hours=i)) for i in range(days * 24)]

    tollbooth_rows: list[TollboothObservation] = []
    routing_rows: list[RoutingReportObservation] = []

    for node_index, node in enumerate(network.nodes):
        comp = _node_composition(node_index)
        is_station = node.node.kind is not NodeKind.INFERRED_DESTINATION
        series: list[Direction] = (
            [Direction(d) for d in node.directions] if node.directions else [Direction.UNDIRECTED]
        )
        gain = profile.gains[node.road_tag]
        for series_index, direction in enumerate(series):
            # Directional series of one station get slightly different scales.
            scale = node.scale * (1.0 - 0.12 * series_index)
            for hour in hours:
                intensity = scale * _diurnal_shape(hour.hour_of_day, hour.is_weekend)
                counts = rng.poisson(np.maximum(comp * intensity, 0.0)).astype(float)
                total = float(counts.sum())
                noise = rng.normal(0.0, profile.noise_scale * gain * total) if total > 0 else 0.0
                flow = max(0, int(round(gain * total + noise)))
                censored = flow < profile.censor_threshold
                key = node.node.name if direction is Direction.UNDIRECTED else f"{node.node.name}|{direction.value}"
                if is_station:
                    tollbooth_rows.append(
                        TollboothObservation(
                            node=node.node,
                            direction=direction,
                            hour=hour,
                            counts=CountsByCategory.from_categories(
                                dict(zip(CATEGORY_ORDER, counts))
                            ),
                        )
                    )
                routing_rows.append(
                    RoutingReportObservation(
                        node=NodeId(name=key, kind=node.node.kind),
                        hour=hour,
                        people_flow=0.0 if censored else float(flow),
                        road_tag=node.road_tag,
                        censored=censored,
                    )
                )
    return tollbooth_rows, routing_rows


def difference_series(
    tollbooth: list[TollboothObservation],
    routing: list[RoutingReportObservation],
) -> dict[tuple[str, int], float]:
    """Mean (tollbooth total - people_flow) per node and hour of day.

    Positive cells mean the ground truth exceeds the mobility estimate.
    Joined like build_dataset, so censored rows are excluded; cells with no
    joined rows are simply absent.
    """
    pairs = _join_rows(tollbooth, routing)
    sums: dict[tuple[str, int], list[float]] = {}
    for tb, rt in pairs:
        cell = (tb.join_key(), tb.hour.hour_of_day)
        sums.setdefault(cell, []).append(tb.counts.total - rt.people_flow)
    return {cell: sum(vals) / len(vals) for cell, vals in sorted(sums.items())}


def write_difference_csv(path: str | Path, table: dict[tuple[str, int], float]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["node", "hour_of_day", "mean_diff"])
        for (node, hour), diff in table.items():
            writer.writerow([node, hour, repr(diff)])
