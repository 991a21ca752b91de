"""Telemetry ingestion: resampling, flow features, normalization, windowing, splits.

Two raw record kinds are supported. SCADA point rows (``PointRecord``) carry a
numeric reading or a discrete state label per entity. Flow records
(``FlowRecord``) are aggregated per node and interval into the NetFlow
feature set, optionally extended with CIP payload statistics.
"""

from __future__ import annotations

import base64
import csv
import json
import math
import warnings
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

OTHER_NODE = "other"

FLOW_FEATURES = (
    "rows_sent", "rows_received", "bytes_sent", "bytes_received",
    "src_port_entropy", "protocol_entropy",
    "n_distinct_sources", "n_distinct_destinations",
)
PAYLOAD_FEATURES = ("cip_byte_entropy", "cip_value_mean", "cip_word_entropy")
EXOGENOUS_FEATURES = ("hour_of_day", "day_of_week", "hour_of_week")


class DataError(ValueError):
    """Malformed or inconsistent input data."""


class SplitError(ValueError):
    """Invalid split configuration."""


# ---------------------------------------------------------------------------
# records and file formats
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PointRecord:
    timestamp: float
    entity: str
    value: float | str


@dataclass(frozen=True)
class FlowRecord:
    ts: float
    src_ip: str
    dst_ip: str
    src_port: int
    proto: str
    frame_len: int
    cip_bytes: bytes | None = None
    cip_values: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.frame_len < 0:
            raise DataError(f"negative frame_len {self.frame_len}")


def parse_timestamp(raw: str) -> float:
    raw = raw.strip()
    try:
        return float(raw)
    except ValueError:
        pass
    try:
        dt = datetime.fromisoformat(raw.replace("Z", "+00:00"))
    except ValueError as exc:
        raise DataError(f"unparseable timestamp {raw!r}") from exc
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.timestamp()


def read_points_csv(path, vocabulary: Iterable[str] | None = None) -> list[PointRecord]:
    """Read ``timestamp,entity,value`` rows.

    Non-numeric values are state labels; when ``vocabulary`` is given, labels
    outside it are rejected.
    """
    vocab = None if vocabulary is None else set(vocabulary)
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != [
                "timestamp", "entity", "value"]:
            raise DataError(f"{path}: expected header timestamp,entity,value")
        for lineno, row in enumerate(reader, start=2):
            raw = row["value"].strip()
            try:
                value: float | str = float(raw)
            except ValueError:
                if vocab is not None and raw not in vocab:
                    raise DataError(f"{path}:{lineno}: state {raw!r} not in vocabulary")
                value = raw
            out.append(PointRecord(parse_timestamp(row["timestamp"]), row["entity"].strip(), value))
    _check_nondecreasing(out, path)
    return out


def _check_nondecreasing(points: Sequence[PointRecord], path) -> None:
    last: dict[str, float] = {}
    for p in points:
        if p.timestamp < last.get(p.entity, -math.inf):
            raise DataError(f"{path}: timestamps decrease for entity {p.entity!r}")
        last[p.entity] = p.timestamp


def format_points_csv(points: Iterable[PointRecord]) -> str:
    lines = ["timestamp,entity,value"]
    for p in points:
        v = p.value if isinstance(p.value, str) else repr(float(p.value))
        lines.append(f"{p.timestamp!r},{p.entity},{v}")
    return "\n".join(lines) + "\n"


def flow_to_json(f: FlowRecord) -> dict:
    d = {"ts": f.ts, "src_ip": f.src_ip, "dst_ip": f.dst_ip, "src_port": f.src_port,
         "proto": f.proto, "frame_len": f.frame_len}
    if f.cip_bytes is not None:
        d["cip_bytes"] = base64.b64encode(f.cip_bytes).decode("ascii")
    if f.cip_values is not None:
        d["cip_values"] = list(f.cip_values)
    return d


def flow_from_json(d: dict) -> FlowRecord:
    try:
        cip = d.get("cip_bytes")
        vals = d.get("cip_values")
        return FlowRecord(
            ts=float(d["ts"]), src_ip=str(d["src_ip"]), dst_ip=str(d["dst_ip"]),
            src_port=int(d["src_port"]), proto=str(d["proto"]), frame_len=int(d["frame_len"]),
            cip_bytes=None if cip is None else base64.b64decode(cip),
            cip_values=None if vals is None else tuple(float(v) for v in vals),
        )
    except KeyError as exc:
        raise DataError(f"flow record missing field {exc}") from exc


def read_flows_jsonl(path) -> list[FlowRecord]:
    with open(path, encoding="utf-8") as fh:
        return [flow_from_json(json.loads(line)) for line in fh if line.strip()]


def format_flows_jsonl(flows: Iterable[FlowRecord]) -> str:
    return "".join(json.dumps(flow_to_json(f)) + "\n" for f in flows)


@dataclass
class NodeMap:
    """IP address to node name; unmapped IPs fold into ``other``."""

    mapping: dict[str, str]

    @property
    def nodes(self) -> list[str]:
        seen = list(dict.fromkeys(v for v in self.mapping.values() if v != OTHER_NODE))
        return seen + [OTHER_NODE]

    def node_of(self, ip: str) -> str:
        return self.mapping.get(ip, OTHER_NODE)

    @classmethod
    def read(cls, path) -> "NodeMap":
        mapping = {}
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise DataError(f"{path}:{lineno}: expected 'ip = node'")
                ip, node = (s.strip() for s in line.split("=", 1))
                mapping[ip] = node
        return cls(mapping)

    def format(self) -> str:
        return "".join(f"{ip} = {node}\n" for ip, node in self.mapping.items())


# ---------------------------------------------------------------------------
# features
# ---------------------------------------------------------------------------

def shannon_entropy(counts, base: float = 2.0) -> float:
    """Entropy of a multiset given as counts (a Counter, mapping or sequence)."""
    if isinstance(counts, dict):
        counts = list(counts.values())
    n = np.asarray(list(counts), dtype=np.float64)
    if (n < 0).any():
        raise ValueError("counts must be nonnegative")
    n = n[n > 0]
    if n.size <= 1:
        return 0.0
    p = n / n.sum()
    return float(-(p * np.log(p)).sum() / math.log(base))


def aggregate_flows(flows: Iterable[FlowRecord], node_map: NodeMap,
                    payload: bool = False) -> dict[str, np.ndarray]:
    """Per-node NetFlow feature vectors for one interval.

    Sent/received are from the source/destination node's point of view.
    Source-port entropy is over the node's outgoing flows, protocol entropy
    over every flow touching the node. CIP statistics use the node's
    outgoing flows; a CIP word is one decoded field value.
    """
    nodes = node_map.nodes
    rows_s = Counter()
    rows_r = Counter()
    bytes_s = Counter()
    bytes_r = Counter()
    ports: dict[str, Counter] = defaultdict(Counter)
    protos: dict[str, Counter] = defaultdict(Counter)
    srcs: dict[str, set] = defaultdict(set)
    dsts: dict[str, set] = defaultdict(set)
    cip_bytes: dict[str, Counter] = defaultdict(Counter)
    cip_vals: dict[str, list] = defaultdict(list)
    for f in flows:
        a, b = node_map.node_of(f.src_ip), node_map.node_of(f.dst_ip)
        rows_s[a] += 1
        rows_r[b] += 1
        bytes_s[a] += f.frame_len
        bytes_r[b] += f.frame_len
        ports[a][f.src_port] += 1
        protos[a][f.proto] += 1
        if b != a:
            protos[b][f.proto] += 1
        dsts[a].add(f.dst_ip)
        srcs[b].add(f.src_ip)
        if payload:
            if f.cip_bytes:
                cip_bytes[a].update(f.cip_bytes)
            if f.cip_values:
                cip_vals[a].extend(f.cip_values)
    width = len(FLOW_FEATURES) + (len(PAYLOAD_FEATURES) if payload else 0)
    out = {}
    for n in nodes:
        v = np.zeros(width)
        v[:8] = (rows_s[n], rows_r[n], bytes_s[n], bytes_r[n],
                 shannon_entropy(ports[n]), shannon_entropy(protos[n]),
                 len(srcs[n]), len(dsts[n]))
        if payload:
            vals = cip_vals[n]
            v[8] = shannon_entropy(cip_bytes[n])
            v[9] = float(np.mean(vals)) if vals else 0.0
            v[10] = shannon_entropy(Counter(vals))
        out[n] = v
    return out


def exogenous_features(timestamp: float) -> np.ndarray:
    """(hour_of_day/23, day_of_week/6, hour_of_week/167) in UTC, Monday = 0."""
    dt = datetime.fromtimestamp(timestamp, tz=timezone.utc)
    dow = dt.weekday()
    return np.array([dt.hour / 23.0, dow / 6.0, (dow * 24 + dt.hour) / 167.0])


# ---------------------------------------------------------------------------
# resampling
# ---------------------------------------------------------------------------

@dataclass
class RegularSeries:
    """Per-entity channels on a regular time grid.

    ``columns[entity][channel]`` is a float array of length T, or a list of
    state labels for discrete point entities (channel ``"state"``).
    """

    times: np.ndarray
    interval: float
    columns: dict[str, dict[str, object]] = field(default_factory=dict)

    def __len__(self):
        return len(self.times)

    @property
    def entities(self) -> list[str]:
        return list(self.columns)

    def slice(self, start: int, stop: int) -> "RegularSeries":
        cols = {e: {c: v[start:stop] for c, v in ch.items()} for e, ch in self.columns.items()}
        return RegularSeries(self.times[start:stop], self.interval, cols)

    def merge(self, other: "RegularSeries") -> "RegularSeries":
        if len(self) != len(other) or not np.array_equal(self.times, other.times):
            raise DataError("cannot merge series on different time grids")
        clash = set(self.columns) & set(other.columns)
        if clash:
            raise DataError(f"entity names present in both series: {sorted(clash)}")
        return RegularSeries(self.times, self.interval, {**self.columns, **other.columns})


def _grid(timestamps: Sequence[float], interval: float, start, end) -> tuple[float, int]:
    if interval <= 0:
        raise ValueError("interval must be > 0")
    t0 = math.floor(min(timestamps) / interval) * interval if start is None else float(start)
    if end is None:
        n = int(math.floor((max(timestamps) - t0) / interval)) + 1
    else:
        n = int(math.ceil((float(end) - t0) / interval))
    return t0, max(n, 0)


def resample_points(records: Sequence[PointRecord], interval: float = 10.0,
                    start: float | None = None, end: float | None = None) -> RegularSeries:
    """Mean of numeric readings, last observed state for labels, per bucket.

    Buckets are ``[t0 + k*interval, t0 + (k+1)*interval)``. Empty buckets
    carry the previous value forward; buckets before an entity's first
    reading take its first value.
    """
    if not records:
        return RegularSeries(np.zeros(0), interval, {})
    t0, T = _grid([r.timestamp for r in records], interval, start, end)
    sums: dict[str, np.ndarray] = {}
    cnts: dict[str, np.ndarray] = {}
    last: dict[str, list] = {}
    discrete = {r.entity for r in records if isinstance(r.value, str)}
    for r in records:
        k = int(math.floor((r.timestamp - t0) / interval))
        if not 0 <= k < T:
            continue
        if r.entity in discrete:
            last.setdefault(r.entity, [None] * T)[k] = str(r.value)
        else:
            if r.entity not in sums:
                sums[r.entity] = np.zeros(T)
                cnts[r.entity] = np.zeros(T)
            sums[r.entity][k] += float(r.value)
            cnts[r.entity][k] += 1
    cols: dict[str, dict[str, object]] = {}
    for e in dict.fromkeys(r.entity for r in records):
        if e in discrete:
            if e in last:
                cols[e] = {"state": _ffill_labels(last[e])}
        elif e in sums:
            with np.errstate(invalid="ignore", divide="ignore"):
                v = sums[e] / cnts[e]
            cols[e] = {"value": _ffill(v)}
    return RegularSeries(t0 + interval * np.arange(T), interval, cols)


def _ffill(v: np.ndarray) -> np.ndarray:
    v = v.copy()
    ok = ~np.isnan(v)
    if not ok.any():
        return np.zeros_like(v)
    idx = np.where(ok, np.arange(len(v)), 0)
    np.maximum.accumulate(idx, out=idx)
    first = np.argmax(ok)
    out = v[idx]
    out[:first] = v[first]
    return out


def _ffill_labels(v: list) -> list:
    first = next(x for x in v if x is not None)
    out, cur = [], first
    for x in v:
        if x is not None:
            cur = x
        out.append(cur)
    return out


def resample_flows(flows: Sequence[FlowRecord], node_map: NodeMap, interval: float = 10.0,
                   payload: bool = False, start: float | None = None,
                   end: float | None = None) -> RegularSeries:
    """Aggregate flows per interval; intervals without traffic emit zeros."""
    if not flows and (start is None or end is None):
        return RegularSeries(np.zeros(0), interval, {})
    t0, T = _grid([f.ts for f in flows] or [start], interval, start, end)
    buckets: dict[int, list[FlowRecord]] = defaultdict(list)
    for f in flows:
        k = int(math.floor((f.ts - t0) / interval))
        if 0 <= k < T:
            buckets[k].append(f)
    names = FLOW_FEATURES + (PAYLOAD_FEATURES if payload else ())
    mats = {n: np.zeros((T, len(names))) for n in node_map.nodes}
    for k, fs in buckets.items():
        for n, v in aggregate_flows(fs, node_map, payload).items():
            mats[n][k] = v
    cols = {n: {name: m[:, j].copy() for j, name in enumerate(names)} for n, m in mats.items()}
    return RegularSeries(t0 + interval * np.arange(T), interval, cols)


def resample(records, interval: float = 10.0, **kw) -> RegularSeries:
    """Dispatch to point or flow resampling by record type."""
    records = list(records)
    if records and isinstance(records[0], FlowRecord):
        if "node_map" not in kw:
            raise ValueError("flow records need a node_map")
        return resample_flows(records, interval=interval, **kw)
    return resample_points(records, interval=interval, **kw)


# ---------------------------------------------------------------------------
# schema and normalization
# ---------------------------------------------------------------------------

@dataclass
class Channel:
    name: str
    kind: str                    # "continuous" or "boolean"
    source: str                  # raw column, "state=<label>", or "exo:<name>"
    min: float | None = None
    max: float | None = None
    constant: bool = False
    scored: bool = True


@dataclass
class FeatureSchema:
    nodes: list[str]
    channels: list[list[Channel]]
    interval: float = 10.0
    exogenous: bool = False

    @property
    def n_features(self) -> int:
        return max(len(c) for c in self.channels)

    @property
    def continuous_index(self) -> list[tuple[int, int]]:
        return [(i, f) for i, chs in enumerate(self.channels) for f, c in enumerate(chs)
                if c.kind == "continuous" and c.scored]

    @property
    def boolean_index(self) -> list[tuple[int, int]]:
        return [(i, f) for i, chs in enumerate(self.channels) for f, c in enumerate(chs)
                if c.kind == "boolean" and c.scored]

    def masks(self) -> tuple[np.ndarray, np.ndarray]:
        """(N, F) Boolean masks of scored continuous and scored Boolean channels."""
        shape = (len(self.nodes), self.n_features)
        cont, boo = np.zeros(shape, bool), np.zeros(shape, bool)
        for i, f in self.continuous_index:
            cont[i, f] = True
        for i, f in self.boolean_index:
            boo[i, f] = True
        return cont, boo

    @property
    def constant_channels(self) -> list[str]:
        return [f"{self.nodes[i]}.{c.name}" for i, chs in enumerate(self.channels)
                for c in chs if c.constant]

    def to_json(self) -> dict:
        return {
            "version": 1,
            "interval": self.interval,
            "exogenous": self.exogenous,
            "nodes": [
                {"name": n, "channels": [c.__dict__.copy() for c in chs]}
                for n, chs in zip(self.nodes, self.channels)
            ],
        }

    @classmethod
    def from_json(cls, d: dict) -> "FeatureSchema":
        if d.get("version") != 1:
            raise DataError(f"unsupported schema version {d.get('version')!r}")
        return cls(
            nodes=[n["name"] for n in d["nodes"]],
            channels=[[Channel(**c) for c in n["channels"]] for n in d["nodes"]],
            interval=float(d["interval"]),
            exogenous=bool(d["exogenous"]),
        )

    def save(self, path) -> None:
        from .io_utils import atomic_write_json
        atomic_write_json(Path(path), self.to_json())

    @classmethod
    def load(cls, path) -> "FeatureSchema":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def fit_normalization(train: RegularSeries, exogenous: bool = False,
                      vocabulary: dict[str, Sequence[str]] | None = None) -> FeatureSchema:
    """Build the channel layout and min/max statistics from training data only.

    Discrete entities become one-hot Boolean channels over their declared
    vocabulary, or over the states seen in training when none is declared.
    """
    if len(train) == 0:
        raise DataError("cannot fit normalization on an empty training series")
    vocabulary = vocabulary or {}
    nodes, channels = [], []
    for entity, cols in train.columns.items():
        chs = []
        for cname, col in cols.items():
            if cname == "state":
                states = vocabulary.get(entity) or sorted(set(col))
                chs += [Channel(f"state={s}", "boolean", f"state={s}") for s in states]
            else:
                v = np.asarray(col, dtype=np.float64)
                lo, hi = float(v.min()), float(v.max())
                chs.append(Channel(cname, "continuous", cname, lo, hi, constant=lo == hi))
        if exogenous:
            chs += [Channel(n, "continuous", f"exo:{n}", 0.0, 1.0, scored=False)
                    for n in EXOGENOUS_FEATURES]
        nodes.append(entity)
        channels.append(chs)
    return FeatureSchema(nodes, channels, train.interval, exogenous)


def normalize_value(x, lo: float, hi: float):
    """Min-max scale without clamping; a constant training channel maps to 0."""
    if hi == lo:
        return np.zeros_like(np.asarray(x, dtype=np.float64))
    return (np.asarray(x, dtype=np.float64) - lo) / (hi - lo)


def transform(series: RegularSeries, schema: FeatureSchema) -> np.ndarray:
    """Encode a series into a (T, N, F) array; unused channel slots are 0."""
    missing = [n for n in schema.nodes if n not in series.columns]
    if missing:
        raise DataError(f"series lacks schema entities: {missing}")
    T = len(series)
    out = np.zeros((T, len(schema.nodes), schema.n_features))
    exo = (np.array([exogenous_features(t) for t in series.times])
           if schema.exogenous and T else np.zeros((T, 3)))
    for i, (node, chs) in enumerate(zip(schema.nodes, schema.channels)):
        cols = series.columns[node]
        for f, c in enumerate(chs):
            if c.source.startswith("exo:"):
                out[:, i, f] = exo[:, EXOGENOUS_FEATURES.index(c.source[4:])]
            elif c.source.startswith("state="):
                label = c.source[len("state="):]
                out[:, i, f] = [s == label for s in cols["state"]]
            else:
                if c.source not in cols:
                    raise DataError(f"series lacks channel {node}.{c.source}")
                out[:, i, f] = normalize_value(cols[c.source], c.min, c.max)
    return out


# ---------------------------------------------------------------------------
# windows and splits
# ---------------------------------------------------------------------------

@dataclass
class WindowSet:
    """Sliding windows: inputs ``x`` (n, W, N, F) and next-step targets ``y`` (n, N, F)."""

    x: np.ndarray
    y: np.ndarray
    target_index: np.ndarray
    times: np.ndarray
    window: int

    def __len__(self):
        return len(self.target_index)

    @property
    def start_index(self) -> np.ndarray:
        return self.target_index - self.window

    def subset(self, idx) -> "WindowSet":
        return WindowSet(self.x[idx], self.y[idx], self.target_index[idx], self.times[idx],
                         self.window)


def make_windows(data: np.ndarray, window: int, times: np.ndarray | None = None,
                 stride: int = 1) -> WindowSet:
    """Window ``k`` covers steps ``[k, k+W-1]`` and targets step ``k+W``."""
    if stride != 1:
        raise ValueError("only stride 1 is supported")
    data = np.asarray(data, dtype=np.float64)
    T = len(data)
    times = np.arange(T, dtype=np.float64) if times is None else np.asarray(times, np.float64)
    n = max(T - window, 0)
    tgt = np.arange(window, window + n)
    if n == 0:
        empty = np.zeros((0, window) + data.shape[1:])
        return WindowSet(empty, np.zeros((0,) + data.shape[1:]), tgt, times[tgt], window)
    view = np.lib.stride_tricks.sliding_window_view(data, window, axis=0)[:n]
    x = np.moveaxis(view, -1, 1).copy()
    return WindowSet(x, data[tgt].copy(), tgt, times[tgt], window)


def _partition(target_index: np.ndarray, window: int,
               fractions: Sequence[float]) -> list[np.ndarray]:
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1) > 1e-9:
        raise SplitError(f"fractions must be 3 nonnegative values summing to 1, got {fractions}")
    n = len(target_index)
    c1 = int(round(n * fractions[0]))
    c2 = int(round(n * (fractions[0] + fractions[1])))
    parts = [np.arange(0, c1), np.arange(c1, c2), np.arange(c2, n)]
    out = [parts[0]]
    for prev, cur in zip(parts, parts[1:]):
        if len(prev) == 0:
            out.append(cur)
            continue
        last_step = target_index[out[-1]].max() if len(out[-1]) else target_index[prev].max()
        cur = cur[target_index[cur] - window > last_step]
        out.append(cur)
    for name, p in zip(("train", "calibration", "test"), out):
        if len(p) == 0:
            raise SplitError(f"{name} partition is empty for fractions {tuple(fractions)}")
    return out


@dataclass
class DatasetSplit:
    train: WindowSet
    calibration: WindowSet
    test: WindowSet
    fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)


def split_temporal(windows: WindowSet,
                   fractions: Sequence[float] = (0.8, 0.1, 0.1)) -> DatasetSplit:
    """Contiguous order-preserving split.

    A calibration/test window whose inputs reach back into the previous
    partition's span is dropped, so every partition's steps strictly follow
    the previous one's.
    """
    a, b, c = _partition(windows.target_index, windows.window, fractions)
    return DatasetSplit(windows.subset(a), windows.subset(b), windows.subset(c), tuple(fractions))


def train_cutoff(n_steps: int, window: int, fractions: Sequence[float] = (0.8, 0.1, 0.1)) -> int:
    """Last step index (inclusive) seen by the training partition."""
    tgt = np.arange(window, n_steps)
    train, _, _ = _partition(tgt, window, fractions)
    return int(tgt[train].max())


def build_dataset(series: RegularSeries, window: int = 6,
                  fractions: Sequence[float] = (0.8, 0.1, 0.1), exogenous: bool = False,
                  vocabulary: dict[str, Sequence[str]] | None = None
                  ) -> tuple[DatasetSplit, FeatureSchema]:
    """Fit the schema on the training span only, then encode, window and split."""
    if len(series) < window + 1:
        raise DataError(f"series of length {len(series)} too short for window {window}")
    cut = train_cutoff(len(series), window, fractions)
    schema = fit_normalization(series.slice(0, cut + 1), exogenous, vocabulary)
    if schema.constant_channels:
        warnings.warn(f"constant training channels: {schema.constant_channels}", stacklevel=2)
    data = transform(series, schema)
    return split_temporal(make_windows(data, window, series.times), fractions), schema
