"""Per-(source IP, time window) aggregation of flow records into 53 features.

Windows are aligned to a stride grid (default: tumbling 3-minute windows).
Windows with fewer than `min_flows` flows are dropped. The canonical feature
order is: 10 moment features (mean + population std of duration, packets,
bytes, packet rate, byte rate), 5 entropies (protocol, dst IP, src port,
dst port, TCP flags), then source- and destination-side flow proportions for
19 well-known application ports.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from typing import Iterable, Mapping, NamedTuple, Optional, Sequence

import numpy as np

from .ingest import FlowRecord

DEFAULT_WINDOW_SECONDS = 180.0
DEFAULT_MIN_FLOWS = 10
EPS_DURATION = 1e-3   # floor for zero-duration flows when computing rates
EPS_STD = 1e-6        # floor for degenerate standard deviations

APP_PORTS = (
    (21, "ftp"), (22, "ssh"), (23, "telnet"), (25, "smtp"), (53, "dns"),
    (80, "http"), (88, "kerberos"), (110, "pop3"), (123, "ntp"),
    (135, "winrpc"), (139, "netbios"), (143, "imap"), (161, "snmp"),
    (443, "https"), (445, "smb"), (3306, "mysql"), (3389, "rdp"),
    (6667, "irc"), (8080, "http_alt"),
)

_MOMENT_QUANTITIES = ("duration", "packets", "bytes", "packet_rate", "byte_rate")

FEATURE_NAMES = tuple(
    [f"{stat}_{q}" for q in _MOMENT_QUANTITIES for stat in ("mean", "std")]
    + [f"entropy_{h}" for h in ("protocol", "dst_ip", "src_port", "dst_port", "tcp_flags")]
    + [f"prop_{side}_{name}_{port}" for port, name in APP_PORTS for side in ("src", "dst")]
)
N_FEATURES = len(FEATURE_NAMES)  # 53

# Normalization mode per feature: moments are z-scored, entropies min-max
# scaled, proportions already live in [0, 1].
FEATURE_MODES = tuple(["zscore"] * 10 + ["minmax"] * 5 + ["identity"] * 38)

_APP_PORT_INDEX = {port: i for i, (port, _) in enumerate(APP_PORTS)}


class EmptyHistogram(ValueError):
    """Entropy of a histogram with no mass is undefined."""


class EmptyDataset(ValueError):
    """Operation requires at least one feature vector."""


class FeatureFileError(ValueError):
    """Feature/gradient file is malformed or has the wrong magic/version."""


def feature_list_hash(names: Sequence[str] = FEATURE_NAMES) -> str:
    return hashlib.sha256("\n".join(names).encode("utf-8")).hexdigest()


class WindowKey(NamedTuple):
    src_ip: str
    window_start: float


def assign_window(record: FlowRecord, window_len: float = DEFAULT_WINDOW_SECONDS,
                  stride: Optional[float] = None) -> list[WindowKey]:
    """All windows whose [start, start + window_len) interval contains the record.

    With stride == window_len (the default) this is exactly one key.
    """
    if stride is None:
        stride = window_len
    if window_len <= 0 or stride <= 0:
        raise ValueError("window_len and stride must be positive")
    n = window_len / stride
    if abs(n - round(n)) > 1e-9:
        raise ValueError("stride must divide window_len")
    t = record.end_time
    base = math.floor(t / stride) * stride
    return [
        WindowKey(record.src_ip, base - i * stride)
        for i in range(int(round(n)) - 1, -1, -1)
        if base - i * stride > t - window_len
    ]


class WindowAccumulator:
    """Order-insensitive, mergeable statistics for one (source IP, window) pair.

    Moments are kept as Welford (mean, M2) pairs so merging shards and
    finalizing stds stay numerically exact; flow-level rates use
    packets / max(duration, EPS_DURATION).
    """

    __slots__ = ("key", "flow_count", "_means", "_m2s",
                 "protocol_counts", "dst_ip_counts", "src_port_counts",
                 "dst_port_counts", "tcp_flags_counts", "label_counts")

    def __init__(self, key: WindowKey):
        self.key = key
        self.flow_count = 0
        self._means = [0.0, 0.0, 0.0, 0.0, 0.0]
        self._m2s = [0.0, 0.0, 0.0, 0.0, 0.0]
        self.protocol_counts: dict = {}
        self.dst_ip_counts: dict = {}
        self.src_port_counts: dict = {}
        self.dst_port_counts: dict = {}
        self.tcp_flags_counts: dict = {}
        self.label_counts: dict = {}

    def accumulate(self, record: FlowRecord) -> "WindowAccumulator":
        n = self.flow_count + 1
        self.flow_count = n
        dur = record.duration
        safe_dur = dur if dur > EPS_DURATION else EPS_DURATION
        means = self._means
        m2s = self._m2s
        for i, x in enumerate((dur, record.packets, record.bytes,
                               record.packets / safe_dur, record.bytes / safe_dur)):
            delta = x - means[i]
            means[i] += delta / n
            m2s[i] += delta * (x - means[i])
        for counts, key in (
            (self.protocol_counts, record.protocol),
            (self.dst_ip_counts, record.dst_ip),
            (self.src_port_counts, record.src_port),
            (self.dst_port_counts, record.dst_port),
            (self.tcp_flags_counts, record.tcp_flags),
            (self.label_counts, record.label),
        ):
            counts[key] = counts.get(key, 0) + 1
        return self

    def merge(self, other: "WindowAccumulator") -> "WindowAccumulator":
        """Fold another accumulator for the same key into this one."""
        if other.key != self.key:
            raise ValueError(f"cannot merge accumulators for {self.key} and {other.key}")
        na, nb = self.flow_count, other.flow_count
        if nb == 0:
            return self
        if na == 0:
            self.flow_count = nb
            self._means = list(other._means)
            self._m2s = list(other._m2s)
        else:
            n = na + nb
            for i in range(5):
                delta = other._means[i] - self._means[i]
                self._means[i] += delta * nb / n
                self._m2s[i] += other._m2s[i] + delta * delta * na * nb / n
            self.flow_count = n
        for name in ("protocol_counts", "dst_ip_counts", "src_port_counts",
                     "dst_port_counts", "tcp_flags_counts", "label_counts"):
            mine = getattr(self, name)
            for k, v in getattr(other, name).items():
                mine[k] = mine.get(k, 0) + v
        return self

    def moment_sums(self) -> dict:
        """Per-quantity (sum, sum of squares), recovered from the Welford state."""
        out = {}
        n = self.flow_count
        for i, q in enumerate(_MOMENT_QUANTITIES):
            s = self._means[i] * n
            out[q] = (s, self._m2s[i] + (self._means[i] ** 2) * n)
        return out

    def mean(self, quantity: str) -> float:
        return self._means[_MOMENT_QUANTITIES.index(quantity)]

    def std(self, quantity: str) -> float:
        i = _MOMENT_QUANTITIES.index(quantity)
        if self.flow_count == 0:
            return 0.0
        return math.sqrt(max(self._m2s[i], 0.0) / self.flow_count)


@dataclass
class RawFeatureVector:
    """Un-normalized 53-feature summary of one (source IP, window) pair."""

    key: WindowKey
    values: np.ndarray
    flow_count: int
    label_counts: dict


@dataclass
class FeatureVector:
    """Normalized feature vector; `label` is filled by the evaluation stage."""

    key: WindowKey
    values: np.ndarray
    flow_count: int = 0
    label_counts: dict = field(default_factory=dict)
    label: str = ""


def entropy(counts) -> float:
    """Shannon entropy (bits) of the empirical distribution given by counts."""
    if isinstance(counts, Mapping):
        counts = counts.values()
    total = 0
    acc = 0.0
    for c in counts:
        if c < 0:
            raise ValueError("negative count in histogram")
        if c > 0:
            total += c
            acc += c * math.log2(c)
    if total == 0:
        raise EmptyHistogram("histogram has no mass")
    return math.log2(total) - acc / total


def finalize(acc: WindowAccumulator, min_flows: int = DEFAULT_MIN_FLOWS) -> Optional[RawFeatureVector]:
    """Turn an accumulator into features, or None when under the flow filter."""
    n = acc.flow_count
    if n < min_flows:
        return None
    values = np.empty(N_FEATURES, dtype=np.float64)
    for i in range(5):
        values[2 * i] = acc._means[i]
        values[2 * i + 1] = math.sqrt(max(acc._m2s[i], 0.0) / n)
    values[10] = entropy(acc.protocol_counts)
    values[11] = entropy(acc.dst_ip_counts)
    values[12] = entropy(acc.src_port_counts)
    values[13] = entropy(acc.dst_port_counts)
    values[14] = entropy(acc.tcp_flags_counts)
    base = 15
    for port, idx in _APP_PORT_INDEX.items():
        values[base + 2 * idx] = acc.src_port_counts.get(port, 0) / n
        values[base + 2 * idx + 1] = acc.dst_port_counts.get(port, 0) / n
    return RawFeatureVector(acc.key, values, n, dict(acc.label_counts))


def extract_features(records: Iterable[FlowRecord],
                     window_len: float = DEFAULT_WINDOW_SECONDS,
                     stride: Optional[float] = None,
                     min_flows: int = DEFAULT_MIN_FLOWS) -> tuple[list[RawFeatureVector], int]:
    """Aggregate a record stream; returns (feature vectors, filtered window count).

    Output is sorted by (window_start, src_ip) so results are independent of
    input order and shard partitioning.
    """
    if stride is None:
        stride = window_len
    tumbling = stride == window_len
    accs: dict[WindowKey, WindowAccumulator] = {}
    for record in records:
        if tumbling:
            keys = (WindowKey(record.src_ip, math.floor(record.end_time / stride) * stride),)
        else:
            keys = assign_window(record, window_len, stride)
        for key in keys:
            acc = accs.get(key)
            if acc is None:
                acc = accs[key] = WindowAccumulator(key)
            acc.accumulate(record)
    raws = []
    filtered = 0
    for key in sorted(accs, key=lambda k: (k.window_start, k.src_ip)):
        raw = finalize(accs[key], min_flows)
        if raw is None:
            filtered += 1
        else:
            raws.append(raw)
    return raws, filtered


@dataclass
class Normalizer:
    """Per-feature scaling fitted on training data.

    Modes: 'zscore' (unclipped), 'minmax' (clipped to [0, 1] at apply time),
    'identity'. Degenerate spans and stds are floored at EPS_STD.
    """

    modes: tuple
    mins: np.ndarray
    maxs: np.ndarray
    means: np.ndarray
    stds: np.ndarray

    def to_dict(self) -> dict:
        return {
            "modes": list(self.modes),
            "mins": [float(x) for x in self.mins],
            "maxs": [float(x) for x in self.maxs],
            "means": [float(x) for x in self.means],
            "stds": [float(x) for x in self.stds],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(
            modes=tuple(d["modes"]),
            mins=np.asarray(d["mins"], dtype=np.float64),
            maxs=np.asarray(d["maxs"], dtype=np.float64),
            means=np.asarray(d["means"], dtype=np.float64),
            stds=np.asarray(d["stds"], dtype=np.float64),
        )

    def __eq__(self, other) -> bool:
        return (isinstance(other, Normalizer)
                and self.modes == other.modes
                and np.array_equal(self.mins, other.mins)
                and np.array_equal(self.maxs, other.maxs)
                and np.array_equal(self.means, other.means)
                and np.array_equal(self.stds, other.stds))


def _as_matrix(dataset) -> np.ndarray:
    if isinstance(dataset, np.ndarray):
        mat = np.asarray(dataset, dtype=np.float64)
    else:
        rows = [fv.values for fv in dataset]
        if not rows:
            raise EmptyDataset("no feature vectors to fit on")
        mat = np.asarray(rows, dtype=np.float64)
    if mat.ndim != 2 or mat.shape[0] == 0:
        raise EmptyDataset("no feature vectors to fit on")
    return mat


def fit_normalizer(dataset, modes: Sequence[str] = FEATURE_MODES) -> Normalizer:
    """Fit per-feature statistics on raw feature vectors (population std)."""
    mat = _as_matrix(dataset)
    if mat.shape[1] != len(modes):
        raise ValueError(f"expected {len(modes)} features, got {mat.shape[1]}")
    if not np.isfinite(mat).all():
        raise ValueError("non-finite values in training features")
    stds = mat.std(axis=0)
    return Normalizer(
        modes=tuple(modes),
        mins=mat.min(axis=0),
        maxs=mat.max(axis=0),
        means=mat.mean(axis=0),
        stds=np.maximum(stds, EPS_STD),
    )


def normalize_matrix(values: np.ndarray, norm: Normalizer) -> np.ndarray:
    """Apply a fitted normalizer to a (N, F) matrix of raw features."""
    mat = np.asarray(values, dtype=np.float64)
    out = np.empty_like(mat)
    for j, mode in enumerate(norm.modes):
        col = mat[:, j]
        if mode == "zscore":
            out[:, j] = (col - norm.means[j]) / norm.stds[j]
        elif mode == "minmax":
            span = max(norm.maxs[j] - norm.mins[j], EPS_STD)
            out[:, j] = np.clip((col - norm.mins[j]) / span, 0.0, 1.0)
        elif mode == "identity":
            out[:, j] = col
        else:
            raise ValueError(f"unknown normalization mode {mode!r}")
    return out


def normalize(raw: RawFeatureVector, norm: Normalizer) -> FeatureVector:
    values = normalize_matrix(raw.values[None, :], norm)[0]
    return FeatureVector(raw.key, values, raw.flow_count, dict(raw.label_counts))


# --- Feature / gradient file format -----------------------------------------
#
# magic(4) | version u32 | feature-list sha256 (32 raw bytes) | row_count u64 |
# col_count u32 | header_len u32 + header JSON | float32 LE row-major values |
# meta_len u64 + meta JSON (keys, flow counts, label counts, extras).

FEATURE_MAGIC = b"GEEF"
GRADIENT_MAGIC = b"GEEG"
FILE_VERSION = 1


@dataclass
class FeatureFile:
    """In-memory image of a feature (GEEF) or gradient (GEEG) file."""

    magic: bytes
    feature_names: tuple
    values: np.ndarray              # (N, F) float32
    keys: list                      # list[WindowKey]
    flow_counts: list
    label_counts: list              # list[dict]
    normalizer: Optional[Normalizer]
    config: dict
    extra: dict

    @property
    def feature_list_hash(self) -> str:
        return feature_list_hash(self.feature_names)


def _dump_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def write_feature_file(path: str, values: np.ndarray, keys: Sequence[WindowKey],
                       flow_counts: Sequence[int], label_counts: Sequence[dict],
                       feature_names: Sequence[str] = FEATURE_NAMES,
                       normalizer: Optional[Normalizer] = None,
                       config: Optional[dict] = None,
                       extra: Optional[dict] = None,
                       magic: bytes = FEATURE_MAGIC) -> None:
    mat = np.ascontiguousarray(np.asarray(values, dtype="<f4"))
    if mat.ndim != 2:
        mat = mat.reshape(len(keys), -1)
    n, c = mat.shape
    if not (n == len(keys) == len(flow_counts) == len(label_counts)):
        raise ValueError("values, keys, flow_counts and label_counts must align")
    header = {
        "feature_names": list(feature_names),
        "normalizer": normalizer.to_dict() if normalizer is not None else None,
        "config": config or {},
    }
    meta = {
        "keys": [[k.src_ip, float(k.window_start)] for k in keys],
        "flow_counts": [int(x) for x in flow_counts],
        "label_counts": [dict(lc) for lc in label_counts],
    }
    meta.update(extra or {})
    header_b = _dump_json(header)
    meta_b = _dump_json(meta)
    digest = bytes.fromhex(feature_list_hash(feature_names))
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<I", FILE_VERSION))
        fh.write(digest)
        fh.write(struct.pack("<QI", n, c))
        fh.write(struct.pack("<I", len(header_b)))
        fh.write(header_b)
        fh.write(mat.tobytes())
        fh.write(struct.pack("<Q", len(meta_b)))
        fh.write(meta_b)


def read_feature_file(path: str, expect_magic: Optional[bytes] = None) -> FeatureFile:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 52:
        raise FeatureFileError(f"{path}: truncated file")
    magic = blob[:4]
    if expect_magic is not None and magic != expect_magic:
        raise FeatureFileError(
            f"{path}: expected magic {expect_magic!r}, found {magic!r}")
    if magic not in (FEATURE_MAGIC, GRADIENT_MAGIC):
        raise FeatureFileError(f"{path}: unrecognized magic {magic!r}")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != FILE_VERSION:
        raise FeatureFileError(f"{path}: unsupported version {version}")
    digest = blob[8:40]
    n, c = struct.unpack_from("<QI", blob, 40)
    (header_len,) = struct.unpack_from("<I", blob, 52)
    pos = 56
    header = json.loads(blob[pos:pos + header_len])
    pos += header_len
    nbytes = n * c * 4
    values = np.frombuffer(blob[pos:pos + nbytes], dtype="<f4").reshape(n, c).copy()
    pos += nbytes
    (meta_len,) = struct.unpack_from("<Q", blob, pos)
    pos += 8
    meta = json.loads(blob[pos:pos + meta_len])
    names = tuple(header["feature_names"])
    if bytes.fromhex(feature_list_hash(names)) != digest:
        raise FeatureFileError(f"{path}: feature list does not match stored hash")
    norm = header.get("normalizer")
    extra = {k: v for k, v in meta.items()
             if k not in ("keys", "flow_counts", "label_counts")}
    return FeatureFile(
        magic=magic,
        feature_names=names,
        values=values,
        keys=[WindowKey(ip, ws) for ip, ws in meta["keys"]],
        flow_counts=list(meta["flow_counts"]),
        label_counts=[dict(lc) for lc in meta["label_counts"]],
        normalizer=Normalizer.from_dict(norm) if norm else None,
        config=header.get("config", {}),
        extra=extra,
    )


def write_features_csv(path: str, ff: FeatureFile) -> None:
    """Human-readable export of a feature file."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# flowsleuth-features v1\n")
        fh.write(f"# feature_list_hash: {ff.feature_list_hash}\n")
        fh.write("src_ip,window_start,flow_count," + ",".join(ff.feature_names) + "\n")
        for i, key in enumerate(ff.keys):
            row = ",".join(repr(float(v)) for v in ff.values[i])
            fh.write(f"{key.src_ip},{key.window_start!r},{ff.flow_counts[i]},{row}\n")
