"""NetFlow CSV ingestion: schema-driven parsing of flow records with exact reject accounting."""

from __future__ import annotations

import gzip
import io
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import IO, Iterable, Iterator, Optional

logger = logging.getLogger("flowsleuth.ingest")

DEFAULT_COLUMNS = (
    "end_time", "duration", "src_ip", "dst_ip", "src_port", "dst_port",
    "protocol", "tcp_flags", "packets", "bytes", "label",
)
DEFAULT_TIMESTAMP_FORMAT = "%Y-%m-%d %H:%M:%S"

# Columns that must be present in every schema; tcp_flags and label have defaults.
_REQUIRED_COLUMNS = frozenset(
    ("end_time", "duration", "src_ip", "dst_ip", "src_port", "dst_port",
     "protocol", "packets", "bytes")
)
_OPTIONAL_COLUMNS = frozenset(("tcp_flags", "label"))

# TCP flag letters -> bit in the 8-bit mask (CWR ECE URG ACK PSH RST SYN FIN).
_FLAG_BITS = {
    "C": 128, "E": 64, "U": 32, "A": 16, "P": 8, "R": 4, "S": 2, "F": 1,
    "c": 128, "e": 64, "u": 32, "a": 16, "p": 8, "r": 4, "s": 2, "f": 1,
}
_FLAG_LETTERS = ("C", "E", "U", "A", "P", "R", "S", "F")

_PROTO_ALIASES = {"6": "TCP", "17": "UDP", "1": "ICMP", "tcp": "TCP", "udp": "UDP", "icmp": "ICMP"}


class ParseError(ValueError):
    """A single row could not be turned into a FlowRecord."""

    reason = "parse_error"

    def __init__(self, column: str, detail: str = ""):
        self.column = column
        self.detail = detail
        super().__init__(f"{self.reason}({column})" + (f": {detail}" if detail else ""))


class MissingColumn(ParseError):
    reason = "missing_column"


class BadTimestamp(ParseError):
    reason = "bad_timestamp"


class BadNumber(ParseError):
    reason = "bad_number"


class InvariantViolation(ParseError):
    reason = "invariant_violation"


class IngestIoError(IOError):
    """I/O failure mid-stream; carries the statistics gathered so far."""

    def __init__(self, cause: Exception, stats: "IngestStats"):
        self.stats = stats
        super().__init__(str(cause))


class SchemaError(ValueError):
    """Schema definition is inconsistent or incomplete."""


@dataclass(frozen=True)
class FlowRecord:
    """One validated NetFlow entry. Timestamps are epoch seconds (UTC)."""

    __slots__ = ("end_time", "duration", "src_ip", "dst_ip", "src_port",
                 "dst_port", "protocol", "tcp_flags", "packets", "bytes", "label")

    end_time: float
    duration: float
    src_ip: str
    dst_ip: str
    src_port: int
    dst_port: int
    protocol: str
    tcp_flags: int
    packets: int
    bytes: int
    label: str


@dataclass
class RecordSchema:
    """Column layout of a NetFlow CSV export.

    `time_role` selects whether the time column holds the flow end ("end",
    default) or the flow start ("start"); start times are shifted by the
    duration so FlowRecord.end_time is always the flow end.
    """

    column_order: tuple = DEFAULT_COLUMNS
    delimiter: str = ","
    timestamp_format: str = DEFAULT_TIMESTAMP_FORMAT
    time_role: str = "end"

    def __post_init__(self):
        if len(self.delimiter) != 1:
            raise SchemaError("delimiter must be a single character")
        if self.time_role not in ("end", "start"):
            raise SchemaError(f"time_role must be 'end' or 'start', got {self.time_role!r}")
        cols = list(self.column_order)
        if len(set(cols)) != len(cols):
            raise SchemaError("duplicate column names in schema")
        # "time" is accepted as an alias for the time column.
        cols = ["end_time" if c == "time" else c for c in cols]
        known = _REQUIRED_COLUMNS | _OPTIONAL_COLUMNS
        unknown = [c for c in cols if c not in known]
        if unknown:
            raise SchemaError(f"unknown columns: {unknown}")
        missing = _REQUIRED_COLUMNS - set(cols)
        if missing:
            raise SchemaError(f"schema lacks required columns: {sorted(missing)}")
        self.column_order = tuple(cols)
        self._index = {name: i for i, name in enumerate(cols)}
        self._n_columns = len(cols)
        self._fast_ts = self.timestamp_format == DEFAULT_TIMESTAMP_FORMAT

    @property
    def label_column(self) -> Optional[int]:
        return self._index.get("label")

    @classmethod
    def from_dict(cls, cfg: dict) -> "RecordSchema":
        allowed = {"columns", "delimiter", "timestamp_format", "time_role"}
        unknown = set(cfg) - allowed
        if unknown:
            raise SchemaError(f"unknown schema keys: {sorted(unknown)}")
        kwargs = {}
        if "columns" in cfg:
            kwargs["column_order"] = tuple(cfg["columns"])
        if "delimiter" in cfg:
            kwargs["delimiter"] = cfg["delimiter"]
        if "timestamp_format" in cfg:
            kwargs["timestamp_format"] = cfg["timestamp_format"]
        if "time_role" in cfg:
            kwargs["time_role"] = cfg["time_role"]
        return cls(**kwargs)


@dataclass
class IngestStats:
    """Exact accounting of one ingest run: parsed + rejected == total_lines."""

    total_lines: int = 0
    parsed: int = 0
    rejected: int = 0
    rejection_reasons: Counter = field(default_factory=Counter)

    def merge(self, other: "IngestStats") -> "IngestStats":
        self.total_lines += other.total_lines
        self.parsed += other.parsed
        self.rejected += other.rejected
        self.rejection_reasons.update(other.rejection_reasons)
        return self

    def summary(self) -> str:
        reasons = ", ".join(f"{k}={v}" for k, v in sorted(self.rejection_reasons.items()))
        return (f"lines={self.total_lines} parsed={self.parsed} rejected={self.rejected}"
                + (f" ({reasons})" if reasons else ""))


# Civil-date <-> epoch-day conversion (proleptic Gregorian, no leap seconds).

def _days_from_civil(y: int, m: int, d: int) -> int:
    y -= m <= 2
    era = (y if y >= 0 else y - 399) // 400
    yoe = y - era * 400
    doy = (153 * (m + (-3 if m > 2 else 9)) + 2) // 5 + d - 1
    doe = yoe * 365 + yoe // 4 - yoe // 100 + doy
    return era * 146097 + doe - 719468


def _civil_from_days(z: int):
    z += 719468
    era = (z if z >= 0 else z - 146096) // 146097
    doe = z - era * 146097
    yoe = (doe - doe // 1460 + doe // 36524 - doe // 146096) // 365
    y = yoe + era * 400
    doy = doe - (365 * yoe + yoe // 4 - yoe // 100)
    mp = (5 * doy + 2) // 153
    d = doy - (153 * mp + 2) // 5 + 1
    m = mp + (3 if mp < 10 else -9)
    return y + (m <= 2), m, d


def parse_timestamp(text: str, timestamp_format: str = DEFAULT_TIMESTAMP_FORMAT) -> float:
    """Parse a timestamp column into epoch seconds (fractional seconds allowed)."""
    if timestamp_format == DEFAULT_TIMESTAMP_FORMAT:
        # Fast path for "YYYY-MM-DD hh:mm:ss[.fff]".
        try:
            if text[4] != "-" or text[7] != "-" or text[10] != " " or text[13] != ":" or text[16] != ":":
                raise ValueError(text)
            y = int(text[:4])
            mo = int(text[5:7])
            d = int(text[8:10])
            h = int(text[11:13])
            mi = int(text[14:16])
            sec = float(text[17:])
        except (ValueError, IndexError):
            raise BadTimestamp("end_time", text)
        if not (1 <= mo <= 12 and 1 <= d <= 31 and h < 24 and mi < 60 and sec < 61.0):
            raise BadTimestamp("end_time", text)
        return _days_from_civil(y, mo, d) * 86400.0 + h * 3600 + mi * 60 + sec
    if timestamp_format == "epoch":
        try:
            return float(text)
        except ValueError:
            raise BadTimestamp("end_time", text)
    try:
        dt = datetime.strptime(text, timestamp_format)
    except ValueError:
        raise BadTimestamp("end_time", text)
    return dt.replace(tzinfo=timezone.utc).timestamp()


def format_timestamp(t: float) -> str:
    """Inverse of the default timestamp format; fractional seconds kept to 1 us."""
    us_total = round(t * 1e6)
    day, rem = divmod(us_total, 86_400_000_000)
    y, mo, d = _civil_from_days(day)
    sec_us, us = divmod(rem, 1_000_000)
    h, sec_rem = divmod(sec_us, 3600)
    mi, isec = divmod(sec_rem, 60)
    base = f"{y:04d}-{mo:02d}-{d:02d} {h:02d}:{mi:02d}:{isec:02d}"
    if us == 0:
        return base
    return base + f".{us:06d}".rstrip("0")


def parse_tcp_flags(text: str) -> int:
    """Accept nfdump text form ('.A..S.') or a numeric mask; return the 8-bit mask."""
    if not text:
        return 0
    if text.isdigit():
        value = int(text)
    elif text[:2] in ("0x", "0X"):
        try:
            value = int(text, 16)
        except ValueError:
            raise BadNumber("tcp_flags", text)
    else:
        value = 0
        for ch in text:
            if ch == ".":
                continue
            bit = _FLAG_BITS.get(ch)
            if bit is None:
                raise BadNumber("tcp_flags", text)
            value |= bit
        return value
    if not 0 <= value <= 255:
        raise InvariantViolation("tcp_flags", text)
    return value


def format_tcp_flags(mask: int) -> str:
    """nfdump-style text form of a flag mask; 6 chars unless CWR/ECE are set."""
    letters = _FLAG_LETTERS if mask & 0xC0 else _FLAG_LETTERS[2:]
    bits = [128, 64, 32, 16, 8, 4, 2, 1][8 - len(letters):]
    return "".join(l if mask & b else "." for l, b in zip(letters, bits))


def _valid_ip(text: str) -> bool:
    # Cheap structural check; full RFC validation is not needed for keying.
    if "." in text:
        parts = text.split(".")
        if len(parts) != 4:
            return ":" in text  # could be IPv4-mapped IPv6
        for p in parts:
            if not p.isdigit() or len(p) > 3 or int(p) > 255:
                return False
        return True
    if ":" in text:
        return all(c in "0123456789abcdefABCDEF:" for c in text)
    return False


def parse_record(line: str, schema: RecordSchema) -> FlowRecord:
    """Parse one delimited row into a FlowRecord, raising ParseError subclasses."""
    fields = line.rstrip("\r\n").split(schema.delimiter)
    if len(fields) != schema._n_columns:
        raise MissingColumn("*", f"expected {schema._n_columns} columns, got {len(fields)}")
    idx = schema._index

    ts_text = fields[idx["end_time"]]
    t = parse_timestamp(ts_text, schema.timestamp_format)

    try:
        duration = float(fields[idx["duration"]])
    except ValueError:
        raise BadNumber("duration", fields[idx["duration"]])
    if not duration >= 0.0:  # also rejects NaN
        raise InvariantViolation("duration", fields[idx["duration"]])

    src_ip = fields[idx["src_ip"]]
    dst_ip = fields[idx["dst_ip"]]
    if not _valid_ip(src_ip):
        raise InvariantViolation("src_ip", src_ip)
    if not _valid_ip(dst_ip):
        raise InvariantViolation("dst_ip", dst_ip)

    try:
        src_port = int(fields[idx["src_port"]])
    except ValueError:
        raise BadNumber("src_port", fields[idx["src_port"]])
    try:
        dst_port = int(fields[idx["dst_port"]])
    except ValueError:
        raise BadNumber("dst_port", fields[idx["dst_port"]])
    if not (0 <= src_port <= 65535):
        raise InvariantViolation("src_port", str(src_port))
    if not (0 <= dst_port <= 65535):
        raise InvariantViolation("dst_port", str(dst_port))

    proto_raw = fields[idx["protocol"]]
    protocol = _PROTO_ALIASES.get(proto_raw, proto_raw.upper())
    if not protocol:
        raise MissingColumn("protocol")
    if protocol not in ("TCP", "UDP"):
        src_port = dst_port = 0

    flags_i = idx.get("tcp_flags")
    tcp_flags = parse_tcp_flags(fields[flags_i]) if flags_i is not None else 0

    try:
        packets = int(fields[idx["packets"]])
    except ValueError:
        raise BadNumber("packets", fields[idx["packets"]])
    try:
        nbytes = int(fields[idx["bytes"]])
    except ValueError:
        raise BadNumber("bytes", fields[idx["bytes"]])
    if packets < 1:
        raise InvariantViolation("packets", str(packets))
    if nbytes < packets:
        raise InvariantViolation("bytes", f"{nbytes} < packets {packets}")

    label_i = idx.get("label")
    label = fields[label_i] if label_i is not None else ""

    if schema.time_role == "start":
        t += duration

    return FlowRecord(t, duration, src_ip, dst_ip, src_port, dst_port,
                      protocol, tcp_flags, packets, nbytes, label)


def serialize_record(record: FlowRecord, schema: RecordSchema = RecordSchema()) -> str:
    """Render a FlowRecord back to one CSV row under the given schema."""
    t = record.end_time - record.duration if schema.time_role == "start" else record.end_time
    if schema.timestamp_format == "epoch":
        ts = repr(t)
    else:
        ts = format_timestamp(t)
    values = {
        "end_time": ts,
        "duration": _format_float(record.duration),
        "src_ip": record.src_ip,
        "dst_ip": record.dst_ip,
        "src_port": str(record.src_port),
        "dst_port": str(record.dst_port),
        "protocol": record.protocol,
        "tcp_flags": format_tcp_flags(record.tcp_flags),
        "packets": str(record.packets),
        "bytes": str(record.bytes),
        "label": record.label,
    }
    return schema.delimiter.join(values[c] for c in schema.column_order)


def _format_float(x: float) -> str:
    return str(int(x)) if x == int(x) else repr(x)


def stream_records(
    source: Iterable[str] | IO,
    schema: RecordSchema,
    stats: Optional[IngestStats] = None,
    max_logged_rejects: int = 20,
) -> Iterator[FlowRecord]:
    """Yield FlowRecords from newline-delimited rows, never aborting on bad rows.

    An optional header row (first line matching the schema's column names) is
    skipped and not counted. I/O errors raise IngestIoError carrying the stats
    gathered so far; `stats` (if supplied) is filled in place as a side effect.
    """
    if stats is None:
        stats = IngestStats()
    delim = schema.delimiter
    header = [c.strip().lower() for c in schema.column_order]
    first = True
    logged = 0
    iterator = iter(source)
    while True:
        try:
            line = next(iterator)
        except StopIteration:
            return
        except (OSError, UnicodeDecodeError) as exc:
            raise IngestIoError(exc, stats)
        if isinstance(line, bytes):
            line = line.decode("utf-8", errors="replace")
        if first:
            first = False
            cells = [c.strip().lower() for c in line.rstrip("\r\n").split(delim)]
            if cells == header:
                continue
        if not line.strip():
            continue
        stats.total_lines += 1
        try:
            record = parse_record(line, schema)
        except ParseError as exc:
            stats.rejected += 1
            stats.rejection_reasons[exc.reason] += 1
            if logged < max_logged_rejects:
                logger.warning("rejected row %d: %s", stats.total_lines, exc)
                logged += 1
            continue
        stats.parsed += 1
        yield record


def open_flow_file(path: str) -> IO:
    """Open a flow CSV for reading, transparently decompressing gzip (by magic bytes)."""
    raw = open(path, "rb")
    magic = raw.read(2)
    raw.seek(0)
    if magic == b"\x1f\x8b":
        return io.TextIOWrapper(gzip.GzipFile(fileobj=raw), encoding="utf-8")
    return io.TextIOWrapper(raw, encoding="utf-8")
