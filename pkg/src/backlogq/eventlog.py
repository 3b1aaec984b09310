"""Ingest and cleanse event-level open/resolve records.

The raw input is a CSV export of a ticketing or vulnerability tracking
system: one row per ticket, with an opening timestamp and an optional
resolution timestamp. Column names differ between exports, so the caller
supplies a mapping from logical names (``id``, ``open``, ``resolve``,
``severity``, ``category``) to the actual header names.

Timestamps are normalized to integer seconds since the Unix epoch (UTC).
Each timestamp column may be ISO-8601 or epoch seconds; the format is
auto-detected from the first parseable value and then enforced for the
whole column.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import IO, Iterable

LOG = logging.getLogger(__name__)

SEVERITIES = ("low", "medium", "high", "unknown")

REQUIRED_MAPPING_KEYS = ("id", "open", "resolve")
OPTIONAL_MAPPING_KEYS = ("severity", "category")


class EventLogError(ValueError):
    """Fatal ingest problem (missing column, unusable stream)."""


@dataclass(frozen=True)
class EventRecord:
    """One opened (and possibly resolved) vulnerability or ticket."""

    id: str
    open_ts: int
    resolve_ts: int | None = None
    severity: str = "unknown"
    category: str | None = None

    @property
    def resolved(self) -> bool:
        return self.resolve_ts is not None


@dataclass(frozen=True)
class EventLog:
    """Records sorted by opening time, plus the covered horizon [t_start, t_end)."""

    records: tuple[EventRecord, ...]
    horizon: tuple[int, int]

    def __post_init__(self) -> None:
        opens = [r.open_ts for r in self.records]
        if any(b < a for a, b in zip(opens, opens[1:])):
            raise EventLogError("records must be sorted by open_ts")

    def __len__(self) -> int:
        return len(self.records)


@dataclass(frozen=True)
class CleansePolicy:
    drop_unresolved: bool = False
    drop_negative_duration: bool = False
    crop: tuple[int, int] | None = None

    def __post_init__(self) -> None:
        if self.crop is not None and not self.crop[0] < self.crop[1]:
            raise EventLogError(f"crop window {self.crop} is empty")


@dataclass
class RejectedRow:
    line_no: int
    raw: str
    reason: str


@dataclass
class ParseResult:
    log: EventLog
    rejects: list[RejectedRow] = field(default_factory=list)


@dataclass
class CleanseReport:
    removed: dict[str, int] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)

    @property
    def total_removed(self) -> int:
        return sum(self.removed.values())


class _ColumnTimestampParser:
    """Parses one timestamp column, locking onto epoch-seconds or ISO-8601."""

    def __init__(self, name: str) -> None:
        self.name = name
        self.format: str | None = None  # "epoch" | "iso"

    def parse(self, text: str) -> int:
        if self.format is None:
            self.format = "epoch" if _looks_numeric(text) else "iso"
        if self.format == "epoch":
            return int(float(text))
        return _parse_iso(text)


def _looks_numeric(text: str) -> bool:
    try:
        float(text)
    except ValueError:
        return False
    return True


def _parse_iso(text: str) -> int:
    cleaned = text.strip()
    if cleaned.endswith(("Z", "z")):
        cleaned = cleaned[:-1] + "+00:00"
    dt = datetime.fromisoformat(cleaned)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return int(dt.timestamp())


def parse_timestamp(text: str) -> int:
    """Parse a single timestamp string (epoch seconds or ISO-8601) to epoch seconds."""
    if _looks_numeric(text):
        return int(float(text))
    return _parse_iso(text)


def _normalize_severity(text: str | None) -> str:
    if text is None:
        return "unknown"
    sev = text.strip().lower()
    return sev if sev in SEVERITIES else "unknown"


def parse_events(source: str | IO[str], mapping: dict[str, str]) -> ParseResult:
    """Parse a CSV stream of open/resolve events into a sorted EventLog.

    ``mapping`` maps the logical keys id/open/resolve (required) and
    severity/category (optional) to CSV header names. Malformed rows are
    collected in the reject list with their line number, never silently
    dropped. Duplicate ids keep the row with the latest resolve timestamp;
    the superseded rows are reported as rejects with reason ``duplicate id``.
    """
    for key in REQUIRED_MAPPING_KEYS:
        if key not in mapping:
            raise EventLogError(f"mapping is missing required key {key!r}")

    stream: IO[str] = io.StringIO(source) if isinstance(source, str) else source
    reader = csv.DictReader(stream)
    if reader.fieldnames is None:
        raise EventLogError("input has no header row")
    for key in REQUIRED_MAPPING_KEYS:
        if mapping[key] not in reader.fieldnames:
            raise EventLogError(f"mapped column {mapping[key]!r} (for {key!r}) not found in header")
    mapping = dict(mapping)
    for key in OPTIONAL_MAPPING_KEYS:
        if key in mapping and mapping[key] not in reader.fieldnames:
            LOG.debug("optional column %r (for %r) absent; skipping", mapping[key], key)
            del mapping[key]

    open_parser = _ColumnTimestampParser(mapping["open"])
    resolve_parser = _ColumnTimestampParser(mapping["resolve"])

    rejects: list[RejectedRow] = []
    by_id: dict[str, EventRecord] = {}
    by_id_row: dict[str, tuple[int, str]] = {}  # id -> (line_no, raw) of the kept row

    for line_no, row in enumerate(reader, start=2):  # header is line 1
        raw = ",".join("" if v is None else v for v in row.values())
        rec_id = (row.get(mapping["id"]) or "").strip()
        if not rec_id:
            rejects.append(RejectedRow(line_no, raw, "missing id"))
            continue
        open_text = (row.get(mapping["open"]) or "").strip()
        if not open_text:
            rejects.append(RejectedRow(line_no, raw, "missing open timestamp"))
            continue
        try:
            open_ts = open_parser.parse(open_text)
        except (ValueError, OverflowError, OSError):
            rejects.append(RejectedRow(line_no, raw, f"unparseable open timestamp {open_text!r}"))
            continue

        resolve_text = (row.get(mapping["resolve"]) or "").strip()
        resolve_ts: int | None = None
        if resolve_text:
            try:
                resolve_ts = resolve_parser.parse(resolve_text)
            except (ValueError, OverflowError, OSError):
                rejects.append(
                    RejectedRow(line_no, raw, f"unparseable resolve timestamp {resolve_text!r}")
                )
                continue

        severity = _normalize_severity(row.get(mapping["severity"]) if "severity" in mapping else None)
        category_col = mapping.get("category")
        category = (row.get(category_col) or "").strip() or None if category_col else None

        record = EventRecord(rec_id, open_ts, resolve_ts, severity, category)
        if rec_id in by_id:
            if _collision_keeps_new(by_id[rec_id], record):
                dropped_line, dropped_raw = by_id_row[rec_id]
                by_id[rec_id] = record
                by_id_row[rec_id] = (line_no, raw)
            else:
                dropped_line, dropped_raw = line_no, raw
            rejects.append(
                RejectedRow(
                    dropped_line,
                    dropped_raw,
                    f"duplicate id {rec_id!r} (kept row with latest resolve)",
                )
            )
        else:
            by_id[rec_id] = record
            by_id_row[rec_id] = (line_no, raw)

    records = tuple(sorted(by_id.values(), key=lambda r: (r.open_ts, r.id)))
    horizon = _horizon_of(records)
    if rejects:
        LOG.warning("parse_events: %d rows rejected", len(rejects))
    return ParseResult(EventLog(records, horizon), rejects)


def _collision_keeps_new(old: EventRecord, new: EventRecord) -> bool:
    """Keep the duplicate with the latest resolve timestamp (last write wins on ties)."""
    old_key = (old.resolve_ts is not None, old.resolve_ts or 0, 0)
    new_key = (new.resolve_ts is not None, new.resolve_ts or 0, 1)
    return new_key >= old_key


def _horizon_of(records: Iterable[EventRecord]) -> tuple[int, int]:
    records = list(records)
    if not records:
        return (0, 0)
    start = min(r.open_ts for r in records)
    end = max(max(r.open_ts, r.resolve_ts if r.resolve_ts is not None else r.open_ts) for r in records)
    return (start, end + 1)


def cleanse(log: EventLog, policy: CleansePolicy) -> tuple[EventLog, CleanseReport]:
    """Drop records violating the policy; report counts per removal reason.

    The crop window, when given, becomes the output horizon and removes
    records whose opening time falls outside it. One removal reason is
    charged per record, checked in the order: outside_crop, unresolved,
    negative_duration.
    """
    report = CleanseReport(removed={"outside_crop": 0, "unresolved": 0, "negative_duration": 0})
    kept: list[EventRecord] = []
    for rec in log.records:
        if policy.crop is not None and not policy.crop[0] <= rec.open_ts < policy.crop[1]:
            report.removed["outside_crop"] += 1
            continue
        if policy.drop_unresolved and rec.resolve_ts is None:
            report.removed["unresolved"] += 1
            continue
        if (
            policy.drop_negative_duration
            and rec.resolve_ts is not None
            and rec.resolve_ts < rec.open_ts
        ):
            report.removed["negative_duration"] += 1
            continue
        kept.append(rec)

    horizon = policy.crop if policy.crop is not None else log.horizon
    if not kept and log.records:
        report.warnings.append("cleanse removed every record")
    return EventLog(tuple(kept), horizon), report


def write_rejects_csv(rejects: list[RejectedRow], path: str) -> None:
    """Emit the reject list as CSV with the original line number and reason."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["line", "reason", "raw"])
        for rej in rejects:
            writer.writerow([rej.line_no, rej.reason, rej.raw])
