"""Append-only run log (``.plog``) and replay verification.

A log is JSON-lines: a header object followed by one record per line.
Two logs are compared field by field on the parsed records, with the
informational ``created_wall`` header field excluded.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Any

LOG_VERSION = 1
RECORD_KINDS = (
    "data",
    "message-sent",
    "message-delivered",
    "message-dropped",
    "network-event",
    "hub-action",
    "test-event",
)
IGNORED_HEADER_FIELDS = ("created_wall",)


class LogClosedError(RuntimeError):
    pass


class LogFormatError(ValueError):
    pass


class ReplayError(RuntimeError):
    """Replay refused, e.g. because the config does not match the log."""


@dataclass
class CollectorRecord:
    seq: int
    t: int
    kind: str
    body: dict[str, Any]

    def to_json(self) -> dict[str, Any]:
        return {"seq": self.seq, "t": self.t, "kind": self.kind, "body": self.body}


@dataclass
class CollectorLog:
    seed: int
    config_hash: str
    created_wall: str = ""
    extra: dict[str, Any] = field(default_factory=dict)
    records: list[CollectorRecord] = field(default_factory=list)
    closed: bool = False
    version: int = LOG_VERSION

    @classmethod
    def open(cls, seed: int, config_hash: str, **extra: Any) -> "CollectorLog":
        wall = datetime.now(timezone.utc).isoformat(timespec="seconds")
        return cls(seed=seed, config_hash=config_hash, created_wall=wall, extra=dict(extra))

    @property
    def header(self) -> dict[str, Any]:
        h = {
            "version": self.version,
            "seed": self.seed,
            "config_hash": self.config_hash,
            "created_wall": self.created_wall,
        }
        h.update(self.extra)
        return h

    def record(self, t: int, kind: str, body: dict[str, Any]) -> int:
        if self.closed:
            raise LogClosedError("log is finalized; no further records accepted")
        if kind not in RECORD_KINDS:
            raise ValueError(f"unknown record kind {kind!r}")
        if self.records and t < self.records[-1].t:
            raise ValueError(f"record time {t} precedes previous record time {self.records[-1].t}")
        seq = len(self.records)
        self.records.append(CollectorRecord(seq, t, kind, body))
        return seq

    def finalize(self) -> None:
        self.closed = True

    def of_kind(self, kind: str) -> list[CollectorRecord]:
        return [r for r in self.records if r.kind == kind]

    def to_bytes(self) -> bytes:
        lines = [json.dumps(self.header, separators=(",", ":"))]
        lines.extend(json.dumps(r.to_json(), separators=(",", ":")) for r in self.records)
        return ("\n".join(lines) + "\n").encode("utf-8")

    def write(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def from_bytes(cls, data: bytes) -> "CollectorLog":
        lines = [ln for ln in data.decode("utf-8").splitlines() if ln.strip()]
        if not lines:
            raise LogFormatError("empty log: header line missing")
        try:
            header = json.loads(lines[0])
        except json.JSONDecodeError as exc:
            raise LogFormatError(f"line 1: {exc}") from None
        if not isinstance(header, dict) or "version" not in header:
            raise LogFormatError("line 1: header object with 'version' expected")
        extra = {k: v for k, v in header.items() if k not in ("version", "seed", "config_hash", "created_wall")}
        log = cls(
            seed=header.get("seed"),
            config_hash=header.get("config_hash"),
            created_wall=header.get("created_wall", ""),
            extra=extra,
            version=header["version"],
        )
        for lineno, line in enumerate(lines[1:], start=2):
            try:
                obj = json.loads(line)
                log.records.append(CollectorRecord(obj["seq"], obj["t"], obj["kind"], obj["body"]))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise LogFormatError(f"line {lineno}: malformed record ({exc})") from None
        log.closed = True
        return log

    @classmethod
    def read(cls, path) -> "CollectorLog":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


@dataclass(frozen=True)
class Divergence:
    seq: int | None  # None for header fields
    field: str
    left: Any
    right: Any


def _flatten(prefix: str, value: Any, out: dict[str, Any]) -> None:
    if isinstance(value, dict):
        if not value:
            out[prefix] = {}
        for k, v in value.items():
            _flatten(f"{prefix}.{k}" if prefix else k, v, out)
    else:
        out[prefix] = value


def _diff_maps(seq: int | None, a: dict, b: dict) -> list[Divergence]:
    fa: dict[str, Any] = {}
    fb: dict[str, Any] = {}
    _flatten("", a, fa)
    _flatten("", b, fb)
    missing = object()
    keys = list(fa) + [k for k in fb if k not in fa]
    out = []
    for k in keys:
        va, vb = fa.get(k, missing), fb.get(k, missing)
        if va is missing or vb is missing or va != vb or type(va) is not type(vb):
            out.append(
                Divergence(seq, k, None if va is missing else va, None if vb is missing else vb)
            )
    return out


def diff_logs(a: CollectorLog, b: CollectorLog) -> list[Divergence]:
    """Structural differences between two logs, ignoring ``created_wall``."""
    if a.version != b.version:
        raise LogFormatError(f"log version mismatch: {a.version} vs {b.version}")
    ha = {k: v for k, v in a.header.items() if k not in IGNORED_HEADER_FIELDS}
    hb = {k: v for k, v in b.header.items() if k not in IGNORED_HEADER_FIELDS}
    out = _diff_maps(None, ha, hb)
    for ra, rb in zip(a.records, b.records):
        out.extend(_diff_maps(ra.seq, ra.to_json(), rb.to_json()))
    longer, which = (a, "left") if len(a.records) > len(b.records) else (b, "right")
    for r in longer.records[min(len(a.records), len(b.records)):]:
        out.append(
            Divergence(
                r.seq,
                "<record>",
                r.to_json() if which == "left" else None,
                r.to_json() if which == "right" else None,
            )
        )
    return out


@dataclass(frozen=True)
class ReplayReport:
    identical: bool
    first_divergence: int | None
    divergences: tuple[Divergence, ...] = ()


def replay(log_file: bytes, config_document: bytes, select: str | None = None) -> ReplayReport:
    """Re-execute the run described by a log's header and compare logs."""
    from iotbed.kernel import fnv1a64
    from iotbed.session import execute_run

    original = CollectorLog.from_bytes(log_file)
    doc_hash = f"{fnv1a64(config_document):016x}"
    if original.config_hash != doc_hash:
        raise ReplayError(
            f"config hash mismatch: log has {original.config_hash}, document hashes to {doc_hash}"
        )
    run = original.extra.get("run")
    if not isinstance(run, dict):
        raise ReplayError("log header carries no run descriptor; cannot re-execute")
    name = select or original.extra.get("config_name")
    fresh = execute_run(config_document, name, original.seed, run).log
    divs = diff_logs(original, fresh)
    record_divs = [d.seq for d in divs if d.seq is not None]
    if not divs:
        return ReplayReport(True, None)
    first = min(record_divs) if record_divs else None
    return ReplayReport(False, first, tuple(divs))
