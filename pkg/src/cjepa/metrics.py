"""Per-step training metrics and their CSV form."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

from .errors import LogParseError

COLUMNS = (
    "step",
    "loss",
    "jepa",
    "vicreg",
    "sim",
    "std",
    "cov",
    "lr",
    "wd",
    "ema",
    "min_std",
    "mean_std",
    "offdiag_cov",
    "eff_rank",
    "collapsed",
)
# filled only on diagnostic snapshot steps
SNAPSHOT_COLUMNS = ("min_std", "mean_std", "offdiag_cov", "eff_rank", "collapsed")


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, int):
        return str(value)
    return repr(float(value))


@dataclass
class MetricsLog:
    rows: list[dict] = field(default_factory=list)

    def append(self, row: dict) -> None:
        if self.rows and row["step"] <= self.rows[-1]["step"]:
            raise ValueError("step indices must increase")
        self.rows.append({c: row.get(c) for c in COLUMNS})

    @property
    def steps(self) -> list[int]:
        return [r["step"] for r in self.rows]

    def column(self, name: str) -> list:
        return [r[name] for r in self.rows]

    def snapshots(self) -> list[dict]:
        return [r for r in self.rows if r["eff_rank"] is not None]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(COLUMNS)
        for r in self.rows:
            writer.writerow([_fmt(r[c]) for c in COLUMNS])
        return buf.getvalue()

    def write_csv(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv())

    @classmethod
    def from_csv(cls, text: str) -> "MetricsLog":
        """Parse and validate; errors carry the 1-based line number."""
        if not text:
            raise LogParseError(1, "empty log")
        lines = text.split("\n")
        if lines[-1] != "":
            raise LogParseError(len(lines), "incomplete final line (file truncated?)")
        lines = lines[:-1]
        header = lines[0].split(",")
        if tuple(header) != COLUMNS:
            raise LogParseError(1, f"unexpected header {header}")
        log = cls()
        for lineno, line in enumerate(lines[1:], start=2):
            fields = line.split(",")
            if len(fields) != len(COLUMNS):
                raise LogParseError(lineno, f"expected {len(COLUMNS)} fields, got {len(fields)}")
            row = {}
            for name, raw in zip(COLUMNS, fields):
                if raw == "":
                    if name not in SNAPSHOT_COLUMNS:
                        raise LogParseError(lineno, f"missing value for {name}")
                    row[name] = None
                    continue
                try:
                    if name == "step":
                        row[name] = int(raw)
                    elif name == "collapsed":
                        if raw not in ("0", "1"):
                            raise ValueError(raw)
                        row[name] = raw == "1"
                    else:
                        row[name] = float(raw)
                except ValueError:
                    raise LogParseError(lineno, f"cannot parse {name}={raw!r}") from None
            try:
                log.append(row)
            except ValueError as exc:
                raise LogParseError(lineno, str(exc)) from None
        return log

    @classmethod
    def read_csv(cls, path: str | Path) -> "MetricsLog":
        return cls.from_csv(Path(path).read_text())

    def final(self) -> dict:
        return dict(self.rows[-1]) if self.rows else {}

    def is_finite(self) -> bool:
        return all(math.isfinite(r["loss"]) for r in self.rows)
