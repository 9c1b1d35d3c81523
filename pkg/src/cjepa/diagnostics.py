"""Collapse metrics on embedding snapshots and run-to-run comparison."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass

import numpy as np

from .errors import MisalignedLogs
from .linalg import as_batch, batch_variance, effective_rank
from .metrics import MetricsLog
from .vicreg import covariance_term

DEFAULT_COLLAPSE_THRESHOLD = 0.01


@dataclass(frozen=True)
class DiagnosticsReport:
    step: int
    per_dim_std: tuple[float, ...]
    min_std: float
    mean_std: float
    offdiag_cov_norm: float
    effective_rank: float
    collapsed: bool
    threshold: float = DEFAULT_COLLAPSE_THRESHOLD

    def to_dict(self) -> dict:
        out = asdict(self)
        out["per_dim_std"] = list(self.per_dim_std)
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, raw: dict) -> "DiagnosticsReport":
        raw = dict(raw)
        raw["per_dim_std"] = tuple(raw["per_dim_std"])
        return cls(**raw)


def collapse_report(z, threshold: float = DEFAULT_COLLAPSE_THRESHOLD, step: int = 0) -> DiagnosticsReport:
    """Std, decorrelation and effective-rank summary of an ``(n, d)`` embedding batch.

    Rows are put in a canonical (lexicographic) order first, so every field
    is exactly invariant to how the batch was shuffled.
    """
    z = as_batch(z, "z")
    z = z[np.lexsort(z.T[::-1])]
    std = np.sqrt(batch_variance(z))
    return DiagnosticsReport(
        step=int(step),
        per_dim_std=tuple(float(s) for s in std),
        min_std=float(std.min()),
        mean_std=float(std.mean()),
        offdiag_cov_norm=covariance_term(z).value,
        effective_rank=effective_rank(z),
        collapsed=bool(std.min() < threshold),
        threshold=float(threshold),
    )


@dataclass
class RunComparison:
    steps: list[int]
    deltas: dict[str, list[float | None]]
    final: dict[str, float | None]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        names = list(self.deltas)
        writer.writerow(["step", *names])
        for i, step in enumerate(self.steps):
            row = [self.deltas[n][i] for n in names]
            writer.writerow([step, *("" if v is None else repr(v) for v in row)])
        return buf.getvalue()

    def final_sign(self, metric: str) -> int:
        """Sign of the last available ``a - b`` delta for ``metric``."""
        for v in reversed(self.deltas[metric]):
            if v is not None:
                return int(np.sign(v))
        return 0


COMPARED = ("loss", "jepa", "vicreg", "min_std", "mean_std", "offdiag_cov", "eff_rank")


def compare_runs(a: MetricsLog, b: MetricsLog) -> RunComparison:
    """Per-step ``a - b`` for each numeric metric; logs must share a step grid."""
    if a.steps != b.steps:
        raise MisalignedLogs(f"step grids differ ({len(a.steps)} vs {len(b.steps)} rows)")
    deltas = {}
    for name in COMPARED:
        series = []
        for ra, rb in zip(a.rows, b.rows):
            va, vb = ra[name], rb[name]
            series.append(None if va is None or vb is None else float(va) - float(vb))
        deltas[name] = series
    final = {}
    for name, series in deltas.items():
        present = [v for v in series if v is not None]
        final[name] = present[-1] if present else None
    return RunComparison(list(a.steps), deltas, final)
