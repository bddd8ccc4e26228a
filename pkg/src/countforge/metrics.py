"""Counting metric suite: MAE, RMSE, NAE, SRE plus skew diagnostics.

MAE and RMSE aggregate absolute errors and are dominated by the few
highest-count records of a long-tailed dataset; NAE and SRE divide each
record's error by its ground-truth count so every record weighs equally.
`exclusion_report` and `bin_distribution` quantify that skew directly.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

from .errors import ValidationError, ZeroCountError


@dataclass(frozen=True)
class CountRecord:
    id: str
    gt: int
    pred: float

    def __post_init__(self):
        if not (isinstance(self.gt, int) and self.gt >= 0):
            raise ValidationError(f"record '{self.id}': gt must be a nonnegative integer")
        if not (math.isfinite(self.pred) and self.pred >= 0):
            raise ValidationError(f"record '{self.id}': pred must be finite and >= 0")


@dataclass(frozen=True)
class MetricReport:
    L: int
    mae: float
    rmse: float
    nae: float
    sre: float

    def to_payload(self) -> dict:
        return {"L": self.L, "mae": self.mae, "rmse": self.rmse, "nae": self.nae, "sre": self.sre}


def compute_metrics(records: Sequence[CountRecord]) -> MetricReport:
    """Evaluate the four aggregate metrics over all records.

    Every ground truth must be >= 1: the count-normalized metrics are
    undefined at zero, and silently skipping such records would make the
    absolute and normalized columns incomparable.
    """
    if len(records) < 1:
        raise ValidationError("need at least one record")
    for rec in records:
        if rec.gt == 0:
            raise ZeroCountError(
                f"record '{rec.id}' has ground-truth count 0; NAE/SRE undefined"
            )
    L = len(records)
    abs_sum = 0.0
    sq_sum = 0.0
    nabs_sum = 0.0
    nsq_sum = 0.0
    for rec in records:
        err = rec.pred - rec.gt
        abs_sum += abs(err)
        sq_sum += err * err
        nabs_sum += abs(err) / rec.gt
        nsq_sum += err * err / rec.gt
    return MetricReport(
        L=L,
        mae=abs_sum / L,
        rmse=math.sqrt(sq_sum / L),
        nae=nabs_sum / L,
        sre=math.sqrt(nsq_sum / L),
    )


def exclusion_report(
    records: Sequence[CountRecord], k: int
) -> tuple[MetricReport, MetricReport, tuple[str, ...]]:
    """Metrics before and after dropping the k records with largest gt.

    Ties in gt break by lexicographic id so reports are deterministic.
    Returns (full, excluded, dropped_ids).
    """
    if k < 0:
        raise ValidationError("k must be >= 0")
    if k >= len(records):
        raise ValidationError(f"k = {k} must be < number of records ({len(records)})")
    full = compute_metrics(records)
    ranked = sorted(records, key=lambda r: (-r.gt, r.id))
    dropped = tuple(r.id for r in ranked[:k])
    dropped_set = set(dropped)
    kept = [r for r in records if r.id not in dropped_set]
    return full, compute_metrics(kept), dropped


def bin_distribution(
    records: Sequence[CountRecord], n_bins: int
) -> list[tuple[float, float, int]]:
    """Equal-width histogram of ground-truth counts over [min, max].

    Returns (bin_low, bin_high, count) triples; the top edge is inclusive.
    A degenerate range (all counts equal) puts every record in bin 0.
    """
    if n_bins < 1:
        raise ValidationError("n_bins must be >= 1")
    if not records:
        raise ValidationError("need at least one record")
    lo = min(r.gt for r in records)
    hi = max(r.gt for r in records)
    width = (hi - lo) / n_bins
    counts = [0] * n_bins
    for rec in records:
        if width == 0.0:
            idx = 0
        else:
            idx = min(int((rec.gt - lo) / width), n_bins - 1)
        counts[idx] += 1
    return [(lo + i * width, lo + (i + 1) * width, counts[i]) for i in range(n_bins)]


# ---------------------------------------------------------------------------
# CSV interfaces
# ---------------------------------------------------------------------------


def records_from_csv_rows(rows: Iterable[dict]) -> list[CountRecord]:
    records = []
    for row in rows:
        try:
            rid = row["id"]
            gt = row["gt"]
            pred = row["pred"]
        except KeyError as exc:
            raise ValidationError(f"CSV row missing column {exc}") from exc
        try:
            gt_val = int(gt)
            pred_val = float(pred)
        except (TypeError, ValueError) as exc:
            raise ValidationError(f"record '{rid}': non-numeric field ({exc})") from exc
        records.append(CountRecord(id=str(rid), gt=gt_val, pred=pred_val))
    return records


def load_records_csv(path) -> list[CountRecord]:
    """Read a records CSV with header id,gt,pred."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        return records_from_csv_rows(reader)


def histogram_csv_text(bins: Sequence[tuple[float, float, int]]) -> str:
    lines = ["bin_low,bin_high,count"]
    for lo, hi, count in bins:
        lines.append(f"{lo!r},{hi!r},{count}")
    return "\n".join(lines) + "\n"
