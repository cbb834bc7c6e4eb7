"""Neck ablation: every variant trained on the same replicates, summarised as mean (std)."""

from __future__ import annotations

import csv
import dataclasses
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from mhfpn.config import RunConfig
from mhfpn.metrics import REPORT_COLUMNS, format_value, parse_value
from mhfpn.necks import VARIANTS
from mhfpn.train import build_model, evaluate_model, load_dataset, split_for, train

log = logging.getLogger(__name__)

ABLATION_ORDER = ("FPN", "HRFPN", "PANET", "MHFPN")
REPLICATES = 5


class ReplicateFailed(RuntimeError):
    pass


@dataclass
class AblationResult:
    """Raw per-replicate report rows for each variant; summaries are derived, never stored."""

    raw: dict[str, list[dict]] = field(default_factory=dict)

    def values(self, variant: str, column: str) -> list[float]:
        return [r[column] for r in self.raw[variant] if r[column] is not None]

    def mean(self, variant: str, column: str) -> float | None:
        v = self.values(variant, column)
        return float(np.mean(v)) if v else None

    def std(self, variant: str, column: str) -> float | None:
        """Sample standard deviation (ddof 1) over the defined replicate values."""
        v = self.values(variant, column)
        if not v:
            return None
        return float(np.std(v, ddof=1)) if len(v) > 1 else 0.0

    def median(self, variant: str, column: str) -> float | None:
        v = self.values(variant, column)
        return float(np.median(v)) if v else None

    def max(self, variant: str, column: str) -> float | None:
        v = self.values(variant, column)
        return float(max(v)) if v else None


def _cell(mean: float | None, std: float | None, column: str) -> str:
    if mean is None:
        return "-"
    if column in ("Params", "FLOPs"):
        return f"{mean:.0f} ({std:.0f})"
    return f"{mean:.4f} ({std:.4f})"


def summary_csv(result: AblationResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model"] + REPORT_COLUMNS)
    for v in result.raw:
        w.writerow([v] + [_cell(result.mean(v, c), result.std(v, c), c) for c in REPORT_COLUMNS])
    return buf.getvalue()


def max_csv(result: AblationResult) -> str:
    """Best value over the replicates of each column (the max-of-runs reading)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model"] + REPORT_COLUMNS)
    for v in result.raw:
        w.writerow([v] + [format_value(result.max(v, c)) for c in REPORT_COLUMNS])
    return buf.getvalue()


def raw_csv(result: AblationResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model", "replicate"] + REPORT_COLUMNS)
    for v, rows in result.raw.items():
        for r, row in enumerate(rows):
            w.writerow([v, r] + [format_value(row[c]) for c in REPORT_COLUMNS])
    return buf.getvalue()


def parse_raw_csv(text: str) -> AblationResult:
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    result = AblationResult()
    for rec in reader:
        row = {c: parse_value(x) for c, x in zip(header[2:], rec[2:])}
        result.raw.setdefault(rec[0], []).append(row)
    return result


def replicate_config(cfg: RunConfig, variant: str, replicate: int) -> RunConfig:
    """The run for one (variant, replicate) cell; only the neck variant differs across a row."""
    out = cfg.with_seed(cfg.train.seed + replicate)
    out.neck = dataclasses.replace(out.neck, variant=variant)
    out.train = dataclasses.replace(out.train, replicate=replicate)
    return out


def run_ablation(cfg: RunConfig, variants: Sequence[str] = ABLATION_ORDER, replicates: int = REPLICATES,
                 on_replicate: Callable[[str, int, dict], None] | None = None) -> AblationResult:
    for v in variants:
        if v not in VARIANTS:
            raise ValueError(f"unknown variant {v!r}")
    dataset = load_dataset(cfg)
    result = AblationResult()
    for v in variants:
        rows = []
        for r in range(replicates):
            rc = replicate_config(cfg, v, r)
            try:
                tr, va, te = split_for(rc, dataset, r)
                model = build_model(rc)
                res = train(model, tr, va, rc)
                model.load_state_dict(res.best_state)
                row = evaluate_model(model, te, rc).row()
            except Exception as e:
                raise ReplicateFailed(f"variant {v}, replicate {r}: {e}") from e
            log.info("%s replicate %d: %s", v, r, row)
            if on_replicate:
                on_replicate(v, r, row)
            rows.append(row)
        result.raw[v] = rows
    return result


def ordering_holds(result: AblationResult, better: str = "MHFPN", baseline: str = "FPN",
                   columns: Sequence[str] = ("AP@50S", "AP@50")) -> dict[str, bool]:
    """Median of ``better`` >= median of ``baseline`` for each column."""
    out = {}
    for c in columns:
        a, b = result.median(better, c), result.median(baseline, c)
        out[c] = a is not None and b is not None and not math.isnan(a) and a >= b
    return out
