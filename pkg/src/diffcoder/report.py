"""Evaluation reports and comparison tables.

An EvalReport holds the three per-sample metrics for the model and each
interpolation baseline plus aggregate means and config provenance. It
serializes to a stable-ordered JSON document (one record per test sample
plus an aggregate block) so regression diffs stay byte-stable.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

METRIC_NAMES = ("rel_l2", "spectral_error", "highfreq_spectral_error")
METHOD_MODEL = "model"
BASELINE_METHODS = ("bilinear", "bicubic")


class ReportError(ValueError):
    """Invalid report contents or queries."""


@dataclass
class EvalReport:
    """Per-sample and aggregate evaluation results.

    per_sample maps method name -> metric name -> list of values, one per
    test sample, in dataset order.
    """

    dataset_id: str
    arch: str
    provenance: dict = field(default_factory=dict)
    per_sample: dict[str, dict[str, list[float]]] = field(default_factory=dict)

    def add_sample(self, method: str, values: dict[str, float]) -> None:
        bucket = self.per_sample.setdefault(method, {m: [] for m in METRIC_NAMES})
        for metric in METRIC_NAMES:
            v = float(values[metric])
            if not np.isfinite(v) or v < 0:
                raise ReportError(f"{method}/{metric}: invalid value {v}")
            bucket[metric].append(v)

    @property
    def n_samples(self) -> int:
        if not self.per_sample:
            return 0
        first = next(iter(self.per_sample.values()))
        return len(first[METRIC_NAMES[0]])

    def aggregate(self, method: str, metric: str) -> float:
        values = self.per_sample[method][metric]
        if not values:
            raise ReportError("report holds no samples")
        return float(np.mean(values))

    def aggregates(self) -> dict[str, dict[str, float]]:
        return {
            method: {metric: self.aggregate(method, metric) for metric in METRIC_NAMES}
            for method in self.per_sample
        }

    def to_json(self) -> str:
        methods = sorted(self.per_sample)
        records = []
        for i in range(self.n_samples):
            rec = {"sample": i}
            for method in methods:
                for metric in METRIC_NAMES:
                    rec[f"{method}.{metric}"] = self.per_sample[method][metric][i]
            records.append(rec)
        doc = {
            "dataset_id": self.dataset_id,
            "arch": self.arch,
            "provenance": self.provenance,
            "n_samples": self.n_samples,
            "samples": records,
            "aggregate": {m: self.aggregates()[m] for m in methods},
        }
        return json.dumps(doc, indent=2, sort_keys=False) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        doc = json.loads(text)
        report = cls(dataset_id=doc["dataset_id"], arch=doc["arch"],
                     provenance=doc.get("provenance", {}))
        for rec in doc["samples"]:
            by_method: dict[str, dict[str, float]] = {}
            for key, value in rec.items():
                if key == "sample":
                    continue
                method, _, metric = key.partition(".")
                by_method.setdefault(method, {})[metric] = value
            for method, values in by_method.items():
                report.add_sample(method, values)
        return report

    @classmethod
    def load(cls, path) -> "EvalReport":
        path = Path(path)
        if not path.is_file():
            raise ReportError(f"missing report: {path}")
        return cls.from_json(path.read_text())


def percentile_sample_index(errors: list[float], percentile: float) -> int:
    """Index of the sample at the given percentile of the sorted errors.

    Rank round(p/100 * (n-1)); ties broken by lowest sample index.
    """
    if not 0 <= percentile <= 100:
        raise ReportError(f"percentile {percentile} outside [0, 100]")
    if not errors:
        raise ReportError("no samples to select from")
    order = sorted(range(len(errors)), key=lambda i: (errors[i], i))
    rank = round(percentile / 100.0 * (len(errors) - 1))
    return order[rank]


def delta_percent(vae_value: float, diff_value: float) -> float:
    """Relative change 100 * (diff - vae) / vae."""
    if vae_value == 0:
        raise ReportError("baseline value is zero; relative change undefined")
    return 100.0 * (diff_value - vae_value) / vae_value


def format_cell(vae_value: float, diff_value: float) -> str:
    return f"{vae_value:.4f} -> {diff_value:.4f} ({delta_percent(vae_value, diff_value):+.1f}%)"


def render_comparison_tables(
    cells: dict[tuple[int, int], dict[str, "EvalReport"]],
    sizes: list[int],
    depths: list[int],
) -> tuple[str, str]:
    """Render `VAE -> Diff (delta%)` tables per metric.

    cells maps (size, depth) -> arch -> report. Returns (human-readable
    text, machine-readable CSV). Cells missing either arch render as '-'.
    """
    lines = []
    csv_lines = ["metric,size,depth,vae,diffcoder,delta_pct"]
    for metric in METRIC_NAMES:
        lines.append(f"== {metric} (VAE -> DiffCoder) ==")
        header = "size".ljust(10) + "".join(f"depth {d}".ljust(34) for d in depths)
        lines.append(header)
        for size in sizes:
            row = [_format_size(size).ljust(10)]
            for depth in depths:
                reports = cells.get((size, depth), {})
                if "vae" in reports and "diffcoder" in reports:
                    v = reports["vae"].aggregate(METHOD_MODEL, metric)
                    d = reports["diffcoder"].aggregate(METHOD_MODEL, metric)
                    row.append(format_cell(v, d).ljust(34))
                    csv_lines.append(
                        f"{metric},{size},{depth},{v:.10g},{d:.10g},"
                        f"{delta_percent(v, d):.10g}"
                    )
                else:
                    row.append("-".ljust(34))
            lines.append("".join(row).rstrip())
        lines.append("")
    return "\n".join(lines), "\n".join(csv_lines) + "\n"


def _format_size(size: int) -> str:
    if size % 1_000_000 == 0:
        return f"{size // 1_000_000}M"
    if size % 1_000 == 0:
        return f"{size // 1_000}K"
    return str(size)
