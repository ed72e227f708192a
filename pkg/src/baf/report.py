"""Filtering run reports: per-layer records, global aggregates, JSON/CSV output.

The global anchoring-score histogram uses 50 uniform bins over [0, 1] so
reports from different runs and adapters are directly comparable.  Every
aggregate is recomputable from the per-layer channel records; nothing is
stored that the records do not imply.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

from .core import LayerReport

SCHEMA_VERSION = 1
HISTOGRAM_BINS = 50


@dataclass
class Aggregates:
    total_channels: int
    total_kept: int
    histogram: list[int]
    fraction_below_null: float
    energy_below_null: float
    energy_below_null_fraction: float


@dataclass
class FilterReport:
    """Whole-run diagnostics: config echo, layer records, global aggregates."""

    tool_version: str
    config: dict
    layers: list[LayerReport] = field(default_factory=list)
    unfiltered_layers: list[dict] = field(default_factory=list)
    schema: int = SCHEMA_VERSION

    @property
    def aggregates(self) -> Aggregates:
        return compute_aggregates(self.layers)

    def to_dict(self) -> dict:
        agg = self.aggregates
        return {
            "schema": self.schema,
            "tool_version": self.tool_version,
            "config": self.config,
            "layers": [
                {
                    "layer_name": lr.layer_name,
                    "m": lr.m,
                    "n": lr.n,
                    "r": lr.r,
                    "k": lr.k,
                    "a_null": lr.a_null,
                    "energy_ratio": lr.energy_ratio,
                    "kept_count": lr.kept_count,
                    "fro_norm_before": lr.fro_norm_before,
                    "fro_norm_after": lr.fro_norm_after,
                    "channels": [list(rec) for rec in lr.channel_records],
                }
                for lr in self.layers
            ],
            "unfiltered_layers": self.unfiltered_layers,
            "aggregates": {
                "total_channels": agg.total_channels,
                "total_kept": agg.total_kept,
                "histogram_bins": HISTOGRAM_BINS,
                "histogram": agg.histogram,
                "fraction_below_null": agg.fraction_below_null,
                "energy_below_null": agg.energy_below_null,
                "energy_below_null_fraction": agg.energy_below_null_fraction,
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def write_json(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    def write_csv(self, path) -> None:
        """Per-channel dump: one row per scored channel across all layers."""
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["layer", "channel", "sigma", "anchoring", "gate", "kept"])
            for lr in self.layers:
                for idx, (sigma, anchoring, gate) in enumerate(lr.channel_records):
                    writer.writerow(
                        [lr.layer_name, idx, repr(sigma), repr(anchoring), repr(gate), int(gate > 0.0)]
                    )


def histogram_bin(score: float) -> int:
    """Bin index for an anchoring score; 1.0 lands in the last bin."""
    return min(int(score * HISTOGRAM_BINS), HISTOGRAM_BINS - 1)


def compute_aggregates(layers: list[LayerReport]) -> Aggregates:
    histogram = [0] * HISTOGRAM_BINS
    total = 0
    kept = 0
    below = 0
    energy_below = 0.0
    energy_total = 0.0
    for lr in layers:
        kept += lr.kept_count
        for sigma, anchoring, _gate in lr.channel_records:
            total += 1
            histogram[histogram_bin(anchoring)] += 1
            energy_total += sigma * sigma
            if anchoring < lr.a_null:
                below += 1
                energy_below += sigma * sigma
    return Aggregates(
        total_channels=total,
        total_kept=kept,
        histogram=histogram,
        fraction_below_null=(below / total) if total else 0.0,
        energy_below_null=energy_below,
        energy_below_null_fraction=(energy_below / energy_total) if energy_total else 0.0,
    )


def load_report(path) -> dict:
    """Read a report JSON document back as a plain dict."""
    return json.loads(Path(path).read_text(encoding="utf-8"))
