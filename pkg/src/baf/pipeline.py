"""End-to-end filtering runs: load, pair, score, gate, refactor, write, report.

Layers are independent, so the per-layer work is mapped over a thread pool;
results are collected and written in deterministic stem order, which makes
output bytes identical for any worker count.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fnmatch import fnmatchcase
from pathlib import Path

from ._version import __version__
from .checkpoint import DTYPE_WIDTH, read_checkpoint, read_metadata, write_checkpoint
from .core import (
    GateConfig,
    LayerReport,
    filter_layer,
    gate_hard,
    anchoring_score,
    build_subspace,
    spectral_channels,
)
from .errors import BafError, ConfigError, UnmatchedLayer
from .figures import render_figures
from .lora import (
    KeyMap,
    LoraLayer,
    assemble_delta,
    detect_factor_pairs,
    layer_output_records,
    pair_layers,
    refactor_channels,
)
from .report import FilterReport

HIGH_ONLY = "high"
LOW_ONLY = "low"


@dataclass
class RunConfig:
    """Everything one CLI invocation needs."""

    lora_path: Path
    base_path: Path
    output_path: Path | None = None
    report_path: Path | None = None
    csv_path: Path | None = None
    figures_dir: Path | None = None
    gate: GateConfig = field(default_factory=GateConfig)
    keymap: KeyMap = field(default_factory=KeyMap)
    strict: bool = False
    include: tuple[str, ...] = ()
    exclude: tuple[str, ...] = ()
    workers: int | None = None
    out_dtype: str = "preserve"

    def __post_init__(self) -> None:
        self.lora_path = Path(self.lora_path)
        self.base_path = Path(self.base_path)
        for label, p in (("LoRA", self.lora_path), ("base", self.base_path)):
            if not p.is_file():
                raise ConfigError(f"{label} checkpoint {p} is not a readable file")
        if self.output_path is not None:
            self.output_path = Path(self.output_path)
            if self.output_path.resolve() == self.lora_path.resolve():
                raise ConfigError("output path must differ from the input LoRA path")
        if self.workers is not None and self.workers < 1:
            raise ConfigError(f"workers must be >= 1, got {self.workers}")
        if self.out_dtype != "preserve" and self.out_dtype not in DTYPE_WIDTH:
            raise ConfigError(f"unknown output dtype {self.out_dtype!r}")

    def resolved_workers(self) -> int:
        return self.workers if self.workers is not None else (os.cpu_count() or 1)


def run_filter(cfg: RunConfig) -> FilterReport:
    """Filter every included layer and write the output adapter plus reports."""
    if cfg.output_path is None:
        raise ConfigError("run_filter requires an output path")

    def worker(layer: LoraLayer):
        delta = assemble_delta(layer)
        subspace = build_subspace(layer.base, cfg.gate.tau_energy)
        channels = spectral_channels(delta, cfg.gate.zero_sigma_tol)
        kept, layer_report = filter_layer(channels, subspace, cfg.gate, layer.layer_name)
        dtype = layer.factor_dtype if cfg.out_dtype == "preserve" else cfg.out_dtype
        b_new, a_new, alpha_new = refactor_channels(kept, dtype, shape=delta.shape)
        return layer_output_records(layer, b_new, a_new, alpha_new, dtype), layer_report

    return _run(cfg, command="filter", worker=worker, write_output=True)


def inspect_adapter(cfg: RunConfig) -> FilterReport:
    """Score everything and emit the report; never writes an adapter."""

    def worker(layer: LoraLayer):
        delta = assemble_delta(layer)
        subspace = build_subspace(layer.base, cfg.gate.tau_energy)
        channels = spectral_channels(delta, cfg.gate.zero_sigma_tol)
        _, layer_report = filter_layer(channels, subspace, cfg.gate, layer.layer_name)
        return None, layer_report

    return _run(cfg, command="inspect", worker=worker, write_output=False)


def ablation_split(cfg: RunConfig, direction: str) -> FilterReport:
    """Write an adapter keeping only channels on one side of the null baseline.

    'high' keeps channels with anchoring >= a_null, 'low' keeps the strict
    complement; the two outputs' effective updates sum to the original.
    """
    if direction not in (HIGH_ONLY, LOW_ONLY):
        raise ConfigError(f"split direction must be 'high' or 'low', got {direction!r}")
    if cfg.output_path is None:
        raise ConfigError("ablation_split requires an output path")

    def worker(layer: LoraLayer):
        delta = assemble_delta(layer)
        subspace = build_subspace(layer.base, cfg.gate.tau_energy)
        channels = spectral_channels(delta, cfg.gate.zero_sigma_tol)
        records = []
        selected = []
        for ch in channels:
            score = anchoring_score(ch, subspace)
            is_high = gate_hard(score, subspace.a_null) == 1.0
            chosen = is_high if direction == HIGH_ONLY else not is_high
            ch.gate = 1.0 if chosen else 0.0
            records.append((ch.sigma, score, ch.gate))
            if chosen:
                selected.append(ch)
        fro_before = sum(ch.sigma ** 2 for ch in channels) ** 0.5
        fro_after = sum(ch.sigma ** 2 for ch in selected) ** 0.5
        layer_report = LayerReport(
            layer_name=layer.layer_name,
            m=subspace.m,
            n=subspace.n,
            r=len(channels),
            k=subspace.k,
            a_null=subspace.a_null,
            energy_ratio=subspace.energy_ratio,
            kept_count=len(selected),
            fro_norm_before=fro_before,
            fro_norm_after=fro_after,
            channel_records=records,
        )
        dtype = layer.factor_dtype if cfg.out_dtype == "preserve" else cfg.out_dtype
        b_new, a_new, alpha_new = refactor_channels(selected, dtype, shape=delta.shape)
        return layer_output_records(layer, b_new, a_new, alpha_new, dtype), layer_report

    return _run(cfg, command=f"split:{direction}", worker=worker, write_output=True)


# --- shared machinery --------------------------------------------------------

def _run(cfg: RunConfig, command: str, worker, write_output: bool) -> FilterReport:
    lora = read_checkpoint(cfg.lora_path)
    base = read_checkpoint(cfg.base_path)
    metadata = read_metadata(cfg.lora_path)

    pairs = detect_factor_pairs(lora)
    paired = pair_layers(lora, base, cfg.keymap, strict=False)
    paired_by_stem = {layer.layer_name: layer for layer in paired}

    included, unfiltered = [], []
    for pair in pairs:
        if not _stem_included(pair.stem, cfg.include, cfg.exclude):
            unfiltered.append({"layer_name": pair.stem, "reason": "excluded"})
            continue
        layer = paired_by_stem.get(pair.stem)
        if layer is None:
            down4 = len(lora[pair.down_key].shape) == 4 or len(lora[pair.up_key].shape) == 4
            if down4 and cfg.keymap.conv_policy == "skip":
                unfiltered.append({"layer_name": pair.stem, "reason": "conv_policy_skip"})
            else:
                if cfg.strict:
                    raise UnmatchedLayer(f"no base weight found for LoRA stem {pair.stem!r}")
                unfiltered.append({"layer_name": pair.stem, "reason": "no_base_match"})
            continue
        included.append(layer)
    included.sort(key=lambda layer: layer.layer_name)

    results = _map_layers(included, worker, cfg.resolved_workers())

    layer_reports = [rep for _, rep in results]
    report = FilterReport(
        tool_version=__version__,
        config=_config_echo(cfg, command),
        layers=layer_reports,
        unfiltered_layers=sorted(unfiltered, key=lambda d: d["layer_name"]),
    )

    if write_output:
        tensors = dict(lora)
        for (records, _), layer in zip(results, included):
            for key in (layer.down_key, layer.up_key, layer.alpha_key):
                if key is not None:
                    tensors.pop(key, None)
            tensors.update(records)
        _write_atomically(tensors, cfg.output_path, metadata)

    if cfg.report_path is not None:
        report.write_json(cfg.report_path)
    if cfg.csv_path is not None:
        report.write_csv(cfg.csv_path)
    if cfg.figures_dir is not None:
        render_figures(report, cfg.figures_dir)
    return report


def _stem_included(stem: str, include: tuple[str, ...], exclude: tuple[str, ...]) -> bool:
    if include and not any(fnmatchcase(stem, pat) for pat in include):
        return False
    return not any(fnmatchcase(stem, pat) for pat in exclude)


def _map_layers(layers, worker, max_workers: int):
    wrapped = [_with_context(layer, worker) for layer in layers]
    if max_workers <= 1 or len(layers) <= 1:
        return [w() for w in wrapped]
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        futures = [pool.submit(w) for w in wrapped]
        return [f.result() for f in futures]


def _with_context(layer, worker):
    def call():
        try:
            return worker(layer)
        except BafError as exc:
            raise type(exc)(f"layer {layer.layer_name!r}: {exc}") from exc

    return call


def _write_atomically(tensors, path: Path, metadata) -> None:
    path = Path(path)
    if path.parent and not path.parent.exists():
        path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    try:
        write_checkpoint(tensors, tmp, metadata)
        os.replace(tmp, path)
    except BaseException:
        tmp.unlink(missing_ok=True)
        raise


def _config_echo(cfg: RunConfig, command: str) -> dict:
    # workers deliberately omitted: it cannot change results and keeping it
    # out makes reports byte-identical across worker counts.
    return {
        "command": command,
        "lora_path": str(cfg.lora_path),
        "base_path": str(cfg.base_path),
        "output_path": str(cfg.output_path) if cfg.output_path else None,
        "mode": cfg.gate.mode,
        "alpha": cfg.gate.alpha,
        "tau_energy": cfg.gate.tau_energy,
        "zero_sigma_tol": cfg.gate.zero_sigma_tol,
        "keymap_preset": cfg.keymap.preset,
        "conv_policy": cfg.keymap.conv_policy,
        "strict": cfg.strict,
        "include": list(cfg.include),
        "exclude": list(cfg.exclude),
        "out_dtype": cfg.out_dtype,
    }
