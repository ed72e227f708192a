"""Pair LoRA factor tensors with base weights and refactor filtered channels.

Two factor spellings are recognized: kohya-style ``<stem>.lora_down.weight`` /
``<stem>.lora_up.weight`` (plus an optional scalar ``<stem>.alpha``) and
PEFT-style ``<stem>.lora_A.weight`` / ``<stem>.lora_B.weight``.  Base keys are
resolved by an underscore-insensitive match against the base checkpoint,
because kohya stems flatten module paths with underscores.

4-D convolution tensors are flattened to (out_channels) x (in*kh*kw) for the
spectral analysis and reshaped back on write; flattening is a pure reshape and
preserves the Frobenius norm exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import (
    DTYPE_WIDTH,
    TensorRecord,
    array_to_record,
    quantize_roundtrip,
    record_to_array,
)
from .errors import ConfigError, ShapeMismatch, UnmatchedLayer, UnsupportedDtype

DOWN_UP_SUFFIXES = (
    (".lora_down.weight", ".lora_up.weight"),
    (".lora_A.weight", ".lora_B.weight"),
)

PRESET_PREFIXES = {
    "kohya-unet": ("lora_unet_", "lora_te1_", "lora_te2_", "lora_te_"),
    "diffusers-attn": ("unet.", "text_encoder.", "text_encoder_2.", "transformer."),
    "custom": (),
}

CONV_FLATTEN = "flatten2d"
CONV_SKIP = "skip"


@dataclass(frozen=True)
class BaseRef:
    """Target of a keymap entry: a base key, optionally a row slice of it."""

    key: str
    row_offset: int | None = None
    row_len: int | None = None


@dataclass(frozen=True)
class KeyMap:
    """How LoRA stems resolve to base checkpoint keys."""

    preset: str = "kohya-unet"
    entries: dict[str, BaseRef] = field(default_factory=dict)
    conv_policy: str = CONV_FLATTEN

    def __post_init__(self) -> None:
        if self.preset not in PRESET_PREFIXES:
            raise ConfigError(
                f"unknown keymap preset {self.preset!r}; "
                f"expected one of {sorted(PRESET_PREFIXES)}"
            )
        if self.conv_policy not in (CONV_FLATTEN, CONV_SKIP):
            raise ConfigError(f"conv_policy must be 'flatten2d' or 'skip', got {self.conv_policy!r}")
        targets = [(e.key, e.row_offset, e.row_len) for e in self.entries.values()]
        if len(set(targets)) != len(targets):
            raise ConfigError("keymap entries must be injective over base targets")

    @classmethod
    def from_file(cls, path) -> "KeyMap":
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot load keymap {path}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"keymap {path}: top level must be an object")
        entries: dict[str, BaseRef] = {}
        for stem, target in doc.get("entries", {}).items():
            if isinstance(target, str):
                entries[stem] = BaseRef(key=target)
            elif isinstance(target, dict) and "key" in target:
                entries[stem] = BaseRef(
                    key=target["key"],
                    row_offset=target.get("row_offset"),
                    row_len=target.get("row_len"),
                )
            else:
                raise ConfigError(f"keymap {path}: bad entry for stem {stem!r}")
        preset = _normalize_name(doc.get("preset", "custom"))
        conv_policy = _normalize_name(doc.get("conv_policy", CONV_FLATTEN))
        return cls(preset=preset, entries=entries, conv_policy=conv_policy)

    @classmethod
    def resolve(cls, spec: str) -> "KeyMap":
        """Build from a preset name or a JSON file path."""
        name = _normalize_name(spec)
        if name in PRESET_PREFIXES:
            return cls(preset=name)
        if Path(spec).exists():
            return cls.from_file(spec)
        raise ConfigError(f"keymap {spec!r} is neither a preset nor an existing file")


def _normalize_name(name: str) -> str:
    return str(name).strip().lower().replace("_", "-")


@dataclass
class LoraLayer:
    """One paired layer: factors, scale, and the matching base weight.

    B is the up factor (m x r), A the down factor (r x n); the effective
    update applied at inference is scale * B @ A.  Wire bookkeeping (original
    keys, dtypes, 4-D shapes) is kept so filtered factors can be written back
    under the file's own conventions.
    """

    layer_name: str
    B: np.ndarray
    A: np.ndarray
    rank: int
    scale: float
    base: np.ndarray
    down_key: str = ""
    up_key: str = ""
    alpha_key: str | None = None
    factor_dtype: str = "f32"
    down_shape4: tuple[int, ...] | None = None
    up_shape4: tuple[int, ...] | None = None


@dataclass(frozen=True)
class FactorPair:
    """Detected LoRA factor tensors for one stem, before base resolution."""

    stem: str
    down_key: str
    up_key: str
    alpha_key: str | None


def detect_factor_pairs(lora: dict[str, TensorRecord]) -> list[FactorPair]:
    """Find all complete down/up factor pairs in a LoRA tensor map."""
    pairs = []
    for down_suffix, up_suffix in DOWN_UP_SUFFIXES:
        for key in lora:
            if not key.endswith(down_suffix):
                continue
            stem = key[: -len(down_suffix)]
            up_key = stem + up_suffix
            if up_key not in lora:
                continue
            alpha_key = stem + ".alpha" if stem + ".alpha" in lora else None
            pairs.append(FactorPair(stem=stem, down_key=key, up_key=up_key, alpha_key=alpha_key))
    return sorted(pairs, key=lambda p: p.stem)


def _base_index(base: dict[str, TensorRecord]) -> tuple[dict[str, str], set[str]]:
    """Map underscore-normalized weight stems to base keys, noting collisions."""
    index: dict[str, str] = {}
    ambiguous: set[str] = set()
    for key in base:
        stem = key[: -len(".weight")] if key.endswith(".weight") else key
        norm = stem.replace(".", "_")
        if norm in index and index[norm] != key:
            ambiguous.add(norm)
        index[norm] = key
    return index, ambiguous


def _resolve_base_key(stem: str, preset: str, index: dict[str, str], ambiguous: set[str]) -> str | None:
    candidates = [stem]
    for prefix in PRESET_PREFIXES[preset]:
        if stem.startswith(prefix):
            candidates.append(stem[len(prefix):])
    for cand in candidates:
        norm = cand.replace(".", "_")
        if norm in ambiguous:
            return None
        hit = index.get(norm)
        if hit is not None:
            return hit
    return None


def _flatten_factor(values: np.ndarray, name: str) -> np.ndarray:
    if values.ndim == 2:
        return values
    if values.ndim == 4:
        return values.reshape(values.shape[0], -1)
    raise ShapeMismatch(f"{name}: factor tensor must be 2-D or 4-D, got shape {values.shape}")


def pair_layers(
    lora: dict[str, TensorRecord],
    base: dict[str, TensorRecord],
    keymap: KeyMap,
    strict: bool = False,
) -> list[LoraLayer]:
    """Match LoRA factor pairs with base weights.

    In strict mode an unresolvable stem raises UnmatchedLayer; otherwise it
    is skipped (callers can diff against detect_factor_pairs to list skips).
    Conv layers are skipped under conv_policy 'skip'.  A genuine shape
    mismatch between paired tensors always raises.
    """
    index, ambiguous = _base_index(base)
    layers: list[LoraLayer] = []
    for pair in detect_factor_pairs(lora):
        down_rec = lora[pair.down_key]
        up_rec = lora[pair.up_key]
        is_conv = len(down_rec.shape) == 4 or len(up_rec.shape) == 4
        if is_conv and keymap.conv_policy == CONV_SKIP:
            continue

        ref = keymap.entries.get(pair.stem)
        base_key = ref.key if ref is not None else _resolve_base_key(
            pair.stem, keymap.preset, index, ambiguous
        )
        if base_key is None or base_key not in base:
            if strict:
                raise UnmatchedLayer(f"no base weight found for LoRA stem {pair.stem!r}")
            continue
        base_rec = base[base_key]
        if len(base_rec.shape) == 4 and keymap.conv_policy == CONV_SKIP:
            continue

        down = _flatten_factor(record_to_array(down_rec), pair.down_key)
        up = _flatten_factor(record_to_array(up_rec), pair.up_key)
        rank = up.shape[1]
        if down.shape[0] != rank:
            raise ShapeMismatch(
                f"{pair.stem}: up factor has inner dim {rank}, down factor has {down.shape[0]} rows"
            )

        weight = record_to_array(base_rec)
        if weight.ndim == 4:
            weight = weight.reshape(weight.shape[0], -1)
        elif weight.ndim != 2:
            raise ShapeMismatch(f"{base_key}: base weight must be 2-D or 4-D, got {weight.shape}")
        if ref is not None and ref.row_offset is not None:
            length = ref.row_len if ref.row_len is not None else up.shape[0]
            if ref.row_offset < 0 or ref.row_offset + length > weight.shape[0]:
                raise ShapeMismatch(
                    f"{pair.stem}: row slice [{ref.row_offset}, {ref.row_offset + length}) "
                    f"outside base weight with {weight.shape[0]} rows"
                )
            weight = weight[ref.row_offset : ref.row_offset + length]

        if weight.shape != (up.shape[0], down.shape[1]):
            raise ShapeMismatch(
                f"{pair.stem}: base weight {weight.shape} does not match "
                f"update shape ({up.shape[0]}, {down.shape[1]})"
            )

        if pair.alpha_key is not None:
            alpha = float(np.ravel(record_to_array(lora[pair.alpha_key]))[0])
            scale = alpha / rank
        else:
            scale = 1.0

        layers.append(
            LoraLayer(
                layer_name=pair.stem,
                B=up,
                A=down,
                rank=rank,
                scale=scale,
                base=weight,
                down_key=pair.down_key,
                up_key=pair.up_key,
                alpha_key=pair.alpha_key,
                factor_dtype=down_rec.dtype,
                down_shape4=down_rec.shape if len(down_rec.shape) == 4 else None,
                up_shape4=up_rec.shape if len(up_rec.shape) == 4 else None,
            )
        )
    return layers


def assemble_delta(layer: LoraLayer) -> np.ndarray:
    """Effective per-layer update scale * B @ A in float64.

    This is the update a deployed model actually adds, so all spectral
    analysis operates on it rather than on the raw factors.
    """
    return layer.scale * (layer.B @ layer.A)


def refactor_channels(
    filtered,
    out_dtype: str = "f32",
    shape: tuple[int, int] | None = None,
) -> tuple[np.ndarray, np.ndarray, float]:
    """Re-express gated channels as storable (B', A', alpha') factors.

    Each channel contributes a column sqrt(sigma*g) * u to B' and a row
    sqrt(sigma*g) * v to A'; alpha' equals the new rank so loaders apply an
    effective scale of exactly 1.  A fully gated (or empty) layer collapses
    to a rank-1 zero pair with alpha' = 1; ``shape`` supplies its dimensions
    when no channels remain.  Factors are rounded through out_dtype.
    """
    if out_dtype not in DTYPE_WIDTH:
        raise UnsupportedDtype(f"unsupported output dtype {out_dtype!r}")
    filtered = list(filtered)
    weights = [ch.sigma * (1.0 if ch.gate is None else ch.gate) for ch in filtered]

    if not filtered or max(weights) == 0.0:
        if filtered:
            m, n = filtered[0].left.shape[0], filtered[0].right.shape[0]
        elif shape is not None:
            m, n = shape
        else:
            raise ShapeMismatch("cannot size a zero factor pair without channels or a shape")
        return np.zeros((m, 1)), np.zeros((1, n)), 1.0

    roots = np.sqrt(np.asarray(weights, dtype=np.float64))
    b_new = np.column_stack([root * ch.left for root, ch in zip(roots, filtered)])
    a_new = np.vstack([root * ch.right for root, ch in zip(roots, filtered)])
    b_new = quantize_roundtrip(b_new, out_dtype)
    a_new = quantize_roundtrip(a_new, out_dtype)
    return b_new, a_new, float(len(filtered))


def layer_output_records(
    layer: LoraLayer,
    b_new: np.ndarray,
    a_new: np.ndarray,
    alpha_new: float,
    out_dtype: str,
) -> dict[str, TensorRecord]:
    """Encode refactored factors under the layer's original key spelling.

    Conv factors are reshaped back to 4-D with their original kernel dims;
    the new rank may differ from the stored one after hard filtering.
    """
    rank_new = b_new.shape[1]
    down = a_new
    up = b_new
    if layer.down_shape4 is not None:
        down = a_new.reshape((rank_new,) + layer.down_shape4[1:])
    if layer.up_shape4 is not None:
        up = b_new.reshape((up.shape[0], rank_new) + layer.up_shape4[2:])
    records = {
        layer.down_key: array_to_record(layer.down_key, down, out_dtype),
        layer.up_key: array_to_record(layer.up_key, up, out_dtype),
    }
    if layer.alpha_key is not None:
        alpha_arr = np.array(alpha_new, dtype=np.float64)
        records[layer.alpha_key] = array_to_record(layer.alpha_key, alpha_arr, out_dtype)
    return records
