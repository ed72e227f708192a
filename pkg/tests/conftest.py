"""Shared fixture builders: toy adapter/base checkpoint pairs on disk.

All fixture files are produced by the independent reference writer so the
library's reader is always exercised against bytes it did not emit itself.
"""

import numpy as np

from baf.core import build_subspace
from baf.lab import PlantSpec, gen_base, gen_planted_lora
from baf.linalg import reconstruct

from reference_safetensors import payload_for, reference_write

WIRE = {"f64": "F64", "f32": "F32", "f16": "F16", "bf16": "BF16"}


def kohya_stem(i):
    return f"lora_unet_down_blocks_{i}_attentions_0_to_q"


def base_key(i):
    return f"down_blocks.{i}.attentions.0.to_q.weight"


def quantized(values, dtype):
    """What the file round-trips the values to, per storage dtype."""
    if dtype == "f64":
        return np.asarray(values, dtype=np.float64)
    if dtype == "f32":
        return np.asarray(values, dtype="<f4").astype(np.float64)
    if dtype == "f16":
        return np.asarray(values, dtype="<f2").astype(np.float64)
    bits = np.frombuffer(payload_for(values, "BF16"), dtype="<u2").astype(np.uint32) << 16
    return bits.view(np.float32).astype(np.float64).reshape(np.shape(values))


def build_random_pair(
    tmp_path,
    n_layers=3,
    m=24,
    n=16,
    rank=4,
    seed=0,
    dtype="f32",
    alpha_value=None,
    with_passthrough=True,
):
    """Random adapter + random base pair written to disk.

    Returns (lora_path, base_path, truth) where truth maps each stem to the
    effective update and base weight implied by the stored (quantized)
    tensors.
    """
    rng = np.random.default_rng(seed)
    lora_tensors = []
    base_tensors = []
    truth = {}
    for i in range(n_layers):
        stem = kohya_stem(i)
        down = rng.standard_normal((rank, n))
        up = rng.standard_normal((m, rank))
        base = rng.standard_normal((m, n))
        alpha = float(rank if alpha_value is None else alpha_value)

        lora_tensors.append((f"{stem}.lora_down.weight", WIRE[dtype], (rank, n), payload_for(down, WIRE[dtype])))
        lora_tensors.append((f"{stem}.lora_up.weight", WIRE[dtype], (m, rank), payload_for(up, WIRE[dtype])))
        lora_tensors.append((f"{stem}.alpha", WIRE[dtype], (), payload_for(alpha, WIRE[dtype])))
        base_tensors.append((base_key(i), WIRE[dtype], (m, n), payload_for(base, WIRE[dtype])))

        down_q = quantized(down, dtype)
        up_q = quantized(up, dtype)
        truth[stem] = {
            "delta": (alpha / rank) * (up_q @ down_q),
            "base": quantized(base, dtype),
            "rank": rank,
        }
    if with_passthrough:
        extra = rng.standard_normal(7)
        lora_tensors.append(("emb.extra_state", "F32", (7,), payload_for(extra, "F32")))

    lora_path = tmp_path / "adapter.safetensors"
    base_path = tmp_path / "base.safetensors"
    reference_write(lora_path, lora_tensors, metadata={"source": "toy-fixture"})
    reference_write(base_path, base_tensors)
    return lora_path, base_path, truth


def build_planted_pair(
    tmp_path,
    n_layers=3,
    m=32,
    n=32,
    k_true=4,
    n_aligned=2,
    n_orthogonal=2,
    gap=100.0,
    tau=0.85,
    seed=0,
):
    """Planted adapter pair stored in f64 so ground truth survives the wire.

    Factors are the exact square-root split of the planted channels with
    alpha = rank, so the stored effective update equals the planted one.
    truth[stem] carries the full and aligned-only updates plus the labels.
    """
    lora_tensors = []
    base_tensors = []
    truth = {}
    for i in range(n_layers):
        spec = PlantSpec(
            m=m,
            n=n,
            k_true=k_true,
            n_aligned=n_aligned,
            n_orthogonal=n_orthogonal,
            decay="two_block",
            decay_param=gap,
            seed=seed + i,
        )
        base = gen_base(spec)
        sub = build_subspace(base, tau)
        channels, labels = gen_planted_lora(sub, spec)
        rank = len(channels)

        roots = [np.sqrt(ch.sigma) for ch in channels]
        up = np.column_stack([root * ch.left for root, ch in zip(roots, channels)])
        down = np.vstack([root * ch.right for root, ch in zip(roots, channels)])

        stem = kohya_stem(i)
        lora_tensors.append((f"{stem}.lora_down.weight", "F64", down.shape, payload_for(down, "F64")))
        lora_tensors.append((f"{stem}.lora_up.weight", "F64", up.shape, payload_for(up, "F64")))
        lora_tensors.append((f"{stem}.alpha", "F64", (), payload_for(float(rank), "F64")))
        base_tensors.append((base_key(i), "F64", base.shape, payload_for(base, "F64")))

        truth[stem] = {
            "delta": up @ down,
            "aligned": reconstruct([ch for ch, lab in zip(channels, labels) if lab], shape=(m, n)),
            "labels": labels,
            "rank": rank,
            "k": sub.k,
            "a_null": sub.a_null,
        }
    lora_path = tmp_path / "planted_adapter.safetensors"
    base_path = tmp_path / "planted_base.safetensors"
    reference_write(lora_path, lora_tensors)
    reference_write(base_path, base_tensors)
    return lora_path, base_path, truth


def build_full_rank_square_pair(tmp_path, n_layers=2, dim=12, rank=5, seed=0):
    """Square full-rank bases (shifted Gaussians) with random adapters."""
    rng = np.random.default_rng(seed)
    lora_tensors = []
    base_tensors = []
    for i in range(n_layers):
        stem = kohya_stem(i)
        down = rng.standard_normal((rank, dim))
        up = rng.standard_normal((dim, rank))
        base = rng.standard_normal((dim, dim)) + 3.0 * np.eye(dim)
        lora_tensors.append((f"{stem}.lora_down.weight", "F64", down.shape, payload_for(down, "F64")))
        lora_tensors.append((f"{stem}.lora_up.weight", "F64", up.shape, payload_for(up, "F64")))
        lora_tensors.append((f"{stem}.alpha", "F64", (), payload_for(float(rank), "F64")))
        base_tensors.append((base_key(i), "F64", base.shape, payload_for(base, "F64")))
    lora_path = tmp_path / "square_adapter.safetensors"
    base_path = tmp_path / "square_base.safetensors"
    reference_write(lora_path, lora_tensors)
    reference_write(base_path, base_tensors)
    return lora_path, base_path


def assemble_output_deltas(path):
    """Effective per-stem updates implied by an adapter file on disk."""
    from baf.checkpoint import read_checkpoint, record_to_array
    from baf.lora import detect_factor_pairs

    tensors = read_checkpoint(path)
    deltas = {}
    for pair in detect_factor_pairs(tensors):
        down = record_to_array(tensors[pair.down_key])
        up = record_to_array(tensors[pair.up_key])
        if down.ndim == 4:
            down = down.reshape(down.shape[0], -1)
        if up.ndim == 4:
            up = up.reshape(up.shape[0], -1)
        rank = up.shape[1]
        if pair.alpha_key is not None:
            alpha = float(np.ravel(record_to_array(tensors[pair.alpha_key]))[0])
            scale = alpha / rank
        else:
            scale = 1.0
        deltas[pair.stem] = scale * (up @ down)
    return deltas


def relative_frobenius(actual, expected):
    denom = np.linalg.norm(expected)
    if denom == 0.0:
        return np.linalg.norm(actual)
    return np.linalg.norm(np.asarray(actual) - np.asarray(expected)) / denom
