"""Pairing, update assembly, and factor refactoring tests."""

import json

import numpy as np
import pytest

from baf.checkpoint import array_to_record, read_checkpoint, record_to_array
from baf.core import SpectralChannel
from baf.errors import ConfigError, ShapeMismatch, UnmatchedLayer, UnsupportedDtype
from baf.linalg import thin_svd
from baf.lora import (
    BaseRef,
    KeyMap,
    assemble_delta,
    detect_factor_pairs,
    layer_output_records,
    pair_layers,
    refactor_channels,
)

from reference_safetensors import payload_for, reference_write


def records(named_arrays, dtype="f32"):
    return {name: array_to_record(name, arr, dtype) for name, arr in named_arrays.items()}


def naive_matmul(a, b):
    """Triple-loop reference product."""
    rows, inner = a.shape
    cols = b.shape[1]
    out = np.zeros((rows, cols))
    for i in range(rows):
        for j in range(cols):
            acc = 0.0
            for k in range(inner):
                acc += a[i, k] * b[k, j]
            out[i, j] = acc
    return out


class TestDetectAndPair:
    def make_maps(self, alpha=4.0, m=6, n=5, rank=4, stem="lora_unet_mid_block_to_q"):
        rng = np.random.default_rng(0)
        lora = records({
            f"{stem}.lora_down.weight": rng.standard_normal((rank, n)),
            f"{stem}.lora_up.weight": rng.standard_normal((m, rank)),
            f"{stem}.alpha": np.array(alpha),
        })
        base = records({"mid_block.to_q.weight": rng.standard_normal((m, n))})
        return lora, base

    def test_detects_pair_with_alpha(self):
        lora, _ = self.make_maps()
        pairs = detect_factor_pairs(lora)
        assert len(pairs) == 1
        assert pairs[0].stem == "lora_unet_mid_block_to_q"
        assert pairs[0].alpha_key is not None

    def test_alpha_equals_rank_gives_unit_scale(self):
        lora, base = self.make_maps(alpha=4.0)
        (layer,) = pair_layers(lora, base, KeyMap(preset="kohya-unet"))
        assert layer.rank == 4
        assert layer.scale == 1.0

    def test_alpha_twice_rank_gives_double_scale(self):
        lora, base = self.make_maps(alpha=8.0)
        (layer,) = pair_layers(lora, base, KeyMap(preset="kohya-unet"))
        assert layer.scale == 2.0

    def test_missing_alpha_gives_unit_scale(self):
        lora, base = self.make_maps()
        del lora["lora_unet_mid_block_to_q.alpha"]
        (layer,) = pair_layers(lora, base, KeyMap(preset="kohya-unet"))
        assert layer.scale == 1.0
        assert layer.alpha_key is None

    def test_naming_symmetry(self):
        rng = np.random.default_rng(1)
        down = rng.standard_normal((3, 5))
        up = rng.standard_normal((6, 3))
        base = records({"blocks.0.proj.weight": rng.standard_normal((6, 5))})
        kohya = records({
            "lora_unet_blocks_0_proj.lora_down.weight": down,
            "lora_unet_blocks_0_proj.lora_up.weight": up,
        })
        peft = records({
            "unet.blocks.0.proj.lora_A.weight": down,
            "unet.blocks.0.proj.lora_B.weight": up,
        })
        (layer_k,) = pair_layers(kohya, base, KeyMap(preset="kohya-unet"))
        (layer_p,) = pair_layers(peft, base, KeyMap(preset="diffusers-attn"))
        assert np.array_equal(layer_k.A, layer_p.A)
        assert np.array_equal(layer_k.B, layer_p.B)
        assert layer_k.rank == layer_p.rank == 3
        assert np.array_equal(layer_k.base, layer_p.base)

    def test_strict_unmatched_raises(self):
        lora, _ = self.make_maps()
        with pytest.raises(UnmatchedLayer):
            pair_layers(lora, {}, KeyMap(preset="kohya-unet"), strict=True)

    def test_lenient_unmatched_skips(self):
        lora, _ = self.make_maps()
        assert pair_layers(lora, {}, KeyMap(preset="kohya-unet"), strict=False) == []

    def test_factor_shape_mismatch_raises(self):
        rng = np.random.default_rng(2)
        lora = records({
            "s.lora_down.weight": rng.standard_normal((3, 5)),
            "s.lora_up.weight": rng.standard_normal((6, 4)),
        })
        base = records({"s.weight": rng.standard_normal((6, 5))})
        with pytest.raises(ShapeMismatch):
            pair_layers(lora, base, KeyMap(preset="custom", entries={"s": BaseRef("s.weight")}))

    def test_base_shape_mismatch_raises(self):
        rng = np.random.default_rng(3)
        lora = records({
            "s.lora_down.weight": rng.standard_normal((3, 5)),
            "s.lora_up.weight": rng.standard_normal((6, 3)),
        })
        base = records({"s.weight": rng.standard_normal((7, 5))})
        with pytest.raises(ShapeMismatch):
            pair_layers(lora, base, KeyMap(preset="custom", entries={"s": BaseRef("s.weight")}))

    def test_ambiguous_normalized_base_keys_stay_unmatched(self):
        rng = np.random.default_rng(4)
        lora = records({
            "lora_unet_blocks_0_proj.lora_down.weight": rng.standard_normal((2, 5)),
            "lora_unet_blocks_0_proj.lora_up.weight": rng.standard_normal((6, 2)),
        })
        # Both base keys normalize to blocks_0_proj, so the match is ambiguous.
        base = records({
            "blocks.0.proj.weight": rng.standard_normal((6, 5)),
            "blocks.0_proj.weight": rng.standard_normal((6, 5)),
        })
        assert pair_layers(lora, base, KeyMap(preset="kohya-unet")) == []
        with pytest.raises(UnmatchedLayer):
            pair_layers(lora, base, KeyMap(preset="kohya-unet"), strict=True)


class TestConvHandling:
    def make_conv_maps(self, rank=2, c_out=4, c_in=3, k=3):
        rng = np.random.default_rng(5)
        lora = records({
            "lora_unet_conv1.lora_down.weight": rng.standard_normal((rank, c_in, k, k)),
            "lora_unet_conv1.lora_up.weight": rng.standard_normal((c_out, rank, 1, 1)),
        })
        base = records({"conv1.weight": rng.standard_normal((c_out, c_in, k, k))})
        return lora, base

    def test_flatten_policy_flattens(self):
        lora, base = self.make_conv_maps()
        (layer,) = pair_layers(lora, base, KeyMap(preset="kohya-unet", conv_policy="flatten2d"))
        assert layer.A.shape == (2, 27)
        assert layer.B.shape == (4, 2)
        assert layer.base.shape == (4, 27)
        assert layer.down_shape4 == (2, 3, 3, 3)
        assert layer.up_shape4 == (4, 2, 1, 1)

    def test_flatten_preserves_frobenius(self):
        lora, base = self.make_conv_maps()
        (layer,) = pair_layers(lora, base, KeyMap(preset="kohya-unet"))
        raw = record_to_array(lora["lora_unet_conv1.lora_down.weight"])
        assert np.linalg.norm(layer.A) == np.linalg.norm(raw)

    def test_skip_policy_skips(self):
        lora, base = self.make_conv_maps()
        assert pair_layers(lora, base, KeyMap(preset="kohya-unet", conv_policy="skip")) == []

    def test_mixed_attn_and_conv(self):
        lora, base = self.make_conv_maps()
        rng = np.random.default_rng(6)
        lora.update(records({
            "lora_unet_attn_to_q.lora_down.weight": rng.standard_normal((2, 8)),
            "lora_unet_attn_to_q.lora_up.weight": rng.standard_normal((8, 2)),
        }))
        base.update(records({"attn.to_q.weight": rng.standard_normal((8, 8))}))
        layers = pair_layers(lora, base, KeyMap(preset="kohya-unet"))
        assert [l.layer_name for l in layers] == ["lora_unet_attn_to_q", "lora_unet_conv1"]
        assert layers[0].base.shape == (8, 8)
        assert layers[1].base.shape == (4, 27)


class TestRowSlices:
    def test_fused_qkv_slice(self):
        rng = np.random.default_rng(7)
        fused = rng.standard_normal((12, 5))
        lora = records({
            "q_proj.lora_down.weight": rng.standard_normal((2, 5)),
            "q_proj.lora_up.weight": rng.standard_normal((4, 2)),
            "k_proj.lora_down.weight": rng.standard_normal((2, 5)),
            "k_proj.lora_up.weight": rng.standard_normal((4, 2)),
        })
        base = records({"attn.qkv.weight": fused})
        keymap = KeyMap(
            preset="custom",
            entries={
                "q_proj": BaseRef("attn.qkv.weight", row_offset=0, row_len=4),
                "k_proj": BaseRef("attn.qkv.weight", row_offset=4, row_len=4),
            },
        )
        layers = pair_layers(lora, base, keymap)
        assert len(layers) == 2
        by_name = {l.layer_name: l for l in layers}
        assert np.array_equal(by_name["q_proj"].base, fused[0:4].astype(np.float32).astype(np.float64))
        assert np.array_equal(by_name["k_proj"].base, fused[4:8].astype(np.float32).astype(np.float64))

    def test_slice_out_of_bounds(self):
        rng = np.random.default_rng(8)
        lora = records({
            "q.lora_down.weight": rng.standard_normal((2, 5)),
            "q.lora_up.weight": rng.standard_normal((4, 2)),
        })
        base = records({"qkv.weight": rng.standard_normal((6, 5))})
        keymap = KeyMap(preset="custom", entries={"q": BaseRef("qkv.weight", row_offset=4, row_len=4)})
        with pytest.raises(ShapeMismatch):
            pair_layers(lora, base, keymap)


class TestKeyMap:
    def test_resolve_preset(self):
        assert KeyMap.resolve("kohya-unet").preset == "kohya-unet"
        assert KeyMap.resolve("diffusers_attn").preset == "diffusers-attn"

    def test_resolve_unknown(self):
        with pytest.raises(ConfigError):
            KeyMap.resolve("not-a-preset-or-file")

    def test_from_file(self, tmp_path):
        doc = {
            "preset": "custom",
            "entries": {
                "stem_a": "weights.a.weight",
                "stem_q": {"key": "attn.qkv.weight", "row_offset": 0, "row_len": 8},
            },
            "conv_policy": "skip",
        }
        path = tmp_path / "map.json"
        path.write_text(json.dumps(doc))
        keymap = KeyMap.resolve(str(path))
        assert keymap.preset == "custom"
        assert keymap.conv_policy == "skip"
        assert keymap.entries["stem_a"] == BaseRef("weights.a.weight")
        assert keymap.entries["stem_q"].row_offset == 0

    def test_from_file_bad_entry(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"entries": {"s": 42}}))
        with pytest.raises(ConfigError):
            KeyMap.from_file(path)

    def test_duplicate_targets_rejected(self):
        with pytest.raises(ConfigError):
            KeyMap(
                preset="custom",
                entries={"a": BaseRef("w.weight"), "b": BaseRef("w.weight")},
            )

    def test_bad_conv_policy(self):
        with pytest.raises(ConfigError):
            KeyMap(conv_policy="reshape")


class TestAssembleDelta:
    def layer_of(self, up, down, scale=1.0):
        from baf.lora import LoraLayer

        up = np.asarray(up, dtype=float)
        down = np.asarray(down, dtype=float)
        return LoraLayer(
            layer_name="t",
            B=up,
            A=down,
            rank=up.shape[1],
            scale=scale,
            base=np.zeros((up.shape[0], down.shape[1])),
        )

    def test_single_entry(self):
        up = np.zeros((3, 1))
        up[0, 0] = 1.0
        down = np.zeros((1, 4))
        down[0, 0] = 1.0
        delta = assemble_delta(self.layer_of(up, down))
        expected = np.zeros((3, 4))
        expected[0, 0] = 1.0
        assert np.array_equal(delta, expected)

    def test_scale_linearity(self):
        rng = np.random.default_rng(9)
        up = rng.standard_normal((5, 2))
        down = rng.standard_normal((2, 6))
        full = assemble_delta(self.layer_of(up, down, scale=1.0))
        half = assemble_delta(self.layer_of(up, down, scale=0.5))
        assert np.allclose(half, 0.5 * full)

    def test_matches_naive_product(self):
        rng = np.random.default_rng(10)
        up = rng.standard_normal((7, 3))
        down = rng.standard_normal((3, 5))
        delta = assemble_delta(self.layer_of(up, down, scale=1.25))
        assert np.allclose(delta, 1.25 * naive_matmul(up, down), atol=1e-12)


class TestRefactorChannels:
    def test_symmetric_square_root_split(self):
        ch = SpectralChannel(
            sigma=4.0,
            left=np.array([1.0, 0.0, 0.0]),
            right=np.array([0.0, 1.0, 0.0, 0.0]),
            gate=1.0,
        )
        b_new, a_new, alpha_new = refactor_channels([ch], "f64")
        assert np.allclose(b_new[:, 0], [2.0, 0.0, 0.0])
        assert np.allclose(a_new[0], [0.0, 2.0, 0.0, 0.0])
        assert alpha_new == 1.0

    def test_all_gates_zero_degenerates_to_rank_one_zero(self):
        chans = [
            SpectralChannel(1.0, np.array([1.0, 0.0]), np.array([1.0, 0.0, 0.0]), gate=0.0),
            SpectralChannel(0.5, np.array([0.0, 1.0]), np.array([0.0, 1.0, 0.0]), gate=0.0),
        ]
        b_new, a_new, alpha_new = refactor_channels(chans, "f32")
        assert b_new.shape == (2, 1)
        assert a_new.shape == (1, 3)
        assert not b_new.any() and not a_new.any()
        assert alpha_new == 1.0

    def test_empty_with_shape(self):
        b_new, a_new, alpha_new = refactor_channels([], "f32", shape=(4, 6))
        assert b_new.shape == (4, 1)
        assert a_new.shape == (1, 6)
        assert alpha_new == 1.0

    def test_empty_without_shape_raises(self):
        with pytest.raises(ShapeMismatch):
            refactor_channels([], "f32")

    def test_unsupported_dtype(self):
        with pytest.raises(UnsupportedDtype):
            refactor_channels([], "q4", shape=(2, 2))

    @pytest.mark.parametrize("dtype,tol", [("f64", 1e-12), ("f32", 1e-6), ("f16", 1e-2), ("bf16", 1e-2)])
    def test_round_trip_against_assembled_update(self, dtype, tol):
        rng = np.random.default_rng(11)
        delta = rng.standard_normal((10, 8))
        svd = thin_svd(delta)
        chans = [
            SpectralChannel(float(svd.s[i]), svd.U[:, i], svd.V[:, i], gate=1.0)
            for i in range(svd.s.size)
        ]
        b_new, a_new, _ = refactor_channels(chans, dtype)
        assert np.linalg.norm(b_new @ a_new - delta) <= tol * np.linalg.norm(delta)

    def test_soft_gates_scale_contributions(self):
        ch = SpectralChannel(
            sigma=2.0,
            left=np.array([1.0, 0.0]),
            right=np.array([1.0, 0.0]),
            gate=0.25,
        )
        b_new, a_new, _ = refactor_channels([ch], "f64")
        assert np.allclose(b_new @ a_new, [[0.5, 0.0], [0.0, 0.0]])


class TestLayerOutputRecords:
    def test_conv_reshape_back_with_reduced_rank(self):
        rng = np.random.default_rng(12)
        lora = records({
            "lora_unet_conv1.lora_down.weight": rng.standard_normal((3, 2, 3, 3)),
            "lora_unet_conv1.lora_up.weight": rng.standard_normal((5, 3, 1, 1)),
            "lora_unet_conv1.alpha": np.array(3.0),
        })
        base = records({"conv1.weight": rng.standard_normal((5, 2, 3, 3))})
        (layer,) = pair_layers(lora, base, KeyMap(preset="kohya-unet"))
        b_new = rng.standard_normal((5, 2))
        a_new = rng.standard_normal((2, 18))
        out = layer_output_records(layer, b_new, a_new, 2.0, "f32")
        assert out["lora_unet_conv1.lora_down.weight"].shape == (2, 2, 3, 3)
        assert out["lora_unet_conv1.lora_up.weight"].shape == (5, 2, 1, 1)
        assert out["lora_unet_conv1.alpha"].shape == ()

    def test_linear_records_keep_keys_and_dtype(self, tmp_path):
        rng = np.random.default_rng(13)
        down = rng.standard_normal((2, 4))
        up = rng.standard_normal((3, 2))
        path = tmp_path / "lin.safetensors"
        reference_write(path, [
            ("s.lora_down.weight", "F16", (2, 4), payload_for(down, "F16")),
            ("s.lora_up.weight", "F16", (3, 2), payload_for(up, "F16")),
        ])
        lora = read_checkpoint(path)
        base = records({"s.weight": rng.standard_normal((3, 4))})
        (layer,) = pair_layers(lora, base, KeyMap(preset="custom", entries={"s": BaseRef("s.weight")}))
        assert layer.factor_dtype == "f16"
        out = layer_output_records(layer, up, down, 2.0, "f16")
        assert set(out) == {"s.lora_down.weight", "s.lora_up.weight"}
        assert out["s.lora_down.weight"].dtype == "f16"
